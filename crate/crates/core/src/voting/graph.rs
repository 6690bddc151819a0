use super::{StdMode, VoteConfig, VotingError, WeightedVariant};
use crate::numerics::{Scalar, Tape, Var};

/// Differentiable vote over `samples` (each L×V) recorded on `tape`; returns the final logits.
pub fn vote_on_tape<T: Scalar>(tape: &mut Tape<T>, samples: &[Var], cfg: &VoteConfig) -> Result<Var, VotingError> {
    cfg.validate()?;
    let (&first, rest) = samples.split_first().ok_or_else(|| VotingError::Input("empty stack".into()))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let n = samples.len();
    let mut sum = first;
    for &s in rest {
        sum = tape.add(sum, s)?;
    }
    let mean = tape.div_scalar(sum, T::from_usize_lossy(n));
    let mut sq = None;
    for &s in samples {
        let d = tape.sub(s, mean)?;
        let d2 = tape.square(d);
        sq = Some(match sq {
            None => d2,
            Some(acc) => tape.add(acc, d2)?,
        });
    }
    let divisor = match cfg.std_mode {
        StdMode::Unbiased => n - 1,
        StdMode::Population => n,
    };
    let var = tape.div_scalar(sq.expect("n >= 2"), T::from_usize_lossy(divisor));
    let std = tape.sqrt(var);
    let shifted = tape.add_scalar(std, T::one());
    let weights = tape.recip(shifted);
    let base = match cfg.variant {
        WeightedVariant::Summed => sum,
        WeightedVariant::Averaged => mean,
    };
    let num = tape.mul(weights, base)?;
    let norm = tape.row_sum(weights);
    let weighted = tape.div_rows(num, norm)?;
    let alpha = T::lit(cfg.alpha);
    let a = tape.scale(mean, alpha);
    let b = tape.scale(weighted, T::one() - alpha);
    Ok(tape.add(a, b)?)
}

/// Cross-entropy of the voted logits against `targets`, averaged over valid positions.
pub fn voted_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[Var],
    targets: &[usize],
    valid: Option<&[bool]>,
    cfg: &VoteConfig,
) -> Result<Var, VotingError> {
    let voted = vote_on_tape(tape, samples, cfg)?;
    if targets.len() != tape.value(voted).rows() {
        return Err(VotingError::Input(format!(
            "{} targets for {} positions",
            targets.len(),
            tape.value(voted).rows()
        )));
    }
    Ok(tape.cross_entropy(voted, targets, valid)?)
}
