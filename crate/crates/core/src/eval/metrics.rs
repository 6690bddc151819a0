//! Sequence and estimator metrics.

use thiserror::Error;

use crate::numerics::{softmax_cross_entropy, Scalar};
use crate::voting::LogitStack;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("invalid metric input: {0}")]
    Input(String),
}

/// Length of the longest common subsequence.
pub fn lcs_len<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 between a candidate and a non-empty reference.
pub fn rouge_l<A: PartialEq>(candidate: &[A], reference: &[A]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::Input("empty reference".into()));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Terms of `E[(Ŷ - Y)²] = bias² + variance + residual`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasVariance<T> {
    pub bias_sq: T,
    pub variance: T,
    pub residual: T,
    pub mse: T,
}

/// Decomposes the squared error of repeated predictions of one target (population variance).
pub fn bias_variance_decompose<T: Scalar>(predictions: &[T], truth: T) -> Result<BiasVariance<T>, MetricError> {
    if predictions.len() < 2 {
        return Err(MetricError::Input(format!("need at least 2 predictions, got {}", predictions.len())));
    }
    let n = T::from_usize_lossy(predictions.len());
    let mean = predictions.iter().copied().sum::<T>() / n;
    let bias_sq = (mean - truth) * (mean - truth);
    let variance = predictions.iter().map(|&p| (p - mean) * (p - mean)).sum::<T>() / n;
    let mse = predictions.iter().map(|&p| (p - truth) * (p - truth)).sum::<T>() / n;
    Ok(BiasVariance { bias_sq, variance, residual: mse - bias_sq - variance, mse })
}

/// Mean per-sample cross-entropy minus cross-entropy of the mean logits, averaged over valid positions.
pub fn jensen_gap<T: Scalar>(stack: &LogitStack<T>, targets: &[usize]) -> Result<T, MetricError> {
    if targets.len() != stack.positions() {
        return Err(MetricError::Input(format!("{} targets for {} positions", targets.len(), stack.positions())));
    }
    let n = T::from_usize_lossy(stack.samples());
    let mut total = T::zero();
    let mut valid = 0usize;
    let mut mean = vec![T::zero(); stack.vocab()];
    for (j, &t) in targets.iter().enumerate() {
        if !stack.mask()[j] {
            continue;
        }
        mean.iter_mut().for_each(|m| *m = T::zero());
        let mut per_sample = T::zero();
        for i in 0..stack.samples() {
            let row = stack.logits(i, j);
            mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x);
            per_sample += ce(row, t)?;
        }
        mean.iter_mut().for_each(|m| *m /= n);
        total += per_sample / n - ce(&mean, t)?;
        valid += 1;
    }
    if valid == 0 {
        return Err(MetricError::Input("no valid positions".into()));
    }
    Ok(total / T::from_usize_lossy(valid))
}

fn ce<T: Scalar>(row: &[T], t: usize) -> Result<T, MetricError> {
    softmax_cross_entropy(row, t).map_err(|e| MetricError::Input(e.to_string()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn rouge_l_reference_cases() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(rouge_l::<u32>(&[], &[3, 4]).unwrap(), 0.0);
        assert_eq!(rouge_l(&["the", "cat", "sat"], &["the", "cat"]).unwrap(), 0.8);
        assert!(rouge_l::<u32>(&[1], &[]).is_err());
    }

    #[test]
    fn lcs_handles_interleaving() {
        assert_eq!(lcs_len(&[1, 3, 2, 4, 5], &[1, 2, 3, 5]), 3);
        assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
    }

    #[test]
    fn decomposition_reference_cases() {
        let bv = bias_variance_decompose(&[1.0f64, 2.0, 3.0], 2.0).unwrap();
        assert_eq!(bv.bias_sq, 0.0);
        assert!((bv.variance - 2.0 / 3.0).abs() < 1e-15);
        assert!((bv.mse - 2.0 / 3.0).abs() < 1e-15);
        assert!(bv.residual.abs() < 1e-15);
        let bv = bias_variance_decompose(&[5.0, 5.0, 5.0], 2.0).unwrap();
        assert_eq!((bv.bias_sq, bv.variance, bv.residual), (9.0, 0.0, 0.0));
        assert!(bias_variance_decompose(&[1.0], 2.0).is_err());
    }

    #[test]
    fn jensen_gap_degenerate_cases() {
        let one = LogitStack::new(1, 2, 3, vec![0.1, 0.5, -1.0, 2.0, 0.0, 0.3]).unwrap();
        assert_eq!(jensen_gap(&one, &[0, 2]).unwrap(), 0.0);
        let same = LogitStack::from_samples(&[vec![0.1, 0.5, -1.0], vec![0.1, 0.5, -1.0]], 1, 3).unwrap();
        assert_eq!(jensen_gap(&same, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn jensen_gap_non_negative_on_random_stacks() {
        let mut rng = RngStream::new(21, 0);
        for _ in 0..1000 {
            let n = 2 + rng.below(7);
            let v = 2 + rng.below(15);
            let l = 1 + rng.below(4);
            let scale = 0.1 + 5.0 * rng.uniform();
            let data = (0..n * l * v).map(|_| scale * rng.normal()).collect();
            let stack = LogitStack::new(n, l, v, data).unwrap();
            let targets: Vec<usize> = (0..l).map(|_| rng.below(v)).collect();
            assert!(jensen_gap(&stack, &targets).unwrap() >= -1e-9);
        }
    }

    proptest! {
        #[test]
        fn decomposition_identity(preds in prop::collection::vec(-10.0f64..10.0, 2..40), truth in -10.0f64..10.0) {
            let bv = bias_variance_decompose(&preds, truth).unwrap();
            prop_assert!((bv.bias_sq + bv.variance - bv.mse).abs() <= 1e-12);
            prop_assert!(bv.bias_sq >= 0.0 && bv.variance >= 0.0);
        }

        #[test]
        fn rouge_l_symmetric_for_equal_lengths(pair in (1usize..12).prop_flat_map(|n| (prop::collection::vec(0u32..6, n), prop::collection::vec(0u32..6, n)))) {
            let (a, b) = pair;
            prop_assert_eq!(rouge_l(&a, &b).unwrap(), rouge_l(&b, &a).unwrap());
        }

        #[test]
        fn rouge_l_does_not_grow_when_matched_tokens_are_deleted(
            cand in prop::collection::vec(0u32..5, 1..12),
            reference in prop::collection::vec(0u32..5, 1..12),
            pick in 0usize..12,
        ) {
            let before = rouge_l(&cand, &reference).unwrap();
            let lcs = lcs_len(&cand, &reference);
            let without = |i: usize| { let mut c = cand.clone(); c.remove(i); c };
            // tokens every longest common subsequence relies on
            let matched: Vec<usize> = (0..cand.len()).filter(|&i| lcs_len(&without(i), &reference) < lcs).collect();
            prop_assume!(!matched.is_empty());
            let after = rouge_l(&without(matched[pick % matched.len()]), &reference).unwrap();
            prop_assert!(after <= before + 1e-12, "{} > {}", after, before);
        }
    }
}
