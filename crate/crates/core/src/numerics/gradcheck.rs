use super::{NumericsError, Scalar, Tape, Tensor, Var};

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    pub max_abs_error: T,
    pub coordinates: usize,
    /// (parameter index, flat coordinate) of the worst relative error.
    pub worst: (usize, usize),
}

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
const FLOOR: f64 = 1e-8;

/// Checks `build`'s gradient with respect to every coordinate of `params`.
///
/// `build` receives a fresh tape with `params` bound as leaves (in order) and
/// returns the scalar loss. It is re-run for every perturbation, so any
/// randomness inside it must be replayed from a fixed stream on each call.
pub fn finite_difference_check<T, F>(
    params: &[Tensor<T>],
    eps: T,
    mut build: F,
) -> Result<GradCheckReport<T>, NumericsError>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(eps > T::zero()) {
        return Err(NumericsError::Config("finite-difference step must be positive".into()));
    }
    let mut eval = |ps: &[Tensor<T>], with_grad: bool| -> Result<(T, Vec<Vec<T>>), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(NumericsError::Numeric(format!("loss evaluated to {value}")));
        }
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(loss)?;
            for (v, p) in vars.iter().zip(ps) {
                grads.push(tape.grad(*v).map_or_else(|| vec![T::zero(); p.numel()], <[T]>::to_vec));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let two = T::lit(2.0);
    let floor = T::lit(FLOOR);
    let mut report =
        GradCheckReport { max_rel_error: T::zero(), max_abs_error: T::zero(), coordinates: 0, worst: (0, 0) };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for pi in 0..params.len() {
        for c in 0..params[pi].numel() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[c] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (two * eps);
            let a = analytic[pi][c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, c);
            }
        }
    }
    Ok(report)
}
