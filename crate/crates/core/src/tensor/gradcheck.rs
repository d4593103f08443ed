//! Central finite-difference checks for tape gradients.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::value::{Result, Tensor, TensorError};

/// Norms below this are treated as zero when forming relative errors.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, NORM_FLOOR)`.
    pub rel_errors: Vec<f64>,
    /// The same measure over all inputs flattened into one vector.
    pub overall: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(a.data(), &numeric));
        all_a.extend_from_slice(a.data());
        all_n.extend(numeric);
    }
    let overall = relative_error(&all_a, &all_n);
    Ok(GradCheckReport { rel_errors, overall })
}

/// Finite-difference check of every parameter in `store` for the scalar built
/// by `f` from the bound parameters.
pub fn check_param_gradients<E, F>(store: &ParamStore, h: f64, f: F) -> std::result::Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Tape<'_>, &Bound) -> std::result::Result<Var, E>,
{
    let eval = |s: &ParamStore| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let p = s.bind_frozen(&mut tape);
        let out = f(&mut tape, &p)?;
        Ok(tape.value(out).item())
    };
    let analytic = {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = f(&mut tape, &p)?;
        tape.backward(out)?;
        p.grads(&tape, store)
    };
    let mut work = store.clone();
    let mut rel_errors = Vec::with_capacity(analytic.len());
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work.tensors()[i].data()[j];
            work.tensors_mut()[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(a.data(), &numeric));
        all_a.extend_from_slice(a.data());
        all_n.extend(numeric);
    }
    let overall = relative_error(&all_a, &all_n);
    Ok(GradCheckReport { rel_errors, overall })
}
