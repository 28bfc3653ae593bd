//! Central finite-difference checks of tape gradients (f64).
//!
//! The error of one tensor is `‖analytic − numeric‖₂ / max(‖analytic‖₂,
//! ‖numeric‖₂, ZERO_FLOOR)`; a check reports the worst tensor.

use super::rng::Rng;
use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel: f64,
    /// Label of the worst tensor.
    pub worst: String,
}

impl CheckReport {
    fn new() -> Self {
        Self {
            max_rel: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, label: String, analytic: &[f64], numeric: &[f64]) {
        let rel = rel_error(analytic, numeric);
        if rel > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(rel);
            self.worst = label;
        }
    }
}

/// Norm below which a gradient counts as zero. Central differences carry
/// rounding noise near `1e-10`, so errors are measured against this floor.
pub const ZERO_FLOOR: f64 = 1e-5;

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(ZERO_FLOOR)
}

/// `Σ w ⊙ y` with fixed random weights, turning any output into a scalar
/// loss without symmetric cancellation.
pub fn project(tape: &Tape<'_, f64>, y: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.shape(y);
    let w = tape.constant(rng.uniform_tensor(&shape, 1.0));
    Ok(tape.sum_all(tape.mul(y, w)?))
}

fn scalar(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::dim("gradcheck loss", &[1], &[t.numel()]));
    }
    Ok(t.data()[0])
}

/// Checks the gradient of `f` with respect to every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::standalone();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward_scalar(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::standalone();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.input(x.clone(), false)).collect();
        let l = f(&t, &vs)?;
        scalar(&t, l)
    };

    let mut report = CheckReport::new();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        report.record(format!("input {k}"), &analytic, &numeric);
    }
    Ok(report)
}

/// Checks parameter gradients of `f`. At most `max_elems` entries per
/// parameter are perturbed, evenly spaced; the analytic side is restricted
/// to the same entries.
pub fn check_params<F>(store: &ParamStore<f64>, ids: &[ParamId], max_elems: usize, step: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&Tape<'_, f64>) -> Result<Var>,
{
    let tape = Tape::new(store);
    let loss = f(&tape)?;
    let grads = tape.backward_scalar(loss)?;

    let mut report = CheckReport::new();
    let mut work = store.clone();
    for &id in ids {
        let numel = store.get(id).numel();
        let stride = numel.div_ceil(max_elems.max(1)).max(1);
        let picks: Vec<usize> = (0..numel).step_by(stride).collect();
        let dense = grads.param(id).map(|g| g.to_dense(numel)).unwrap_or_else(|| vec![0.0; numel]);
        let analytic: Vec<f64> = picks.iter().map(|&i| dense[i]).collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = {
                let t = Tape::inference(&work);
                let l = f(&t)?;
                scalar(&t, l)?
            };
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = {
                let t = Tape::inference(&work);
                let l = f(&t)?;
                scalar(&t, l)?
            };
            work.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        report.record(store.name(id).to_string(), &analytic, &numeric);
    }
    Ok(report)
}
