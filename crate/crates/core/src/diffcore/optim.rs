//! Named parameter sets and the Adam update.

use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

/// Ordered collection of named parameter tensors. Order is insertion order
/// and defines the binding/gradient order everywhere.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter {name:?}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn coord_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub(crate) fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter, plus the shared
/// step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam step. The L2 penalty is applied as `lambda * w` added to the
/// gradient before the moment update.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    l2_lambda: f64,
) -> Result<(), DiffError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(DiffError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (idx, grad) in grads.iter().enumerate() {
        if grad.len() != params.tensor_at(idx).len() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!("parameter {idx} has {} coords, gradient {}", params.tensor_at(idx).len(), grad.len()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for idx in 0..params.len() {
        let w = params.tensor_at_mut(idx).data_mut();
        let g = grads[idx].data();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..w.len() {
            let gi = g[i] + l2_lambda * w[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    fn single_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_zero_lambda_leaves_params_unchanged() {
        let mut p = single_param(1.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn l2_shrinks_params_toward_zero_on_zero_data_gradient() {
        let mut p = single_param(1.0);
        let mut st = AdamState::new(&p);
        for _ in 0..20 {
            adam_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 0.01, 1e-2).unwrap();
        }
        let w = p.get("w").unwrap().item();
        assert!(w > 0.0 && w < 1.0, "w = {w}");
    }

    #[test]
    fn one_step_on_square_descends() {
        // f(w) = w^2 from w = 1, lr = 0.1
        let mut p = single_param(1.0);
        let mut st = AdamState::new(&p);
        let mut tape = Tape::new();
        let bound = tape.bind(&p);
        let w = bound.var("w");
        let y = tape.mul(w, w).unwrap();
        let grads = tape.backward(y).unwrap();
        adam_step(&mut p, &grads.wrt_all(&bound), &mut st, 0.1, 0.0).unwrap();
        let w = p.get("w").unwrap().item();
        assert!(w < 1.0, "w = {w}");
    }

    #[test]
    fn mismatched_gradient_count_rejected() {
        let mut p = single_param(1.0);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[], &mut st, 0.1, 0.0).is_err());
    }
}
