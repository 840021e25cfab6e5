//! Central-finite-difference verification of tape gradients.

use rayon::prelude::*;

use super::{DiffError, ParamSet, Tape, Var};
use crate::diffcore::tape::BoundParams;

/// Maximum relative error between tape gradients and central finite
/// differences, over every coordinate of every parameter.
///
/// `f` must be deterministic (dropout inactive, batch statistics frozen)
/// and must build its output from the bound parameter leaves.
pub fn grad_check<F>(f: &F, params: &ParamSet, epsilon: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, DiffError> + Sync,
{
    let eval = |p: &ParamSet| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let bound = tape.bind(p);
        let out = f(&mut tape, &bound)?;
        Ok(tape.value(out).item())
    };

    // Tape gradients, flattened in parameter order.
    let analytic: Vec<f64> = {
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        let out = f(&mut tape, &bound)?;
        let grads = tape.backward(out)?;
        grads
            .wrt_all(&bound)
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect()
    };

    // (parameter index, coordinate) pairs for every scalar coordinate.
    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|pi| (0..params.tensor_at(pi).len()).map(move |ci| (pi, ci)))
        .collect();

    let fd: Vec<Result<f64, DiffError>> = coords
        .par_iter()
        .map_init(
            || params.clone(),
            |local, &(pi, ci)| {
                let orig = local.tensor_at(pi).data()[ci];
                local.tensor_at_mut(pi).data_mut()[ci] = orig + epsilon;
                let plus = eval(local)?;
                local.tensor_at_mut(pi).data_mut()[ci] = orig - epsilon;
                let minus = eval(local)?;
                local.tensor_at_mut(pi).data_mut()[ci] = orig;
                Ok((plus - minus) / (2.0 * epsilon))
            },
        )
        .collect();

    let mut max_rel = 0.0f64;
    for (g_fd, &g_ad) in fd.into_iter().zip(&analytic) {
        let g_fd = g_fd?;
        let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn quadratic_form_is_exact_to_roundoff() {
        // f(w) = w' A w + b . w with constant A, b
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.7, -1.3, 2.1]));
        let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.25, 0.0, -0.25, 3.0]).unwrap();
        let b = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let f = move |tape: &mut Tape, bound: &BoundParams| {
            let w = bound.var("w");
            let a = tape.leaf(a.clone());
            let b = tape.leaf(b.clone());
            let aw = tape.matmul(a, w)?;
            let waw = tape.dot(w, aw)?;
            let bw = tape.dot(b, w)?;
            tape.add(waw, bw)
        };
        let err = grad_check(&f, &params, 1e-5).unwrap();
        assert!(err < 1e-9, "max relative error {err}");
    }

    #[test]
    fn nonlinear_chain_passes() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.3, -0.8]));
        params.insert("bias", Tensor::scalar(0.1));
        let f = |tape: &mut Tape, bound: &BoundParams| {
            let w = bound.var("w");
            let b = bound.var("bias");
            let x = tape.leaf(Tensor::vector(vec![1.2, -0.4]));
            let wx = tape.mul(w, x)?;
            let s = tape.sum(wx)?;
            let z = tape.add(s, b)?;
            let t = tape.tanh(z)?;
            let sp = tape.softplus(t)?;
            let sg = tape.sigmoid(sp)?;
            tape.mse(sg, &Tensor::scalar(0.25))
        };
        let err = grad_check(&f, &params, 1e-5).unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }
}
