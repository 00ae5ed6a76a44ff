//! Central finite-difference validation of [`Graph::backward`].

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the backward gradient of the scalar function `f` at `point`
/// against `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` coordinate by coordinate.
///
/// `f` receives a fresh graph and the input as a differentiable leaf, and
/// must return a single-element node.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference step must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    let analytic = g.backward(out)?.get(x);

    let mut numeric = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * eps);
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights so every
/// output coordinate contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, v: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let w = g.constant(Tensor::new(&shape, weights)?);
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let r = finite_diff_check(|g, x| Ok(g.sum(x)), &p, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::ones(&[2, 2]);
        let r = finite_diff_check(
            |g, _x| {
                let c = g.constant(Tensor::scalar(3.0));
                Ok(g.sum(c))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let p = Tensor::ones(&[1]);
        assert!(finite_diff_check(|g, x| Ok(g.sum(x)), &p, 1e-1).is_err());
    }

    #[test]
    fn matmul_relu_softmax_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        for _ in 0..10 {
            let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let wk = w.clone();
            let f = move |g: &mut Graph, x: Var| {
                let wv = g.constant(wk.clone());
                let y = g.matmul(x, wv)?;
                let y = g.relu(y);
                let s = g.softmax_rows(y)?;
                weighted_sum(g, s, 3)
            };
            // skip points whose pre-activations sit near the ReLU kink
            let pre = p.matmul(&w).unwrap();
            if pre.data().iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
            let r = finite_diff_check(f, &p, 1e-4).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
        }
    }
}
