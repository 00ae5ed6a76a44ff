//! Attention, multi-head attention and the position-wise FFN as graph
//! functions over stacked row batches.
//!
//! Every function takes `batch`: inputs hold `batch` sequences stacked
//! row-wise, and attention never mixes rows of different sequences.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive logit for masked attention positions.
pub const MASK_VALUE: f64 = -1e9;

/// `softmax(q·kᵀ·scale + mask)·v`, block-wise over `batch` sequences.
/// `mask`, when given, is an `n×m` additive tensor shared by all blocks.
pub fn attn(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    scale: f64,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let logits = attn_logits(g, q, k, batch, scale, mask)?;
    let weights = g.softmax_rows(logits)?;
    g.batched_matmul(weights, v, batch, false)
        .map_err(|_| Error::dim("attn", g.shape(weights), g.shape(v)))
}

/// Scaled, masked `q·kᵀ` logits.
pub fn attn_logits(
    g: &mut Graph,
    q: Var,
    k: Var,
    batch: usize,
    scale: f64,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let scores = g
        .batched_matmul(q, k, batch, true)
        .map_err(|_| Error::dim("attn", g.shape(q), g.shape(k)))?;
    let scores = g.scale(scores, scale);
    match mask {
        Some(m) => g.add_const_blocks(scores, m),
        None => Ok(scores),
    }
}

/// Causal mask: position `t` may attend to `0..=t` only.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = MASK_VALUE;
        }
    }
    m
}

/// Prepends `extra` unmasked key columns to an `n×m` mask.
pub fn extend_mask(mask: &Tensor, extra: usize) -> Tensor {
    let (n, m) = (mask.rows(), mask.cols());
    let mut out = Tensor::zeros(&[n, extra + m]);
    for i in 0..n {
        out.data_mut()[i * (extra + m) + extra..(i + 1) * (extra + m)].copy_from_slice(mask.row(i));
    }
    out
}

/// Attention projections bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_q: Option<Var>,
    pub b_k: Option<Var>,
    pub b_v: Option<Var>,
    pub b_o: Option<Var>,
}

impl AttnVars {
    /// Bias-free projections from four constant matrices.
    pub fn constants(g: &mut Graph, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor, w_o: &Tensor) -> Self {
        Self {
            w_q: g.constant(w_q.clone()),
            w_k: g.constant(w_k.clone()),
            w_v: g.constant(w_v.clone()),
            w_o: g.constant(w_o.clone()),
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        }
    }
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// Projected queries, keys and values `(x·W_q, c·W_k, c·W_v)`.
pub fn project_qkv(g: &mut Graph, c: Var, x: Var, w: &AttnVars) -> Result<(Var, Var, Var)> {
    let q = linear(g, x, w.w_q, w.b_q)?;
    let k = linear(g, c, w.w_k, w.b_k)?;
    let v = linear(g, c, w.w_v, w.b_v)?;
    Ok((q, k, v))
}

/// Splits the columns of `x` into `heads` equal blocks.
pub fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Vec<Var>> {
    let d = g.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::dim("split_heads", g.shape(x), &[heads]));
    }
    let dh = d / heads;
    (0..heads).map(|i| g.slice_cols(x, i * dh, dh)).collect()
}

/// Per-head attention outputs before concatenation and `W_o`.
pub fn mha_heads(
    g: &mut Graph,
    c: Var,
    x: Var,
    w: &AttnVars,
    heads: usize,
    batch: usize,
    mask: Option<&Tensor>,
) -> Result<Vec<Var>> {
    let (q, k, v) = project_qkv(g, c, x, w)?;
    let dh = g.shape(q)[1] / heads.max(1);
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = split_heads(g, q, heads)?;
    let ks = split_heads(g, k, heads)?;
    let vs = split_heads(g, v, heads)?;
    qs.into_iter()
        .zip(ks)
        .zip(vs)
        .map(|((qi, ki), vi)| attn(g, qi, ki, vi, batch, scale, mask))
        .collect()
}

/// Multi-head attention of queries from `x` over keys/values from `c`.
pub fn mha(
    g: &mut Graph,
    c: Var,
    x: Var,
    w: &AttnVars,
    heads: usize,
    batch: usize,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let hs = mha_heads(g, c, x, w, heads, batch, mask)?;
    let cat = g.concat_cols(&hs)?;
    linear(g, cat, w.w_o, w.b_o)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

/// `relu(x·W_1 + b_1)·W_2 + b_2`.
pub fn ffn(g: &mut Graph, x: Var, w: &FfnVars) -> Result<Var> {
    let h = linear(g, x, w.w_1, Some(w.b_1))?;
    let h = g.relu(h);
    linear(g, h, w.w_2, Some(w.b_2))
}

/// Fixed sinusoidal position table, `n×d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let q = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[1, 3], 1.0, &mut rng));
        let v = g.constant(m(&[&[0.5, -1.5]]));
        let o = attn(&mut g, q, k, v, 1, 1.0 / 3f64.sqrt(), None).unwrap();
        for i in 0..4 {
            assert_eq!(g.value(o).row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(m(&[&[1.0, 2.0]]));
        let k = g.constant(m(&[&[0.3, 0.1], &[0.3, 0.1], &[0.3, 0.1]]));
        let v = g.constant(m(&[&[1.0, 0.0], &[2.0, 3.0], &[6.0, 0.0]]));
        let o = attn(&mut g, q, k, v, 1, 1.0, None).unwrap();
        assert!((g.value(o).get(0, 0) - 3.0).abs() < 1e-12);
        assert!((g.value(o).get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax_case() {
        let mut g = Graph::new();
        let q = g.constant(m(&[&[1.0, 0.0]]));
        let k = g.constant(Tensor::eye(2));
        let v = g.constant(Tensor::eye(2));
        let o = attn(&mut g, q, k, v, 1, 1.0, None).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(o).get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.value(o).get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((g.value(o).get(0, 0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn attn_rejects_key_width_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 4]));
        let v = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(attn(&mut g, q, k, v, 1, 1.0, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_head_identity_output_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        let wq = Tensor::randn(&[d, d], 0.5, &mut rng);
        let wk = Tensor::randn(&[d, d], 0.5, &mut rng);
        let wv = Tensor::randn(&[d, d], 0.5, &mut rng);
        let x = Tensor::randn(&[3, d], 1.0, &mut rng);
        let c = Tensor::randn(&[5, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let w = AttnVars::constants(&mut g, &wq, &wk, &wv, &Tensor::eye(d));
        let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
        let out = mha(&mut g, cv, xv, &w, 1, 1, None).unwrap();

        let mut h = Graph::new();
        let q = h.constant(x.matmul(&wq).unwrap());
        let k = h.constant(c.matmul(&wk).unwrap());
        let v = h.constant(c.matmul(&wv).unwrap());
        let reference = attn(&mut h, q, k, v, 1, 0.5, None).unwrap();
        assert!(g.value(out).max_abs_diff(h.value(reference)) < 1e-14);
    }

    #[test]
    fn zero_projections_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::zeros(&[8, 8]);
        let mut g = Graph::new();
        let w = AttnVars::constants(&mut g, &z, &z, &z, &z);
        let x = g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let out = mha(&mut g, x, x, &w, 2, 1, None).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[2.0]]));
        let w = FfnVars {
            w_1: g.constant(m(&[&[1.0]])),
            b_1: g.constant(Tensor::vector(vec![0.0])),
            w_2: g.constant(m(&[&[3.0]])),
            b_2: g.constant(Tensor::vector(vec![1.0])),
        };
        let y = ffn(&mut g, x, &w).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let b2 = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let zero = FfnVars {
            w_1: g.constant(Tensor::zeros(&[4, 6])),
            b_1: g.constant(Tensor::randn(&[6], 1.0, &mut rng)),
            w_2: g.constant(Tensor::zeros(&[6, 4])),
            b_2: g.constant(b2.clone()),
        };
        let y = ffn(&mut g, x, &zero).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(y).row(i), b2.data());
        }
        let saturated = FfnVars {
            w_1: g.constant(Tensor::randn(&[4, 6], 0.1, &mut rng)),
            b_1: g.constant(Tensor::full(&[6], -1e6)),
            w_2: g.constant(Tensor::randn(&[6, 4], 1.0, &mut rng)),
            b_2: g.constant(b2.clone()),
        };
        let y = ffn(&mut g, x, &saturated).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(y).row(i), b2.data());
        }
    }

    #[test]
    fn batched_attention_matches_per_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, n, m_len, dk) = (3, 4, 5, 2);
        let q = Tensor::randn(&[b * n, dk], 1.0, &mut rng);
        let k = Tensor::randn(&[b * m_len, dk], 1.0, &mut rng);
        let v = Tensor::randn(&[b * m_len, 3], 1.0, &mut rng);
        let mask = {
            let mut t = Tensor::zeros(&[n, m_len]);
            t.data_mut()[1] = MASK_VALUE;
            t
        };
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let all = attn(&mut g, qv, kv, vv, b, 0.7, Some(&mask)).unwrap();
        for i in 0..b {
            let mut h = Graph::new();
            let qi = h.constant(q.slice_rows(i * n, n));
            let ki = h.constant(k.slice_rows(i * m_len, m_len));
            let vi = h.constant(v.slice_rows(i * m_len, m_len));
            let one = attn(&mut h, qi, ki, vi, 1, 0.7, Some(&mask)).unwrap();
            assert_eq!(h.value(one), &g.value(all).slice_rows(i * n, n));
        }
    }

    #[test]
    fn mha_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let ws: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[d, d], 0.6, &mut rng)).collect();
        let c = Tensor::randn(&[3, d], 1.0, &mut rng);
        let mask = causal_mask(3);
        for _ in 0..3 {
            let x = Tensor::randn(&[3, d], 1.0, &mut rng);
            let (ws, c, mask) = (ws.clone(), c.clone(), mask.clone());
            let r = finite_diff_check(
                move |g, xv| {
                    let w = AttnVars::constants(g, &ws[0], &ws[1], &ws[2], &ws[3]);
                    let cv = g.constant(c.clone());
                    let y = mha(g, cv, xv, &w, 2, 1, Some(&mask))?;
                    weighted_sum(g, y, 5)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
        }
    }
}
