//! Δh functional forms and the two forms of prefix attention.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::layers::{attn, attn_logits, extend_mask, project_qkv, split_heads, AttnVars};
use crate::tensor::Tensor;

use super::design::{Composition, FunctionalForm};

/// `f(input·W_down)·W_up` with `f` = ReLU or identity.
pub fn bottleneck_delta(g: &mut Graph, input: Var, down: Var, up: Var, form: FunctionalForm) -> Result<Var> {
    let z = g
        .matmul(input, down)
        .map_err(|_| Error::dim("bottleneck_delta", g.shape(input), g.shape(down)))?;
    let z = match form {
        FunctionalForm::ReluBottleneck => g.relu(z),
        FunctionalForm::LinearBottleneck => z,
        FunctionalForm::SoftmaxBottleneck => {
            return Err(Error::Contract("softmax bottleneck needs prefix attention".into()))
        }
    };
    g.matmul(z, up)
        .map_err(|_| Error::dim("bottleneck_delta", g.shape(z), g.shape(up)))
}

/// Adapter Δh: `relu(input·W_down)·W_up`.
pub fn adapter_delta(g: &mut Graph, input: Var, down: Var, up: Var) -> Result<Var> {
    bottleneck_delta(g, input, down, up, FunctionalForm::ReluBottleneck)
}

/// LoRA Δ: `s·x·W_down·W_up`.
pub fn lora_delta(g: &mut Graph, x: Var, down: Var, up: Var, s: f64) -> Result<Var> {
    let d = bottleneck_delta(g, x, down, up, FunctionalForm::LinearBottleneck)?;
    Ok(g.scale(d, s))
}

/// Per-head ReLU bottlenecks over the column blocks of `x`.
pub fn multihead_parallel_adapter_delta(g: &mut Graph, x: Var, heads: &[(Var, Var)]) -> Result<Vec<Var>> {
    let xs = split_heads(g, x, heads.len())?;
    xs.into_iter()
        .zip(heads)
        .map(|(xi, &(down, up))| adapter_delta(g, xi, down, up))
        .collect()
}

/// Merges Δh into `h`. `lambda` is required for [`Composition::GatedAdd`];
/// `scale` overrides the constant of [`Composition::ScaledAdd`] with a
/// learned scalar.
pub fn compose(
    g: &mut Graph,
    h: Var,
    delta: Var,
    composition: Composition,
    lambda: Option<Var>,
    scale: Option<Var>,
) -> Result<Var> {
    match composition {
        Composition::Add => g.add(h, delta),
        Composition::ScaledAdd(s) => {
            let sd = match scale {
                Some(sv) => g.mul_scalar(delta, sv)?,
                None => g.scale(delta, s),
            };
            g.add(h, sd)
        }
        Composition::GatedAdd => {
            let lambda =
                lambda.ok_or_else(|| Error::Contract("gated composition without a gate".into()))?;
            let keep = g.affine(lambda, -1.0, 1.0);
            let a = g.mul_rows(h, keep)?;
            let b = g.mul_rows(delta, lambda)?;
            g.add(a, b)
        }
    }
}

/// Prefix keys and values bound on a graph, `l × d` each.
#[derive(Clone, Copy, Debug)]
pub struct PrefixVars {
    pub key: Var,
    pub value: Var,
}

fn prefix_len(g: &Graph, p: &PrefixVars) -> Result<usize> {
    let l = g.shape(p.key)[0];
    if l == 0 {
        return Err(Error::Contract("prefix length must be at least 1".into()));
    }
    if g.shape(p.value) != g.shape(p.key) {
        return Err(Error::dim("prefix", g.shape(p.key), g.shape(p.value)));
    }
    Ok(l)
}

/// One head of prefix attention with the prefixes literally prepended to
/// the keys and values of every sequence.
#[allow(clippy::too_many_arguments)]
pub fn prefix_head_native(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    pk: Var,
    pv: Var,
    batch: usize,
    scale: f64,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let l = g.shape(pk)[0];
    let keys = g.batched_concat_rows(pk, k, batch, true)?;
    let values = g.batched_concat_rows(pv, v, batch, true)?;
    let mask = mask.map(|m| extend_mask(m, l));
    attn(g, q, keys, values, batch, scale, mask.as_ref())
}

/// Total attention mass on the prefix positions, `(batch·n) × 1`, from a
/// log-sum-exp over each logit group.
pub fn head_lambda(
    g: &mut Graph,
    q: Var,
    k: Var,
    pk: Var,
    batch: usize,
    scale: f64,
    mask: Option<&Tensor>,
) -> Result<(Var, Var, Var)> {
    let content = attn_logits(g, q, k, batch, scale, mask)?;
    let prefix = g.matmul_nt(q, pk)?;
    let prefix = g.scale(prefix, scale);
    let lse_prefix = g.logsumexp_rows(prefix)?;
    let both = g.concat_cols(&[prefix, content])?;
    let lse_all = g.logsumexp_rows(both)?;
    let diff = g.sub(lse_prefix, lse_all)?;
    Ok((g.exp(diff), prefix, content))
}

/// One head of prefix attention in decomposed form:
/// `(1-λ)·Attn(q, K, V) + λ·softmax(q·P_kᵀ)·P_v`. Other compositions
/// replace the gate (`Add` gives `h + Δh`). Returns the output and λ.
#[allow(clippy::too_many_arguments)]
pub fn prefix_head_decomposed(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    pk: Var,
    pv: Var,
    batch: usize,
    scale: f64,
    mask: Option<&Tensor>,
    composition: Composition,
    learned_scale: Option<Var>,
) -> Result<(Var, Var)> {
    let (lambda, prefix_logits, content_logits) = head_lambda(g, q, k, pk, batch, scale, mask)?;
    let w = g.softmax_rows(content_logits)?;
    let h = g.batched_matmul(w, v, batch, false)?;
    let pw = g.softmax_rows(prefix_logits)?;
    let delta = g.matmul(pw, pv)?;
    let out = compose(g, h, delta, composition, Some(lambda), learned_scale)?;
    Ok((out, lambda))
}

fn head_inputs(
    g: &mut Graph,
    x: Var,
    c: Var,
    w: &AttnVars,
    p: &PrefixVars,
    heads: usize,
) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>, Vec<Var>, Vec<Var>, f64)> {
    prefix_len(g, p)?;
    let (q, k, v) = project_qkv(g, c, x, w)?;
    let d = g.shape(q)[1];
    if g.shape(p.key)[1] != d {
        return Err(Error::dim("prefix", g.shape(p.key), g.shape(q)));
    }
    let scale = 1.0 / ((d / heads.max(1)) as f64).sqrt();
    Ok((
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
        split_heads(g, p.key, heads)?,
        split_heads(g, p.value, heads)?,
        scale,
    ))
}

/// Per-head prefix attention, prefixes prepended to keys and values.
#[allow(clippy::too_many_arguments)]
pub fn prefix_attention_native(
    g: &mut Graph,
    x: Var,
    c: Var,
    w: &AttnVars,
    p: &PrefixVars,
    heads: usize,
    batch: usize,
    mask: Option<&Tensor>,
) -> Result<Vec<Var>> {
    let (qs, ks, vs, pks, pvs, scale) = head_inputs(g, x, c, w, p, heads)?;
    (0..heads)
        .map(|i| prefix_head_native(g, qs[i], ks[i], vs[i], pks[i], pvs[i], batch, scale, mask))
        .collect()
}

/// Per-head λ, each `(batch·n) × 1`.
#[allow(clippy::too_many_arguments)]
pub fn prefix_lambda(
    g: &mut Graph,
    x: Var,
    c: Var,
    w: &AttnVars,
    p: &PrefixVars,
    heads: usize,
    batch: usize,
    mask: Option<&Tensor>,
) -> Result<Vec<Var>> {
    let (qs, ks, _, pks, _, scale) = head_inputs(g, x, c, w, p, heads)?;
    (0..heads)
        .map(|i| Ok(head_lambda(g, qs[i], ks[i], pks[i], batch, scale, mask)?.0))
        .collect()
}

/// Per-head prefix attention in decomposed form. With `gating` off the
/// heads return `h + Δh`.
#[allow(clippy::too_many_arguments)]
pub fn prefix_attention_equivalent(
    g: &mut Graph,
    x: Var,
    c: Var,
    w: &AttnVars,
    p: &PrefixVars,
    heads: usize,
    batch: usize,
    mask: Option<&Tensor>,
    gating: bool,
) -> Result<Vec<Var>> {
    let (qs, ks, vs, pks, pvs, scale) = head_inputs(g, x, c, w, p, heads)?;
    let composition = if gating {
        Composition::GatedAdd
    } else {
        Composition::Add
    };
    (0..heads)
        .map(|i| {
            Ok(prefix_head_decomposed(
                g, qs[i], ks[i], vs[i], pks[i], pvs[i], batch, scale, mask, composition, None,
            )?
            .0)
        })
        .collect()
}

/// MLP bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct PrefixMlpVars {
    pub embedding: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

/// Runs the prefix MLP and returns `(P_k, P_v)` for every slot, where slot
/// `s` occupies output columns `[2sd, 2sd + 2d)`.
pub fn prefix_reparam_forward(g: &mut Graph, mlp: &PrefixMlpVars, d: usize) -> Result<Vec<PrefixVars>> {
    let h = g.matmul(mlp.embedding, mlp.w_1)?;
    let h = g.add_bias(h, mlp.b_1)?;
    let h = g.tanh(h);
    let out = g.matmul(h, mlp.w_2)?;
    let out = g.add_bias(out, mlp.b_2)?;
    let width = g.shape(out)[1];
    if !width.is_multiple_of(2 * d) {
        return Err(Error::dim("prefix_reparam", g.shape(out), &[2 * d]));
    }
    (0..width / (2 * d))
        .map(|s| {
            Ok(PrefixVars {
                key: g.slice_cols(out, 2 * s * d, d)?,
                value: g.slice_cols(out, 2 * s * d + d, d)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::{causal_mask, mha_heads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn adapter_delta_examples() {
        let mut g = Graph::new();
        let h = g.constant(m(&[&[1.0]]));
        let down = g.constant(m(&[&[2.0]]));
        let up = g.constant(m(&[&[0.5]]));
        let d = adapter_delta(&mut g, h, down, up).unwrap();
        assert_eq!(g.value(d).data(), &[1.0]);
        let composed = compose(&mut g, h, d, Composition::Add, None, None).unwrap();
        assert_eq!(g.value(composed).data(), &[2.0]);

        let neg = g.constant(m(&[&[-1.0]]));
        let one = g.constant(m(&[&[1.0]]));
        let five = g.constant(m(&[&[5.0]]));
        let d = adapter_delta(&mut g, neg, one, five).unwrap();
        assert_eq!(g.value(d).data(), &[0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let down = g.constant(Tensor::randn(&[4, 2], 1.0, &mut rng));
        let zero = g.constant(Tensor::zeros(&[2, 4]));
        let d = adapter_delta(&mut g, x, down, zero).unwrap();
        let out = compose(&mut g, x, d, Composition::Add, None, None).unwrap();
        assert_eq!(g.value(out), g.value(x));
    }

    #[test]
    fn adapter_delta_rejects_width_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let down = g.constant(Tensor::zeros(&[4, 2]));
        let up = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(adapter_delta(&mut g, x, down, up), Err(Error::Dimension { .. })));
    }

    #[test]
    fn lora_delta_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 0.0]]));
        let down = g.constant(m(&[&[1.0], &[0.0]]));
        let up = g.constant(m(&[&[2.0, 0.0]]));
        let d = lora_delta(&mut g, x, down, up, 3.0).unwrap();
        assert_eq!(g.value(d).data(), &[6.0, 0.0]);

        let zero = g.constant(Tensor::zeros(&[1, 2]));
        let d = lora_delta(&mut g, x, down, zero, 3.0).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_merge_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let down = Tensor::randn(&[6, 2], 1.0, &mut rng);
        let up = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let s = 2.5;
        let merged = w.add(&down.matmul(&up).unwrap().scale(s)).unwrap();
        let direct = x.matmul(&merged).unwrap();

        let mut g = Graph::new();
        let (xv, wv, dv, uv) = (g.constant(x), g.constant(w), g.constant(down), g.constant(up));
        let base = g.matmul(xv, wv).unwrap();
        let delta = lora_delta(&mut g, xv, dv, uv, s).unwrap();
        let attached = g.add(base, delta).unwrap();
        assert!(g.value(attached).max_abs_diff(&direct) <= 1e-10);
    }

    #[test]
    fn scaled_add_with_unit_scale_equals_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let h = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let d = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let a = compose(&mut g, h, d, Composition::Add, None, None).unwrap();
        let b = compose(&mut g, h, d, Composition::ScaledAdd(1.0), None, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    struct Case {
        w: [Tensor; 4],
        x: Tensor,
        c: Tensor,
        pk: Tensor,
        pv: Tensor,
    }

    fn case(d: usize, l: usize, n: usize, m_len: usize, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        Case {
            w: [
                Tensor::randn(&[d, d], s, &mut rng),
                Tensor::randn(&[d, d], s, &mut rng),
                Tensor::randn(&[d, d], s, &mut rng),
                Tensor::randn(&[d, d], s, &mut rng),
            ],
            x: Tensor::randn(&[n, d], 1.0, &mut rng),
            c: Tensor::randn(&[m_len, d], 1.0, &mut rng),
            pk: Tensor::randn(&[l, d], 1.0, &mut rng),
            pv: Tensor::randn(&[l, d], 1.0, &mut rng),
        }
    }

    fn bind(g: &mut Graph, cs: &Case) -> (Var, Var, AttnVars, PrefixVars) {
        let w = AttnVars::constants(g, &cs.w[0], &cs.w[1], &cs.w[2], &cs.w[3]);
        let p = PrefixVars {
            key: g.constant(cs.pk.clone()),
            value: g.constant(cs.pv.clone()),
        };
        (g.constant(cs.x.clone()), g.constant(cs.c.clone()), w, p)
    }

    #[test]
    fn native_and_decomposed_agree() {
        for (seed, heads) in [(1, 1), (2, 2), (3, 4)] {
            let cs = case(8, 3, 4, 5, seed);
            let mut g = Graph::new();
            let (x, c, w, p) = bind(&mut g, &cs);
            let a = prefix_attention_native(&mut g, x, c, &w, &p, heads, 1, None).unwrap();
            let b = prefix_attention_equivalent(&mut g, x, c, &w, &p, heads, 1, None, true).unwrap();
            for (ha, hb) in a.iter().zip(&b) {
                assert!(g.value(*ha).max_rel_diff(g.value(*hb), 1e-12) < 1e-10);
            }
        }
    }

    #[test]
    fn native_and_decomposed_agree_under_causal_mask() {
        let cs = case(8, 2, 4, 4, 17);
        let mask = causal_mask(4);
        let mut g = Graph::new();
        let (x, _, w, p) = bind(&mut g, &cs);
        let a = prefix_attention_native(&mut g, x, x, &w, &p, 2, 1, Some(&mask)).unwrap();
        let b = prefix_attention_equivalent(&mut g, x, x, &w, &p, 2, 1, Some(&mask), true).unwrap();
        for (ha, hb) in a.iter().zip(&b) {
            assert!(g.value(*ha).max_rel_diff(g.value(*hb), 1e-12) < 1e-10);
        }
    }

    #[test]
    fn zero_prefix_values_scale_standard_output() {
        let mut cs = case(8, 3, 4, 5, 5);
        cs.pv = Tensor::zeros(&[3, 8]);
        let mut g = Graph::new();
        let (x, c, w, p) = bind(&mut g, &cs);
        let native = prefix_attention_native(&mut g, x, c, &w, &p, 2, 1, None).unwrap();
        let lambdas = prefix_lambda(&mut g, x, c, &w, &p, 2, 1, None).unwrap();
        let standard = mha_heads(&mut g, c, x, &w, 2, 1, None).unwrap();
        for i in 0..2 {
            let lam = g.value(lambdas[i]).clone();
            let std_out = g.value(standard[i]);
            let nat = g.value(native[i]);
            for r in 0..4 {
                for j in 0..4 {
                    let expected = (1.0 - lam.data()[r]) * std_out.get(r, j);
                    assert!((nat.get(r, j) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn suppressed_prefix_recovers_standard_attention() {
        // prefix logits forced 40 below every content logit
        let cs = case(8, 2, 3, 4, 6);
        let mut g = Graph::new();
        let (x, c, w, _) = bind(&mut g, &cs);
        let (q, k, _) = project_qkv(&mut g, c, x, &w).unwrap();
        let scale = 1.0 / 8f64.sqrt();
        // choose P_k = -γ·mean(q) direction so q·P_kᵀ is very negative
        let qv = g.value(q).clone();
        let kv = g.value(k).clone();
        let mean_q: Vec<f64> = (0..8).map(|j| (0..3).map(|i| qv.get(i, j)).sum::<f64>() / 3.0).collect();
        let min_q_dot = (0..3)
            .map(|i| (0..8).map(|j| qv.get(i, j) * mean_q[j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!(min_q_dot > 0.0, "test case needs queries sharing a direction");
        let max_content = qv.matmul(&kv.transpose().unwrap()).unwrap().max_abs() * scale;
        let gamma = (40.0 + max_content) / (min_q_dot * scale);
        let pk_row: Vec<f64> = mean_q.iter().map(|v| -gamma * v).collect();
        let pk = Tensor::from_rows(&[&pk_row, &pk_row]).unwrap();
        let p = PrefixVars {
            key: g.constant(pk),
            value: g.constant(cs.pv.clone()),
        };
        let native = prefix_attention_native(&mut g, x, c, &w, &p, 1, 1, None).unwrap();
        let lam = prefix_lambda(&mut g, x, c, &w, &p, 1, 1, None).unwrap();
        let standard = mha_heads(&mut g, c, x, &w, 1, 1, None).unwrap();
        assert!(g.value(lam[0]).data().iter().all(|&v| v < 1e-16));
        assert!(g.value(native[0]).max_abs_diff(g.value(standard[0])) < 1e-9);
    }

    #[test]
    fn gating_off_with_zero_values_is_standard_attention() {
        let mut cs = case(8, 3, 2, 5, 9);
        cs.pv = Tensor::zeros(&[3, 8]);
        let mut g = Graph::new();
        let (x, c, w, p) = bind(&mut g, &cs);
        let eq = prefix_attention_equivalent(&mut g, x, c, &w, &p, 4, 1, None, false).unwrap();
        let standard = mha_heads(&mut g, c, x, &w, 4, 1, None).unwrap();
        for (a, b) in eq.iter().zip(&standard) {
            assert_eq!(g.value(*a), g.value(*b));
        }
    }

    #[test]
    fn lambda_uniform_logits() {
        // zero prefixes and zero query projection: all logits equal
        let mut cs = case(8, 2, 4, 3, 10);
        cs.pk = Tensor::zeros(&[2, 8]);
        cs.w[0] = Tensor::zeros(&[8, 8]);
        let mut g = Graph::new();
        let (x, c, w, p) = bind(&mut g, &cs);
        let lam = prefix_lambda(&mut g, x, c, &w, &p, 2, 1, None).unwrap();
        for v in lam {
            assert!(g.value(v).data().iter().all(|&x| (x - 0.4).abs() <= 1e-12));
        }
    }

    #[test]
    fn empty_prefix_is_a_contract_error() {
        let cs = case(8, 1, 2, 2, 12);
        let mut g = Graph::new();
        let (x, c, w, _) = bind(&mut g, &cs);
        let p = PrefixVars {
            key: g.constant(Tensor::zeros(&[0, 8])),
            value: g.constant(Tensor::zeros(&[0, 8])),
        };
        assert!(matches!(
            prefix_attention_native(&mut g, x, c, &w, &p, 2, 1, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn multihead_with_one_head_is_plain_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 6], 1.0, &mut rng));
        let down = g.constant(Tensor::randn(&[6, 2], 1.0, &mut rng));
        let up = g.constant(Tensor::randn(&[2, 6], 1.0, &mut rng));
        let mh = multihead_parallel_adapter_delta(&mut g, x, &[(down, up)]).unwrap();
        let plain = adapter_delta(&mut g, x, down, up).unwrap();
        assert_eq!(g.value(mh[0]), g.value(plain));
    }

    #[test]
    fn reparam_with_zero_output_layer_gives_zero_prefixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut g = Graph::new();
        let mlp = PrefixMlpVars {
            embedding: g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)),
            w_1: g.constant(Tensor::randn(&[4, 5], 1.0, &mut rng)),
            b_1: g.constant(Tensor::randn(&[5], 1.0, &mut rng)),
            w_2: g.constant(Tensor::zeros(&[5, 2 * 2 * 8])),
            b_2: g.constant(Tensor::zeros(&[2 * 2 * 8])),
        };
        let ps = prefix_reparam_forward(&mut g, &mlp, 8).unwrap();
        assert_eq!(ps.len(), 2);
        for p in ps {
            assert_eq!(g.shape(p.key), &[3, 8]);
            assert!(g.value(p.key).data().iter().all(|&v| v == 0.0));
            assert!(g.value(p.value).data().iter().all(|&v| v == 0.0));
        }
    }
}
