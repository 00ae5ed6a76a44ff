//! Numerical oracle suites: prefix equivalence, λ properties, parameter
//! counts, finite-difference gradients, exact identities and rank bounds.

use std::fmt;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accounting::{audit_trainable, count_method, count_per_sublayer, shape_model};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, weighted_sum, REL_FLOOR};
use crate::model::layers::{attn, causal_mask, ffn, mha, mha_heads, AttnVars, FfnVars};
use crate::model::{HookPoint, ModelConfig, Transformer};
use crate::peft::ops::{
    adapter_delta, compose, head_lambda, lora_delta, multihead_parallel_adapter_delta, prefix_attention_equivalent,
    prefix_attention_native, prefix_head_decomposed, prefix_lambda, prefix_reparam_forward, PrefixMlpVars,
    PrefixVars,
};
use crate::peft::{attach_specs, merge_lora, Composition, DesignSpec, InitScheme, Method, Placement};
use crate::tensor::Tensor;

/// Outcome of one suite.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    /// Largest error seen, in the suite's own measure.
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub seconds: f64,
    pub failures: Vec<String>,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<20} max_error={:.3e} tolerance={:.0e} cases={} time={:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.cases,
            self.seconds
        )?;
        for msg in self.failures.iter().take(5) {
            write!(f, "\n    {msg}")?;
        }
        if self.failures.len() > 5 {
            write!(f, "\n    ... {} more", self.failures.len() - 5)?;
        }
        Ok(())
    }
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    max_error: f64,
    cases: usize,
    failures: Vec<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            max_error: 0.0,
            cases: 0,
            failures: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Records an error measured against the suite tolerance.
    fn error(&mut self, case: &str, err: f64) {
        self.check(case, err, self.tolerance);
    }

    fn check(&mut self, case: &str, err: f64, tol: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !(err <= tol) {
            self.failures.push(format!("{case}: error {err:.3e} > {tol:.0e}"));
        }
    }

    fn condition(&mut self, case: &str, ok: bool) {
        self.cases += 1;
        if !ok {
            self.failures.push(case.to_string());
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name,
            passed: self.failures.is_empty(),
            max_error: self.max_error,
            tolerance: self.tolerance,
            cases: self.cases,
            seconds: self.start.elapsed().as_secs_f64(),
            failures: self.failures,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn attn_weights(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize) -> AttnVars {
    let std = 1.0 / (d as f64).sqrt();
    let w: Vec<Tensor> = (0..4).map(|_| randn(rng, &[d, d], std)).collect();
    AttnVars::constants(g, &w[0], &w[1], &w[2], &w[3])
}

/// Runs every suite with its standard sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        prefix_equivalence(100, seed)?,
        lambda_properties(seed)?,
        parameter_counts()?,
        gradients(10, seed)?,
        identities(seed)?,
        rank_bound(seed)?,
    ])
}

/// Native prefix attention against its decomposed form over random
/// shapes, masks and batch sizes. Error is element-wise relative.
pub fn prefix_equivalence(configs: usize, seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("prefix_equivalence", 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..configs {
        let d = *[8, 16].choose(&mut rng).expect("non-empty");
        let heads = *[1, 2, 4].choose(&mut rng).expect("non-empty");
        let l = *[1, 3, 8].choose(&mut rng).expect("non-empty");
        let m = *[1, 5, 9].choose(&mut rng).expect("non-empty");
        let n = *[1, 4].choose(&mut rng).expect("non-empty");
        let batch = rng.gen_range(1..=2);
        // self-attention with a causal mask on every other case
        let causal = case % 2 == 1;
        let kv_len = if causal { n } else { m };
        let mut g = Graph::new();
        let w = attn_weights(&mut g, &mut rng, d);
        let x = g.constant(randn(&mut rng, &[batch * n, d], 1.0));
        let c = if causal {
            x
        } else {
            g.constant(randn(&mut rng, &[batch * kv_len, d], 1.0))
        };
        let p = PrefixVars {
            key: g.constant(randn(&mut rng, &[l, d], 1.0)),
            value: g.constant(randn(&mut rng, &[l, d], 1.0)),
        };
        let mask = causal.then(|| causal_mask(n));
        let native = prefix_attention_native(&mut g, x, c, &w, &p, heads, batch, mask.as_ref())?;
        let equiv = prefix_attention_equivalent(&mut g, x, c, &w, &p, heads, batch, mask.as_ref(), true)?;
        let mut err: f64 = 0.0;
        for (a, b) in native.iter().zip(&equiv) {
            err = err.max(g.value(*a).max_rel_diff(g.value(*b), REL_FLOOR));
        }
        let out_a = g.concat_cols(&native)?;
        let out_a = g.matmul(out_a, w.w_o)?;
        let out_b = g.concat_cols(&equiv)?;
        let out_b = g.matmul(out_b, w.w_o)?;
        err = err.max(g.value(out_a).max_rel_diff(g.value(out_b), REL_FLOOR));
        t.error(
            &format!("d={d} heads={heads} l={l} m={kv_len} n={n} batch={batch} causal={causal}"),
            err,
        );
    }
    if t.start.elapsed().as_secs_f64() >= 10.0 {
        t.failures.push("runtime exceeded 10 s".into());
    }
    Ok(t.finish())
}

/// λ stays inside (0, 1), equals `l/(l+m)` for equal logits and saturates
/// when prefix logits dominate.
pub fn lambda_properties(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("lambda_properties", 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a);

    for case in 0..100 {
        let d = *[8, 16].choose(&mut rng).expect("non-empty");
        let heads = *[1, 2, 4].choose(&mut rng).expect("non-empty");
        let (l, m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=9), rng.gen_range(1..=4));
        let std = *[0.1, 1.0, 3.0].choose(&mut rng).expect("non-empty");
        let mut g = Graph::new();
        let w = attn_weights(&mut g, &mut rng, d);
        let x = g.constant(randn(&mut rng, &[n, d], std));
        let c = g.constant(randn(&mut rng, &[m, d], std));
        let p = PrefixVars {
            key: g.constant(randn(&mut rng, &[l, d], std)),
            value: g.constant(randn(&mut rng, &[l, d], std)),
        };
        let lambdas = prefix_lambda(&mut g, x, c, &w, &p, heads, 1, None)?;
        let inside = lambdas
            .iter()
            .all(|v| g.value(*v).data().iter().all(|&x| x > 0.0 && x < 1.0));
        t.condition(&format!("random case {case}: λ outside (0, 1)"), inside);
    }

    for (l, m) in [(1, 1), (3, 5), (8, 9), (2, 7), (5, 1)] {
        let d = 8;
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[4, d]));
        let k = g.constant(randn(&mut rng, &[m, d], 1.0));
        let pk = g.constant(randn(&mut rng, &[l, d], 1.0));
        let (lambda, _, _) = head_lambda(&mut g, q, k, pk, 1, 1.0, None)?;
        let expected = l as f64 / (l + m) as f64;
        let err = g
            .value(lambda)
            .data()
            .iter()
            .map(|v| (v - expected).abs())
            .fold(0.0, f64::max);
        t.error(&format!("equal logits l={l} m={m}"), err);
    }

    for m in [1, 4, 9] {
        // prefix keys are the content keys shifted so each logit gains +40
        let d = 8;
        let mut qd = randn(&mut rng, &[3, d], 1.0);
        for i in 0..3 {
            qd.data_mut()[i * d + d - 1] = 1.0;
        }
        let mut kd = randn(&mut rng, &[m, d], 1.0);
        for j in 0..m {
            kd.data_mut()[j * d + d - 1] = 0.0;
        }
        let mut pkd = kd.clone();
        for j in 0..m {
            pkd.data_mut()[j * d + d - 1] = 40.0;
        }
        let mut g = Graph::new();
        let (q, k, pk) = (g.constant(qd), g.constant(kd), g.constant(pkd));
        let (lambda, _, _) = head_lambda(&mut g, q, k, pk, 1, 1.0, None)?;
        let err = g.value(lambda).data().iter().map(|v| 1.0 - v).fold(0.0, f64::max);
        t.error(&format!("prefix logits +40, m={m}"), err);
    }
    Ok(t.finish())
}

/// Methods covered by the count audit.
pub fn audited_methods(b: usize) -> Vec<Method> {
    vec![
        Method::Prefix { l: b },
        Method::SequentialAdapter { at: Placement::Attn, r: b },
        Method::SequentialAdapter { at: Placement::Ffn, r: b },
        Method::ParallelAdapter { at: Placement::Attn, r: b },
        Method::ParallelAdapter { at: Placement::Ffn, r: b },
        Method::MultiHeadParallelAdapter { r: b },
        Method::ScaledParallelAdapter { at: Placement::Attn, r: b, s: 4.0 },
        Method::ScaledParallelAdapter { at: Placement::Ffn, r: b, s: 4.0 },
        Method::LoraAttn { r: b, s: 1.0 },
        Method::LoraFfn { r: b, s: 1.0 },
        Method::Prompt { l: b },
    ]
}

/// Budgets of the large encoder-decoder shape, in percent of the base.
pub const BART_BUDGETS: [(&str, f64); 4] = [
    ("prefix l=200", 3.6),
    ("lora_ffn r=102", 6.1),
    ("pa_ffn r=1024", 12.3),
    ("mam l=30 r=512", 6.7),
];

pub fn bart_budget_methods() -> [Method; 4] {
    [
        Method::Prefix { l: 200 },
        Method::LoraFfn { r: 102, s: 1.0 },
        Method::ParallelAdapter { at: Placement::Ffn, r: 1024 },
        Method::Mam { l: 30, r: 512, s: 4.0 },
    ]
}

/// Live audits against formula counts for every method, bottleneck and
/// model shape, then the large-model budgets (error in percentage points).
pub fn parameter_counts() -> Result<SuiteReport> {
    let mut t = Tally::new("parameter_counts", 0.1);
    for config in [ModelConfig::desk(), ModelConfig::bart_large()] {
        let (d, dm) = (config.d_model, config.d_ff);
        let attn_sites = config.layers * config.attn_sublayers_per_layer();
        let ffn_sites = config.layers * config.ffn_sublayers_per_layer();
        for b in [1, 4, 16] {
            for method in audited_methods(b) {
                let audit = audit_trainable(&shape_model(&config, &method)?);
                let report = count_method(&config, &method)?;
                let per = count_per_sublayer(&method, d, dm)?;
                let closed = per.attn.unwrap_or(0) * attn_sites + per.ffn.unwrap_or(0) * ffn_sites + per.input.unwrap_or(0);
                let case = format!("{method} d={d}");
                t.condition(
                    &format!("{case}: audit {audit} vs count {} vs closed form {closed}", report.total),
                    audit == report.total && audit == closed,
                );
            }
        }
    }
    let bart = ModelConfig::bart_large();
    for ((label, target), method) in BART_BUDGETS.iter().zip(bart_budget_methods()) {
        let report = count_method(&bart, &method)?;
        t.error(
            &format!("{label}: {:.3}% vs {target}%", report.rel_percent),
            (report.rel_percent - target).abs(),
        );
    }
    Ok(t.finish())
}

type ScalarFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// A random point and the scalar function to differentiate there, or
/// `None` when the point sits too close to a ReLU kink.
type CaseGen = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Option<(Tensor, ScalarFn)>>>;

const KINK_MARGIN: f64 = 1e-2;

fn far_from_kink(pre: &Tensor) -> bool {
    pre.data().iter().all(|v| v.abs() > KINK_MARGIN)
}

fn reduce(g: &mut Graph, v: Var) -> Result<Var> {
    weighted_sum(g, v, 7)
}

macro_rules! case {
    ($name:expr, $gen:expr) => {
        ($name, Box::new($gen) as CaseGen)
    };
}

fn gradient_cases() -> Vec<(&'static str, CaseGen)> {
    vec![
        case!("matmul/a", |r: &mut ChaCha8Rng| {
            let b = randn(r, &[4, 3], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let b = g.constant(b.clone());
                let y = g.matmul(x, b)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[2, 4], 1.0), f)))
        }),
        case!("matmul_nt/b", |r: &mut ChaCha8Rng| {
            let a = randn(r, &[2, 4], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let a = g.constant(a.clone());
                let y = g.matmul_nt(a, x)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 4], 1.0), f)))
        }),
        case!("batched_matmul", |r: &mut ChaCha8Rng| {
            let b = randn(r, &[6, 3], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let b = g.constant(b.clone());
                let y = g.batched_matmul(x, b, 2, false)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[4, 3], 1.0), f)))
        }),
        case!("batched_matmul_t", |r: &mut ChaCha8Rng| {
            let b = randn(r, &[6, 3], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let b = g.constant(b.clone());
                let y = g.batched_matmul(x, b, 2, true)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[4, 3], 1.0), f)))
        }),
        case!("add_bias/bias", |r: &mut ChaCha8Rng| {
            let a = randn(r, &[3, 4], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let a = g.constant(a.clone());
                let y = g.add_bias(a, x)?;
                let y = g.mul(y, y)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[4], 1.0), f)))
        }),
        case!("mul_sub_affine", |r: &mut ChaCha8Rng| {
            let b = randn(r, &[3, 3], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let b = g.constant(b.clone());
                let y = g.mul(x, b)?;
                let y = g.sub(y, x)?;
                let y = g.affine(y, 1.5, -0.3);
                let y = g.mul(y, x)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 3], 1.0), f)))
        }),
        case!("relu", |r: &mut ChaCha8Rng| {
            let p = randn(r, &[3, 4], 1.0);
            if !far_from_kink(&p) {
                return Ok(None);
            }
            let f: ScalarFn = Box::new(|g, x| {
                let y = g.relu(x);
                reduce(g, y)
            });
            Ok(Some((p, f)))
        }),
        case!("tanh_exp", |r: &mut ChaCha8Rng| {
            let f: ScalarFn = Box::new(|g, x| {
                let y = g.tanh(x);
                let y = g.exp(y);
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 4], 1.0), f)))
        }),
        case!("softmax_rows", |r: &mut ChaCha8Rng| {
            let f: ScalarFn = Box::new(|g, x| {
                let y = g.softmax_rows(x)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 5], 2.0), f)))
        }),
        case!("logsumexp_rows", |r: &mut ChaCha8Rng| {
            let f: ScalarFn = Box::new(|g, x| {
                let y = g.logsumexp_rows(x)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 5], 2.0), f)))
        }),
        case!("layer_norm/x", |r: &mut ChaCha8Rng| {
            let (gain, bias) = (randn(r, &[6], 1.0), randn(r, &[6], 1.0));
            let f: ScalarFn = Box::new(move |g, x| {
                let (gn, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
                let y = g.layer_norm(x, gn, b, 1e-5)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 6], 1.0), f)))
        }),
        case!("layer_norm/gain", |r: &mut ChaCha8Rng| {
            let (xv, bias) = (randn(r, &[3, 6], 1.0), randn(r, &[6], 1.0));
            let f: ScalarFn = Box::new(move |g, gain| {
                let (x, b) = (g.constant(xv.clone()), g.constant(bias.clone()));
                let y = g.layer_norm(x, gain, b, 1e-5)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[6], 1.0), f)))
        }),
        case!("concat_slice", |r: &mut ChaCha8Rng| {
            let b = randn(r, &[4, 2], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let b = g.constant(b.clone());
                let y = g.concat_cols(&[x, b, x])?;
                let y = g.slice_cols(y, 1, 5)?;
                let y = g.slice_rows(y, 1, 2)?;
                let y = g.mul(y, y)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[4, 3], 1.0), f)))
        }),
        case!("batched_concat_rows", |r: &mut ChaCha8Rng| {
            let b = randn(r, &[6, 3], 1.0);
            let f: ScalarFn = Box::new(move |g, x| {
                let b = g.constant(b.clone());
                let y = g.batched_concat_rows(x, b, 2, true)?;
                let z = g.concat_rows(y, x)?;
                let z = g.mul(z, z)?;
                reduce(g, z)
            });
            Ok(Some((randn(r, &[2, 3], 1.0), f)))
        }),
        case!("gather_segment_mean", |r: &mut ChaCha8Rng| {
            let f: ScalarFn = Box::new(|g, table| {
                let y = g.gather_rows(table, &[0, 2, 2, 1, 3, 0])?;
                let y = g.segment_mean(y, 2)?;
                let y = g.mul(y, y)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[4, 3], 1.0), f)))
        }),
        case!("mul_scalar_rows", |r: &mut ChaCha8Rng| {
            let (a, w) = (randn(r, &[3, 4], 1.0), randn(r, &[3, 1], 1.0));
            let f: ScalarFn = Box::new(move |g, s| {
                let (a, w) = (g.constant(a.clone()), g.constant(w.clone()));
                let y = g.mul_scalar(a, s)?;
                let y = g.mul_rows(y, w)?;
                let y = g.mul_scalar(y, s)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[1], 1.0), f)))
        }),
        case!("cross_entropy", |r: &mut ChaCha8Rng| {
            let f: ScalarFn = Box::new(|g, x| g.cross_entropy(x, &[Some(1), None, Some(4), Some(0)], 0.1));
            Ok(Some((randn(r, &[4, 5], 1.5), f)))
        }),
        case!("attn_causal/q", |r: &mut ChaCha8Rng| {
            let (k, v) = (randn(r, &[8, 4], 1.0), randn(r, &[8, 4], 1.0));
            let f: ScalarFn = Box::new(move |g, q| {
                let (k, v) = (g.constant(k.clone()), g.constant(v.clone()));
                let y = attn(g, q, k, v, 2, 0.5, Some(&causal_mask(4)))?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[8, 4], 1.0), f)))
        }),
        case!("mha/x", |r: &mut ChaCha8Rng| {
            let w: Vec<Tensor> = (0..4).map(|_| randn(r, &[8, 8], 0.35)).collect();
            let f: ScalarFn = Box::new(move |g, x| {
                let w = AttnVars::constants(g, &w[0], &w[1], &w[2], &w[3]);
                let y = mha(g, x, x, &w, 2, 2, Some(&causal_mask(3)))?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[6, 8], 1.0), f)))
        }),
        case!("ffn/x", |r: &mut ChaCha8Rng| {
            let (w1, b1, w2, b2) = (
                randn(r, &[4, 8], 0.5),
                randn(r, &[8], 0.5),
                randn(r, &[8, 4], 0.35),
                randn(r, &[4], 0.5),
            );
            let x = randn(r, &[3, 4], 1.0);
            let pre = add_row(&x.matmul(&w1)?, &b1);
            if !far_from_kink(&pre) {
                return Ok(None);
            }
            let f: ScalarFn = Box::new(move |g, x| {
                let w = FfnVars {
                    w_1: g.constant(w1.clone()),
                    b_1: g.constant(b1.clone()),
                    w_2: g.constant(w2.clone()),
                    b_2: g.constant(b2.clone()),
                };
                let y = ffn(g, x, &w)?;
                reduce(g, y)
            });
            Ok(Some((x, f)))
        }),
        case!("post_ln_sublayer/x", |r: &mut ChaCha8Rng| {
            let w: Vec<Tensor> = (0..4).map(|_| randn(r, &[8, 8], 0.35)).collect();
            let f: ScalarFn = Box::new(move |g, x| {
                let w = AttnVars::constants(g, &w[0], &w[1], &w[2], &w[3]);
                let h = mha(g, x, x, &w, 4, 1, None)?;
                let s = g.add(x, h)?;
                let (gain, bias) = (g.constant(Tensor::ones(&[8])), g.constant(Tensor::zeros(&[8])));
                let y = g.layer_norm(s, gain, bias, 1e-5)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 8], 1.0), f)))
        }),
        case!("adapter/input", |r: &mut ChaCha8Rng| {
            let (down, up) = (randn(r, &[6, 3], 0.5), randn(r, &[3, 6], 0.5));
            let x = randn(r, &[4, 6], 1.0);
            if !far_from_kink(&x.matmul(&down)?) {
                return Ok(None);
            }
            let f: ScalarFn = Box::new(move |g, x| {
                let (d, u) = (g.constant(down.clone()), g.constant(up.clone()));
                let y = adapter_delta(g, x, d, u)?;
                reduce(g, y)
            });
            Ok(Some((x, f)))
        }),
        case!("adapter/down", |r: &mut ChaCha8Rng| {
            let (xv, up) = (randn(r, &[4, 6], 1.0), randn(r, &[3, 6], 0.5));
            let down = randn(r, &[6, 3], 0.5);
            if !far_from_kink(&xv.matmul(&down)?) {
                return Ok(None);
            }
            let f: ScalarFn = Box::new(move |g, d| {
                let (x, u) = (g.constant(xv.clone()), g.constant(up.clone()));
                let y = adapter_delta(g, x, d, u)?;
                reduce(g, y)
            });
            Ok(Some((down, f)))
        }),
        case!("adapter/up", |r: &mut ChaCha8Rng| {
            let (xv, down) = (randn(r, &[4, 6], 1.0), randn(r, &[6, 3], 0.5));
            let f: ScalarFn = Box::new(move |g, u| {
                let (x, d) = (g.constant(xv.clone()), g.constant(down.clone()));
                let y = adapter_delta(g, x, d, u)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 6], 0.5), f)))
        }),
        case!("lora/down", |r: &mut ChaCha8Rng| {
            let (xv, up) = (randn(r, &[4, 6], 1.0), randn(r, &[2, 5], 0.5));
            let f: ScalarFn = Box::new(move |g, d| {
                let (x, u) = (g.constant(xv.clone()), g.constant(up.clone()));
                let y = lora_delta(g, x, d, u, 2.0)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[6, 2], 0.5), f)))
        }),
        case!("lora/up", |r: &mut ChaCha8Rng| {
            let (xv, down) = (randn(r, &[4, 6], 1.0), randn(r, &[6, 2], 0.5));
            let f: ScalarFn = Box::new(move |g, u| {
                let (x, d) = (g.constant(xv.clone()), g.constant(down.clone()));
                let y = lora_delta(g, x, d, u, 2.0)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[2, 5], 0.5), f)))
        }),
        case!("mh_pa/x", |r: &mut ChaCha8Rng| {
            let pairs: Vec<(Tensor, Tensor)> = (0..2)
                .map(|_| (randn(r, &[4, 2], 0.5), randn(r, &[2, 4], 0.5)))
                .collect();
            let x = randn(r, &[3, 8], 1.0);
            for (h, (down, _)) in pairs.iter().enumerate() {
                if !far_from_kink(&x.slice_cols(4 * h, 4).matmul(down)?) {
                    return Ok(None);
                }
            }
            let f: ScalarFn = Box::new(move |g, x| {
                let vars: Vec<(Var, Var)> = pairs
                    .iter()
                    .map(|(d, u)| (g.constant(d.clone()), g.constant(u.clone())))
                    .collect();
                let ys = multihead_parallel_adapter_delta(g, x, &vars)?;
                let y = g.concat_cols(&ys)?;
                reduce(g, y)
            });
            Ok(Some((x, f)))
        }),
        case!("prefix_native/key", |r: &mut ChaCha8Rng| {
            let ctx = PrefixCtx::new(r);
            let pv = randn(r, &[3, 8], 1.0);
            let f: ScalarFn = Box::new(move |g, pk| {
                let (x, c, w) = ctx.bind(g);
                let p = PrefixVars {
                    key: pk,
                    value: g.constant(pv.clone()),
                };
                let hs = prefix_attention_native(g, x, c, &w, &p, 2, 2, None)?;
                let y = g.concat_cols(&hs)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 8], 1.0), f)))
        }),
        case!("prefix_native/value", |r: &mut ChaCha8Rng| {
            let ctx = PrefixCtx::new(r);
            let pk = randn(r, &[3, 8], 1.0);
            let f: ScalarFn = Box::new(move |g, pv| {
                let (x, c, w) = ctx.bind(g);
                let p = PrefixVars {
                    key: g.constant(pk.clone()),
                    value: pv,
                };
                let hs = prefix_attention_native(g, x, c, &w, &p, 2, 2, None)?;
                let y = g.concat_cols(&hs)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 8], 1.0), f)))
        }),
        case!("prefix_native/x", |r: &mut ChaCha8Rng| {
            let ctx = PrefixCtx::new(r);
            let (pk, pv) = (randn(r, &[3, 8], 1.0), randn(r, &[3, 8], 1.0));
            let f: ScalarFn = Box::new(move |g, x| {
                let (_, c, w) = ctx.bind(g);
                let p = PrefixVars {
                    key: g.constant(pk.clone()),
                    value: g.constant(pv.clone()),
                };
                let hs = prefix_attention_native(g, x, c, &w, &p, 2, 2, None)?;
                let y = g.concat_cols(&hs)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[4, 8], 1.0), f)))
        }),
        case!("prefix_gated/key", |r: &mut ChaCha8Rng| {
            let ctx = PrefixCtx::new(r);
            let pv = randn(r, &[3, 8], 1.0);
            let f: ScalarFn = Box::new(move |g, pk| {
                let (x, c, w) = ctx.bind(g);
                let p = PrefixVars {
                    key: pk,
                    value: g.constant(pv.clone()),
                };
                let hs = prefix_attention_equivalent(g, x, c, &w, &p, 2, 2, None, true)?;
                let y = g.concat_cols(&hs)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 8], 1.0), f)))
        }),
        case!("prefix_ungated/value", |r: &mut ChaCha8Rng| {
            let ctx = PrefixCtx::new(r);
            let pk = randn(r, &[3, 8], 1.0);
            let f: ScalarFn = Box::new(move |g, pv| {
                let (x, c, w) = ctx.bind(g);
                let p = PrefixVars {
                    key: g.constant(pk.clone()),
                    value: pv,
                };
                let hs = prefix_attention_equivalent(g, x, c, &w, &p, 2, 2, None, false)?;
                let y = g.concat_cols(&hs)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[3, 8], 1.0), f)))
        }),
        case!("prefix_head_scaled/scale", |r: &mut ChaCha8Rng| {
            let (q, k, v) = (randn(r, &[3, 4], 1.0), randn(r, &[5, 4], 1.0), randn(r, &[5, 4], 1.0));
            let (pk, pv) = (randn(r, &[2, 4], 1.0), randn(r, &[2, 4], 1.0));
            let f: ScalarFn = Box::new(move |g, s| {
                let vars: Vec<Var> = [&q, &k, &v, &pk, &pv].iter().map(|t| g.constant((*t).clone())).collect();
                let (y, _) = prefix_head_decomposed(
                    g,
                    vars[0],
                    vars[1],
                    vars[2],
                    vars[3],
                    vars[4],
                    1,
                    0.5,
                    None,
                    Composition::ScaledAdd(1.0),
                    Some(s),
                )?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[1], 1.0), f)))
        }),
        case!("gated_compose/lambda", |r: &mut ChaCha8Rng| {
            let (h, d) = (randn(r, &[4, 3], 1.0), randn(r, &[4, 3], 1.0));
            let f: ScalarFn = Box::new(move |g, lam| {
                let (h, d) = (g.constant(h.clone()), g.constant(d.clone()));
                let y = compose(g, h, d, Composition::GatedAdd, Some(lam), None)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[4, 1], 0.3), f)))
        }),
        case!("prefix_reparam/embedding", |r: &mut ChaCha8Rng| {
            let (w1, b1, w2, b2) = (
                randn(r, &[3, 5], 0.5),
                randn(r, &[5], 0.5),
                randn(r, &[5, 32], 0.5),
                randn(r, &[32], 0.5),
            );
            let f: ScalarFn = Box::new(move |g, e| {
                let mlp = PrefixMlpVars {
                    embedding: e,
                    w_1: g.constant(w1.clone()),
                    b_1: g.constant(b1.clone()),
                    w_2: g.constant(w2.clone()),
                    b_2: g.constant(b2.clone()),
                };
                let slots = prefix_reparam_forward(g, &mlp, 8)?;
                let parts: Vec<Var> = slots.iter().flat_map(|p| [p.key, p.value]).collect();
                let y = g.concat_cols(&parts)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[2, 3], 1.0), f)))
        }),
        case!("prefix_reparam/w_2", |r: &mut ChaCha8Rng| {
            let (e, w1, b1, b2) = (
                randn(r, &[2, 3], 1.0),
                randn(r, &[3, 5], 0.5),
                randn(r, &[5], 0.5),
                randn(r, &[32], 0.5),
            );
            let f: ScalarFn = Box::new(move |g, w2| {
                let mlp = PrefixMlpVars {
                    embedding: g.constant(e.clone()),
                    w_1: g.constant(w1.clone()),
                    b_1: g.constant(b1.clone()),
                    w_2: w2,
                    b_2: g.constant(b2.clone()),
                };
                let slots = prefix_reparam_forward(g, &mlp, 8)?;
                let parts: Vec<Var> = slots.iter().flat_map(|p| [p.key, p.value]).collect();
                let y = g.concat_cols(&parts)?;
                reduce(g, y)
            });
            Ok(Some((randn(r, &[5, 32], 0.5), f)))
        }),
    ]
}

fn add_row(a: &Tensor, b: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = a.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % c];
    }
    out
}

/// Inputs shared by the prefix cases: two sequences of 2 queries over 3
/// context rows each, d = 8.
struct PrefixCtx {
    x: Tensor,
    c: Tensor,
    w: Vec<Tensor>,
}

impl PrefixCtx {
    fn new(r: &mut ChaCha8Rng) -> Self {
        Self {
            x: randn(r, &[4, 8], 1.0),
            c: randn(r, &[6, 8], 1.0),
            w: (0..4).map(|_| randn(r, &[8, 8], 0.35)).collect(),
        }
    }

    fn bind(&self, g: &mut Graph) -> (Var, Var, AttnVars) {
        let w = AttnVars::constants(g, &self.w[0], &self.w[1], &self.w[2], &self.w[3]);
        (g.constant(self.x.clone()), g.constant(self.c.clone()), w)
    }
}

/// Central differences (ε = 1e-4) against backward at `points` random
/// points per case; points within 1e-2 of a ReLU kink are redrawn.
pub fn gradients(points: usize, seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("gradients", 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    for (name, gen) in gradient_cases() {
        let mut done = 0;
        let mut draws = 0;
        while done < points {
            draws += 1;
            if draws > 50 * points {
                t.condition(&format!("{name}: too few points away from ReLU kinks"), false);
                break;
            }
            let Some((point, f)) = gen(&mut rng)? else { continue };
            let r = finite_diff_check(f, &point, 1e-4)?;
            t.error(&format!("{name} point {done}"), r.max_rel_error);
            done += 1;
        }
    }
    Ok(t.finish())
}

fn desk_model(seed: u64) -> Result<Transformer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Transformer::new(ModelConfig::desk(), &mut rng)?;
    m.randomize_biases(0.1, &mut rng);
    Ok(m)
}

fn probe_logits(m: &Transformer) -> Result<Vec<Tensor>> {
    let pairs: [(&[usize], &[usize]); 3] = [
        (&[3, 1, 4, 1, 5], &[0, 9, 2, 6]),
        (&[2, 7, 1], &[0, 8, 2, 8, 1]),
        (&[31], &[0]),
    ];
    pairs.iter().map(|(s, t)| m.logits(s, t)).collect()
}

fn max_abs_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn bit_identical(a: &[Tensor], b: &[Tensor]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

/// Zero-up attachments leave outputs bit-identical; merged LoRA matches
/// attached LoRA; scaled PA with `s = 1` is PA; ungated prefix is `h + Δh`.
pub fn identities(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("identities", 1e-10);
    let base = desk_model(seed)?;
    let reference = probe_logits(&base)?;
    let zero_up = InitScheme::NormalZeroUp { std: 0.5 };
    let mut zero_up_specs = vec![];
    for hook in [HookPoint::AttnSublayerOutput, HookPoint::FfnSublayerOutput] {
        zero_up_specs.push(("sequential adapter", DesignSpec::sequential_adapter(hook, 4)));
        zero_up_specs.push(("parallel adapter", DesignSpec::parallel_adapter(hook, 4)));
        zero_up_specs.push(("scaled parallel adapter", DesignSpec::scaled_parallel_adapter(hook, 4, 4.0)));
    }
    zero_up_specs.push(("multi-head parallel adapter", DesignSpec::multihead_parallel_adapter(4)));
    for hook in [HookPoint::AttnQueryProj, HookPoint::AttnValueProj, HookPoint::FfnWeight1, HookPoint::FfnWeight2] {
        zero_up_specs.push(("lora", DesignSpec::lora(hook, 4, 2.0)));
    }
    for (label, spec) in zero_up_specs {
        let mut m = base.clone();
        let hook = spec.modified_representation;
        attach_specs(&mut m, &[spec.with_init(zero_up)], &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
        let out = probe_logits(&m)?;
        t.condition(
            &format!("zero-up {label} at {hook:?} changed the output by {:.3e}", max_abs_diff(&out, &reference)),
            bit_identical(&out, &reference),
        );
    }

    let mut lora = base.clone();
    let lora_specs: Vec<DesignSpec> = [HookPoint::AttnQueryProj, HookPoint::AttnValueProj, HookPoint::FfnWeight1, HookPoint::FfnWeight2]
        .into_iter()
        .map(|h| DesignSpec::lora(h, 4, 2.0).with_init(InitScheme::Normal { std: 0.3 }))
        .collect();
    attach_specs(&mut lora, &lora_specs, &mut ChaCha8Rng::seed_from_u64(seed + 2))?;
    let attached = probe_logits(&lora)?;
    let merged = probe_logits(&merge_lora(&lora)?)?;
    t.condition(
        "attached LoRA differs from the base, so the merge check is vacuous",
        max_abs_diff(&attached, &reference) > 1e-6,
    );
    t.error("lora merge", max_abs_diff(&attached, &merged));

    for hook in [HookPoint::AttnSublayerOutput, HookPoint::FfnSublayerOutput] {
        let init = InitScheme::Normal { std: 0.3 };
        let mut pa = base.clone();
        attach_specs(&mut pa, &[DesignSpec::parallel_adapter(hook, 4).with_init(init)], &mut ChaCha8Rng::seed_from_u64(seed + 3))?;
        let mut spa = base.clone();
        attach_specs(
            &mut spa,
            &[DesignSpec::scaled_parallel_adapter(hook, 4, 1.0).with_init(init)],
            &mut ChaCha8Rng::seed_from_u64(seed + 3),
        )?;
        let (a, b) = (probe_logits(&pa)?, probe_logits(&spa)?);
        t.condition(
            &format!("scaled PA with s=1 at {hook:?} differs from PA by {:.3e}", max_abs_diff(&a, &b)),
            bit_identical(&a, &b),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    for heads in [1, 2, 4] {
        let mut g = Graph::new();
        let w = attn_weights(&mut g, &mut rng, 8);
        let x = g.constant(randn(&mut rng, &[6, 8], 1.0));
        let c = g.constant(randn(&mut rng, &[10, 8], 1.0));
        let p = PrefixVars {
            key: g.constant(randn(&mut rng, &[3, 8], 1.0)),
            value: g.constant(randn(&mut rng, &[3, 8], 1.0)),
        };
        let ungated = prefix_attention_equivalent(&mut g, x, c, &w, &p, heads, 2, None, false)?;
        let standard = mha_heads(&mut g, c, x, &w, heads, 2, None)?;
        let qs = {
            let q = g.matmul(x, w.w_q)?;
            crate::model::layers::split_heads(&mut g, q, heads)?
        };
        let pks = crate::model::layers::split_heads(&mut g, p.key, heads)?;
        let pvs = crate::model::layers::split_heads(&mut g, p.value, heads)?;
        let scale = 1.0 / ((8 / heads) as f64).sqrt();
        let mut same = true;
        for i in 0..heads {
            let logits = g.matmul_nt(qs[i], pks[i])?;
            let logits = g.scale(logits, scale);
            let weights = g.softmax_rows(logits)?;
            let delta = g.matmul(weights, pvs[i])?;
            let expected = g.add(standard[i], delta)?;
            same &= bit_identical(&[g.value(ungated[i]).clone()], &[g.value(expected).clone()]);
        }
        t.condition(&format!("ungated prefix with {heads} heads is not h + Δh"), same);
    }
    Ok(t.finish())
}

fn singular_values(m: &Tensor) -> Vec<f64> {
    let mat = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// `σ_r / σ_0` of a Δh matrix whose rank is at most `r`.
fn tail_ratio(delta: &Tensor, r: usize) -> f64 {
    let sv = singular_values(delta);
    if sv.len() <= r || sv[0] == 0.0 {
        return 0.0;
    }
    sv[r] / sv[0]
}

/// Δh over 64 random positions has no singular value beyond index `r`
/// (or `l`) above 1e-8 of the largest.
pub fn rank_bound(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("rank_bound", 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7b);
    let d = 32;
    for r in [1, 4, 8] {
        let x = randn(&mut rng, &[64, d], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (down, up) = (g.constant(randn(&mut rng, &[d, r], 0.3)), g.constant(randn(&mut rng, &[r, d], 0.3)));
        let adapter = adapter_delta(&mut g, xv, down, up)?;
        t.error(&format!("adapter r={r}"), tail_ratio(g.value(adapter), r));
        let lora = lora_delta(&mut g, xv, down, up, 4.0)?;
        t.error(&format!("lora r={r}"), tail_ratio(g.value(lora), r));

        let w_q = g.constant(randn(&mut rng, &[d, d], 0.2));
        let pk = g.constant(randn(&mut rng, &[r, d], 1.0));
        let pv = g.constant(randn(&mut rng, &[r, d], 1.0));
        let q = g.matmul(xv, w_q)?;
        let logits = g.matmul_nt(q, pk)?;
        let weights = g.softmax_rows(logits)?;
        let prefix = g.matmul(weights, pv)?;
        t.error(&format!("prefix l={r}"), tail_ratio(g.value(prefix), r));

        let wide = g.constant(randn(&mut rng, &[64, 64], 1.0));
        let pairs: Vec<(Var, Var)> = (0..4)
            .map(|_| (g.constant(randn(&mut rng, &[16, r], 0.3)), g.constant(randn(&mut rng, &[r, 16], 0.3))))
            .collect();
        for (h, delta) in multihead_parallel_adapter_delta(&mut g, wide, &pairs)?.into_iter().enumerate() {
            t.error(&format!("mh_pa head {h} r={r}"), tail_ratio(g.value(delta), r));
        }
    }
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for report in [
            prefix_equivalence(10, 3).unwrap(),
            lambda_properties(3).unwrap(),
            identities(3).unwrap(),
            rank_bound(3).unwrap(),
        ] {
            assert!(report.passed, "{report}");
        }
    }

    #[test]
    fn gradient_cases_pass_at_two_points() {
        let report = gradients(2, 5).unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn tally_flags_nan() {
        let mut t = Tally::new("x", 1.0);
        t.error("nan", f64::NAN);
        assert!(!t.finish().passed);
    }
}
