//! Fine-tuning: freezing, Adam, the learning-rate schedule and the loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::transformer::argmax;
use crate::model::{Forward, ParamStore, Transformer};
use crate::peft::{DesignSpec, FunctionalForm, Method};
use crate::task::{Dataset, Example, BOS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Dev evaluation period in steps; 0 evaluates only at start and end.
    pub eval_every: usize,
    /// Dev examples per evaluation; 0 uses the whole dev split.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            label_smoothing: 0.1,
            max_grad_norm: 1.0,
            weight_decay: 0.0,
            total_steps: 3000,
            warmup_fraction: 0.06,
            dropout: 0.0,
            seed: 0,
            eval_every: 250,
            eval_examples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("invalid {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate (must be positive)");
        }
        if self.batch_size == 0 {
            return bad("batch_size (must be positive)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing (must lie in [0, 1))");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction (must lie in [0, 1))");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout (must lie in [0, 1))");
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm (must be non-negative)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay (must be non-negative)");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }
}

/// Default peak learning rate for a set of attached specs on the desk
/// base. Frozen random bases need far larger steps than pretrained ones,
/// and prefixes larger still.
pub fn default_learning_rate(specs: &[DesignSpec]) -> f64 {
    let form = specs.first().map(|s| s.functional_form);
    if specs.iter().any(|s| Some(s.functional_form) != form) {
        return 1e-2;
    }
    match form {
        Some(FunctionalForm::SoftmaxBottleneck) => 2e-1,
        Some(FunctionalForm::ReluBottleneck) => 3e-2,
        Some(FunctionalForm::LinearBottleneck) => 1e-2,
        None => 1e-3,
    }
}

/// [`default_learning_rate`] for a named method.
pub fn method_learning_rate(method: &Method) -> f64 {
    match method {
        Method::Full => 1e-3,
        Method::BitFit => 3e-2,
        Method::Prompt { .. } => 2e-1,
        m => default_learning_rate(&m.specs()),
    }
}

/// Which tensors training may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    /// Attached parameters only (plus biases under BitFit).
    Peft,
    /// Every tensor.
    Full,
}

/// Sets trainable flags for `mode`.
pub fn freeze_base(model: &mut Transformer, mode: TuningMode) {
    let bitfit = model.attachments().bitfit();
    let owned: Vec<bool> = model
        .params()
        .iter()
        .map(|(_, p)| model.is_attached_param(&p.name))
        .collect();
    for (p, owned) in model.params_mut().iter_mut().zip(owned) {
        p.trainable = match mode {
            TuningMode::Full => true,
            TuningMode::Peft => owned || (bitfit && p.is_bias()),
        };
    }
}

/// Linear warmup from 0 to `learning_rate`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    let warmup = cfg.warmup_steps();
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return cfg.learning_rate * step as f64 / warmup as f64;
    }
    cfg.learning_rate * (total - step) as f64 / (total - warmup) as f64
}

/// Adam moments for the trainable tensors of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let buf = |_: ()| -> Vec<Option<Tensor>> {
            store
                .iter()
                .map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.shape())))
                .collect()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: buf(()),
            v: buf(()),
        }
    }

    /// Number of tensors with moment buffers.
    pub fn tracked(&self) -> usize {
        self.m.iter().filter(|m| m.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when not clipped).
    pub clip_scale: f64,
}

/// One bias-corrected Adam update from the gradients stored on the
/// trainable tensors, after global-norm clipping, with decoupled weight
/// decay `p ← p − lr·wd·p`.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    max_grad_norm: f64,
    weight_decay: f64,
) -> Result<StepInfo> {
    let mut norm_sq = 0.0;
    for (_, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        if let Some(g) = &p.grad {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            norm_sq += g.norm_sq();
        }
    }
    let grad_norm = norm_sq.sqrt();
    let clip_scale = if max_grad_norm > 0.0 && grad_norm > max_grad_norm {
        max_grad_norm / grad_norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (Some(m), Some(v)) = (state.m[i].as_mut(), state.v[i].as_mut()) else {
            return Err(Error::Contract(format!(
                "`{}` became trainable after the optimizer was created",
                p.name
            )));
        };
        let grad = p.grad.as_ref();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g.data()[j]) * clip_scale;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            *w -= lr * (update + weight_decay * *w);
        }
    }
    Ok(StepInfo {
        grad_norm,
        clip_scale,
    })
}

/// Mean label-smoothed cross-entropy over rows with a target.
pub fn smoothed_cross_entropy(g: &mut Graph, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
    g.cross_entropy(logits, targets, smoothing)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }

    pub fn label(&self) -> String {
        match self {
            RunStatus::Ok => "ok".into(),
            RunStatus::Failed(why) => format!("failed: {why}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// `(step, dev metric)` pairs, starting at step 0.
    pub curve: Vec<(usize, f64)>,
    /// Training loss per step.
    pub losses: Vec<f64>,
    pub final_metric: f64,
    pub steps: usize,
    pub status: RunStatus,
    pub wall_seconds: f64,
}

fn batch_loss(f: &mut Forward<'_>, seq2seq: bool, batch: &[&Example], smoothing: f64) -> Result<Var> {
    let src: Vec<&[usize]> = batch.iter().map(|e| e.src.as_slice()).collect();
    if !seq2seq {
        let logits = f.classify_logits(&src)?;
        let targets: Vec<Option<usize>> = batch.iter().map(|e| Some(e.tgt[0])).collect();
        return f.g.cross_entropy(logits, &targets, smoothing);
    }
    let dec_in: Vec<Vec<usize>> = batch.iter().map(|e| e.decoder_input()).collect();
    let dec_refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
    let logits = f.seq2seq_logits(&src, &dec_refs)?;
    let targets: Vec<Option<usize>> = batch.iter().flat_map(|e| e.tgt.iter().map(|&t| Some(t))).collect();
    f.g.cross_entropy(logits, &targets, smoothing)
}

/// Loss and gradients of the trainable tensors on one batch; gradients
/// are written into the parameters' slots.
pub fn compute_gradients(
    model: &mut Transformer,
    batch: &[&Example],
    smoothing: f64,
    dropout: Option<(f64, u64)>,
) -> Result<f64> {
    let seq2seq = model.config().is_encoder_decoder();
    let (loss, grads) = {
        let mut f = Forward::new(model)?;
        if let Some((rate, seed)) = dropout {
            f = f.with_dropout(rate, seed);
        }
        let loss = batch_loss(&mut f, seq2seq, batch, smoothing)?;
        let mut grads = f.g.backward(loss)?;
        let bound: Vec<(usize, Var)> = f.bound().collect();
        let trainable: Vec<(usize, Tensor)> = bound
            .into_iter()
            .filter(|(i, v)| f.g.requires_grad(*v) && *i < model.params().len())
            .map(|(i, v)| (i, grads.take(v)))
            .collect();
        (f.g.value(loss).item(), trainable)
    };
    model.params_mut().zero_grads();
    for (i, g) in grads {
        model.params_mut().get_mut(crate::model::ParamId(i)).grad = Some(g);
    }
    Ok(loss)
}

/// Token accuracy: greedy decoding for encoder-decoder models, argmax
/// class for encoder-only ones.
pub fn evaluate(model: &Transformer, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in examples.chunks(128) {
        let src: Vec<&[usize]> = chunk.iter().map(|e| e.src.as_slice()).collect();
        if model.config().is_encoder_decoder() {
            let len = chunk[0].tgt.len();
            let out = model.greedy_decode(&src, len, BOS)?;
            for (pred, e) in out.iter().zip(chunk) {
                correct += pred.iter().zip(&e.tgt).filter(|(a, b)| a == b).count();
                total += e.tgt.len();
            }
        } else {
            let logits = model.classify(&src)?;
            for (i, e) in chunk.iter().enumerate() {
                correct += usize::from(argmax(logits.row(i)) == e.tgt[0]);
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains the trainable tensors of `model` on `data.train`, evaluating on
/// `data.dev`. A non-finite loss or gradient stops the run and marks it
/// failed; the model keeps its last finite state.
pub fn train_loop(model: &mut Transformer, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let dev: &[Example] = if cfg.eval_examples > 0 {
        &data.dev[..cfg.eval_examples.min(data.dev.len())]
    } else {
        &data.dev
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.params());
    let mut curve = vec![(0, evaluate(model, dev)?)];
    let mut losses = Vec::with_capacity(cfg.total_steps);
    let mut status = RunStatus::Ok;
    let mut steps = 0;
    for step in 0..cfg.total_steps {
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &data.train[rng.gen_range(0..data.train.len())])
            .collect();
        let dropout = (cfg.dropout > 0.0).then(|| (cfg.dropout, mix(cfg.seed, step as u64)));
        let loss = compute_gradients(model, &batch, cfg.label_smoothing, dropout)?;
        if !loss.is_finite() {
            status = RunStatus::Failed(format!("loss diverged at step {step}"));
            break;
        }
        losses.push(loss);
        match adam_step(model.params_mut(), &mut state, lr_at(step, cfg), cfg.max_grad_norm, cfg.weight_decay) {
            Ok(_) => {}
            Err(Error::NonFiniteGradient(name)) => {
                status = RunStatus::Failed(format!("non-finite gradient in `{name}` at step {step}"));
                break;
            }
            Err(e) => return Err(e),
        }
        steps = step + 1;
        if cfg.eval_every > 0 && steps % cfg.eval_every == 0 && steps < cfg.total_steps {
            curve.push((steps, evaluate(model, dev)?));
        }
    }
    model.params_mut().zero_grads();
    if steps > 0 {
        curve.push((steps, evaluate(model, dev)?));
    }
    let final_metric = curve.last().map_or(0.0, |c| c.1);
    Ok(TrainOutcome {
        curve,
        losses,
        final_metric,
        steps,
        status,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::peft::{attach_specs, DesignSpec};
    use crate::task::{gen_task, TaskSpec};
    use crate::HookPoint;

    fn cfg(total: usize, warmup: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: 1.0,
            total_steps: total,
            warmup_fraction: warmup,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(1000, 0.06);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(60, &c), 1.0);
        assert!((lr_at(530, &c) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(1000, &c), 0.0);
        let c = cfg(10, 0.0);
        assert_eq!(lr_at(0, &c), 1.0);
    }

    #[test]
    fn schedule_is_continuous() {
        let c = cfg(997, 0.06);
        let w = c.warmup_steps();
        for s in 1..=c.total_steps {
            assert!((lr_at(s, &c) - lr_at(s - 1, &c)).abs() <= 1.0 / w.min(c.total_steps - w) as f64 + 1e-12);
        }
    }

    fn one_param(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![value]), true).unwrap();
        s.get_mut(id).grad = Some(Tensor::vector(vec![grad]));
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = one_param(0.0, 1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.01, 0.0, 0.0).unwrap();
        assert!((s.by_name("w").unwrap().value.item() + 0.01).abs() < 1e-9);
        for _ in 0..5 {
            adam_step(&mut s, &mut st, 0.01, 0.0, 0.0).unwrap();
        }
        assert!((s.by_name("w").unwrap().value.item() + 0.06).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = one_param(0.7, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, 1.0, 0.0).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.item(), 0.7);
    }

    #[test]
    fn adam_clips_global_norm() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![0.0, 0.0]), true).unwrap();
        s.get_mut(id).grad = Some(Tensor::vector(vec![6.0, 8.0]));
        let mut st = AdamState::new(&s);
        let info = adam_step(&mut s, &mut st, 0.1, 1.0, 0.0).unwrap();
        assert_eq!(info.grad_norm, 10.0);
        assert!((info.clip_scale - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_names_nan_tensor() {
        let mut s = one_param(0.0, f64::NAN);
        let mut st = AdamState::new(&s);
        match adam_step(&mut s, &mut st, 0.1, 1.0, 0.0) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("expected a non-finite gradient error, got {other:?}"),
        }
    }

    #[test]
    fn adam_skips_frozen_tensors() {
        let mut s = one_param(1.0, 1.0);
        s.insert("frozen", Tensor::vector(vec![2.0]), false).unwrap();
        let mut st = AdamState::new(&s);
        assert_eq!(st.tracked(), 1);
        adam_step(&mut s, &mut st, 0.1, 0.0, 0.5).unwrap();
        assert_eq!(s.by_name("frozen").unwrap().value.item(), 2.0);
    }

    #[test]
    fn smoothed_loss_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[2, 5]));
        for a in [0.0, 0.1, 0.5] {
            let l = smoothed_cross_entropy(&mut g, uniform, &[Some(1), Some(3)], a).unwrap();
            assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        }
        let logits = g.constant(Tensor::from_rows(&[&[3f64.ln(), 0.0]]).unwrap());
        let l = smoothed_cross_entropy(&mut g, logits, &[Some(0)], 0.1).unwrap();
        let expected = 0.9 * (4.0f64 / 3.0).ln() + 0.1 * 4f64.ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((g.value(l).item() - 0.3975).abs() < 1e-4);
    }

    fn small_setup() -> (Transformer, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Transformer::new(ModelConfig { vocab: 16, ..ModelConfig::desk() }, &mut rng).unwrap();
        attach_specs(&mut m, &[DesignSpec::parallel_adapter(HookPoint::FfnSublayerOutput, 4)], &mut rng).unwrap();
        freeze_base(&mut m, TuningMode::Peft);
        let data = gen_task(&TaskSpec {
            train: 64,
            dev: 16,
            test: 16,
            seq_len: 4,
            ..TaskSpec::copy()
        })
        .unwrap();
        (m, data)
    }

    #[test]
    fn zero_steps_records_initial_metric_only() {
        let (mut m, data) = small_setup();
        let out = train_loop(&mut m, &data, &TrainConfig { total_steps: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.steps, 0);
        assert!(out.status.is_ok());
    }

    #[test]
    fn same_seed_same_curve_and_frozen_base() {
        let c = TrainConfig {
            total_steps: 20,
            eval_every: 5,
            batch_size: 4,
            dropout: 0.1,
            ..TrainConfig::default()
        };
        let (mut a, data) = small_setup();
        let before = a.clone();
        let ra = train_loop(&mut a, &data, &c).unwrap();
        let (mut b, _) = small_setup();
        let rb = train_loop(&mut b, &data, &c).unwrap();
        assert_eq!(ra.curve, rb.curve);
        assert_eq!(ra.losses, rb.losses);
        for ((_, p), (_, q)) in a.params().iter().zip(before.params().iter()) {
            if !p.trainable {
                assert_eq!(p.value, q.value, "{}", p.name);
            }
        }
        assert!(a.params().iter().any(|(_, p)| p.trainable && p.value != before.params().by_name(&p.name).unwrap().value));
    }

    #[test]
    fn default_rates() {
        assert_eq!(method_learning_rate(&Method::Full), 1e-3);
        assert_eq!(method_learning_rate(&Method::Prefix { l: 8 }), 2e-1);
        assert_eq!(method_learning_rate(&Method::Mam { l: 4, r: 16, s: 4.0 }), 1e-2);
        assert_eq!(method_learning_rate(&Method::LoraAttn { r: 8, s: 1.0 }), 1e-2);
        assert_eq!(default_learning_rate(&[DesignSpec::parallel_adapter(HookPoint::FfnSublayerOutput, 4)]), 3e-2);
    }

    #[test]
    fn freeze_modes() {
        let (mut m, _) = small_setup();
        assert_eq!(m.params().trainable_numel(), 4 * 2 * 4 * 32);
        freeze_base(&mut m, TuningMode::Full);
        assert_eq!(m.params().trainable_numel(), m.params().total_numel());
    }
}
