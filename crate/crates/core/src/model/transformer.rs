use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::peft::attach::{AttachedDelta, Attachments, SiteParams};
use crate::peft::design::{DesignSpec, InsertionForm};
use crate::peft::ops::{
    bottleneck_delta, compose, prefix_head_decomposed, prefix_head_native, prefix_reparam_forward,
    PrefixMlpVars, PrefixVars,
};
use crate::peft::Composition;
use crate::tensor::Tensor;

use super::config::{Architecture, ModelConfig, Positions};
use super::hooks::{HookPoint, Site, Stack, SublayerKind, SublayerTrace, TraceEntry};
use super::layers::{attn, causal_mask, linear, sinusoidal_positions, split_heads};
use super::params::ParamStore;

/// Which of the two equivalent computations prefix attention uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PrefixForm {
    /// Prefixes prepended to keys and values.
    #[default]
    Native,
    /// `(1-λ)·h + λ·Δh`.
    Decomposed,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// The base model plus any attached modifications.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) attachments: Attachments,
}

fn base_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, dm, v) = (config.d_model, config.d_ff, config.vocab);
    let std = config.effective_init_std();
    let std_2 = if config.init_std > 0.0 {
        config.init_std
    } else {
        1.0 / (dm as f64).sqrt()
    };
    let mut out = vec![("embed_tokens.weight".to_string(), vec![v, d], Init::Normal(std))];
    let stacks: &[Stack] = if config.is_encoder_decoder() {
        &[Stack::Encoder, Stack::Decoder]
    } else {
        &[Stack::Encoder]
    };
    for &stack in stacks {
        let tag = match stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        if let Positions::Learned { max_len } = config.positions {
            out.push((format!("{tag}.pos.weight"), vec![max_len, d], Init::Normal(std)));
        }
        for layer in 0..config.layers {
            let mut kinds = vec![SublayerKind::SelfAttn];
            if stack == Stack::Decoder {
                kinds.push(SublayerKind::CrossAttn);
            }
            kinds.push(SublayerKind::Ffn);
            for kind in kinds {
                let site = Site::new(stack, layer, kind);
                if kind.is_attention() {
                    for proj in ["q", "k", "v", "o"] {
                        out.push((format!("{site}.{proj}.weight"), vec![d, d], Init::Normal(std)));
                        if config.attn_bias {
                            out.push((format!("{site}.{proj}.bias"), vec![d], Init::Zeros));
                        }
                    }
                } else {
                    out.push((format!("{site}.fc1.weight"), vec![d, dm], Init::Normal(std)));
                    out.push((format!("{site}.fc1.bias"), vec![dm], Init::Zeros));
                    out.push((format!("{site}.fc2.weight"), vec![dm, d], Init::Normal(std_2)));
                    out.push((format!("{site}.fc2.bias"), vec![d], Init::Zeros));
                }
                out.push((format!("{site}_norm.gain"), vec![d], Init::Ones));
                out.push((format!("{site}_norm.bias"), vec![d], Init::Zeros));
            }
        }
    }
    match config.architecture {
        Architecture::EncoderDecoder if !config.tie_embeddings => {
            out.push(("lm_head.weight".into(), vec![d, v], Init::Normal(std)));
            out.push(("lm_head.bias".into(), vec![v], Init::Zeros));
        }
        Architecture::EncoderDecoder => {}
        Architecture::EncoderOnly { classes } => {
            out.push(("classifier.weight".into(), vec![d, classes], Init::Normal(std)));
            out.push(("classifier.bias".into(), vec![classes], Init::Zeros));
        }
    }
    out
}

impl Transformer {
    /// Randomly initialized base model, all tensors frozen.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in base_layout(&config) {
            let value = match init {
                Init::Normal(std) => Tensor::randn(&shape, std, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
            };
            params.insert(name, value, false)?;
        }
        Ok(Self {
            config,
            params,
            attachments: Attachments::default(),
        })
    }

    /// Same layout with no payloads; supports parameter accounting only.
    pub fn shape_only(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::shape_only();
        for (name, shape, _) in base_layout(&config) {
            params.insert_shape(name, &shape, false)?;
        }
        Ok(Self {
            config,
            params,
            attachments: Attachments::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn attachments(&self) -> &Attachments {
        &self.attachments
    }

    /// Whether `name` belongs to an attached modification.
    pub fn is_attached_param(&self, name: &str) -> bool {
        self.attachments.owns(name)
    }

    /// Size of the base model, attachments excluded.
    pub fn base_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| !self.attachments.owns(&p.name))
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn forward(&self) -> Result<Forward<'_>> {
        Forward::new(self)
    }

    /// Decoder logits `[tgt.len() × vocab]` for one pair; `tgt` is the
    /// decoder input.
    pub fn logits(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
        let mut f = Forward::inference(self)?;
        let out = f.seq2seq_logits(&[src], &[tgt])?;
        Ok(f.g.value(out).clone())
    }

    /// Like [`Transformer::logits`], also returning every hook-point tensor.
    pub fn trace(&self, src: &[usize], tgt: &[usize]) -> Result<(Tensor, SublayerTrace)> {
        let mut f = Forward::inference(self)?.with_trace();
        let out = f.seq2seq_logits(&[src], &[tgt])?;
        let logits = f.g.value(out).clone();
        Ok((logits, f.take_trace()))
    }

    /// Classification logits `[batch × classes]` (encoder-only models).
    pub fn classify(&self, src: &[&[usize]]) -> Result<Tensor> {
        let mut f = Forward::inference(self)?;
        let out = f.classify_logits(src)?;
        Ok(f.g.value(out).clone())
    }

    /// Greedy decoding of `len` tokens per source, starting from `bos`.
    pub fn greedy_decode(&self, src: &[&[usize]], len: usize, bos: usize) -> Result<Vec<Vec<usize>>> {
        let mut f = Forward::inference(self)?;
        let enc = f.encode(src)?;
        let mut seqs: Vec<Vec<usize>> = vec![vec![bos]; src.len()];
        let mut out: Vec<Vec<usize>> = vec![Vec::with_capacity(len); src.len()];
        for t in 0..len {
            let tgt: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            let logits = f.decode(&enc, &tgt)?;
            let lt = f.g.value(logits);
            for (b, seq) in seqs.iter_mut().enumerate() {
                let row = lt.row(b * (t + 1) + t);
                let best = argmax(row);
                out[b].push(best);
                seq.push(best);
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Encoder output of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `(batch·len) × d`
    pub out: Var,
    pub batch: usize,
    /// Positions per sequence, prompt included.
    pub len: usize,
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// One forward pass: a graph plus lazily bound model tensors.
pub struct Forward<'m> {
    pub g: Graph,
    model: &'m Transformer,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    trace: Option<SublayerTrace>,
    dropout: Option<Dropout>,
    prefix_form: PrefixForm,
    reparam: Vec<Option<Vec<PrefixVars>>>,
}

fn check_batch(seqs: &[&[usize]], what: &str) -> Result<usize> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Contract(format!("empty {what} batch")))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::Contract(format!("zero-length {what}")));
    }
    if seqs.iter().any(|s| s.len() != n) {
        return Err(Error::Contract(format!("{what} sequences differ in length")));
    }
    Ok(n)
}

impl<'m> Forward<'m> {
    /// Trainable tensors are bound as differentiable leaves.
    pub fn new(model: &'m Transformer) -> Result<Self> {
        if model.params.is_shape_only() {
            return Err(Error::Contract("shape-only model has no values to run".into()));
        }
        Ok(Self {
            g: Graph::new(),
            model,
            bound: vec![None; model.params.len()],
            track_grads: true,
            trace: None,
            dropout: None,
            prefix_form: PrefixForm::Native,
            reparam: vec![None; model.attachments.mlps.len()],
        })
    }

    /// Every tensor bound as a constant.
    pub fn inference(model: &'m Transformer) -> Result<Self> {
        let mut f = Self::new(model)?;
        f.track_grads = false;
        Ok(f)
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(SublayerTrace::default());
        self
    }

    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        if rate > 0.0 {
            self.dropout = Some(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        self
    }

    pub fn with_prefix_form(mut self, form: PrefixForm) -> Self {
        self.prefix_form = form;
        self
    }

    pub fn take_trace(&mut self) -> SublayerTrace {
        self.trace.take().unwrap_or_default()
    }

    /// `(parameter index, graph variable)` for every tensor used so far.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.model.params.id(name)?;
        if let Some(v) = self.bound[id.index()] {
            return Ok(v);
        }
        let p = self.model.params.get(id);
        let v = self.g.leaf(p.value.clone(), self.track_grads && p.trainable);
        self.bound[id.index()] = Some(v);
        Ok(v)
    }

    fn opt_param(&mut self, name: &str) -> Result<Option<Var>> {
        if self.model.params.id(name).is_ok() {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn record(&mut self, site: Option<Site>, hook: HookPoint, head: Option<usize>, v: Var) {
        if let Some(t) = &mut self.trace {
            t.entries.push(TraceEntry {
                site,
                hook,
                head,
                value: self.g.value(v).clone(),
            });
        }
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(d) = &mut self.dropout else {
            return Ok(x);
        };
        let keep = 1.0 - d.rate;
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::new(&shape, data)?;
        self.g.mul_const(x, mask)
    }

    fn delta(&self, site: Site, hook: HookPoint) -> Option<(&'m AttachedDelta, &'m DesignSpec)> {
        let model: &'m Transformer = self.model;
        model
            .attachments
            .deltas
            .get(&(site, hook))
            .map(|d| (d, &model.attachments.specs[d.spec]))
    }

    fn scale_var(&mut self, delta: &AttachedDelta) -> Result<Option<Var>> {
        match &delta.scale {
            Some(name) => self.param(name).map(Some),
            None => Ok(None),
        }
    }

    /// Δh of a bottleneck module computed from `input`, composed onto `h`.
    fn apply_bottleneck(
        &mut self,
        delta: &AttachedDelta,
        spec: &DesignSpec,
        down: &str,
        up: &str,
        input: Var,
        h: Var,
    ) -> Result<Var> {
        let (down, up) = (self.param(down)?, self.param(up)?);
        let dh = bottleneck_delta(&mut self.g, input, down, up, spec.functional_form)?;
        let scale = self.scale_var(delta)?;
        compose(&mut self.g, h, dh, spec.composition, None, scale)
    }

    fn apply_single(&mut self, delta: &AttachedDelta, spec: &DesignSpec, input: Var, h: Var) -> Result<Var> {
        match &delta.params {
            SiteParams::Bottleneck { down, up } => self.apply_bottleneck(delta, spec, down, up, input, h),
            _ => Err(Error::Contract(format!("{} cannot modify a full-width tensor", spec.label()))),
        }
    }

    /// Projection with an optional weight-level modification.
    fn projection(&mut self, site: Site, hook: HookPoint, x: Var, w: &str, b: Option<Var>) -> Result<Var> {
        let w = self.param(w)?;
        let h = linear(&mut self.g, x, w, b)?;
        let h = match self.delta(site, hook) {
            Some((delta, spec)) => {
                let input = match spec.insertion_form {
                    InsertionForm::Parallel => x,
                    InsertionForm::Sequential => h,
                };
                self.apply_single(delta, spec, input, h)?
            }
            None => h,
        };
        self.record(Some(site), hook, None, h);
        Ok(h)
    }

    fn prefix_vars(&mut self, delta: &AttachedDelta, spec_index: usize) -> Result<PrefixVars> {
        match &delta.params {
            SiteParams::Prefix { key, value } => Ok(PrefixVars {
                key: self.param(key)?,
                value: self.param(value)?,
            }),
            SiteParams::ReparamSlot { mlp, slot } => {
                if self.reparam[*mlp].is_none() {
                    let names = &self.model.attachments.mlps[*mlp];
                    let vars = PrefixMlpVars {
                        embedding: self.param(&names.embedding)?,
                        w_1: self.param(&names.w_1)?,
                        b_1: self.param(&names.b_1)?,
                        w_2: self.param(&names.w_2)?,
                        b_2: self.param(&names.b_2)?,
                    };
                    let ps = prefix_reparam_forward(&mut self.g, &vars, self.model.config.d_model)?;
                    self.reparam[*mlp] = Some(ps);
                }
                Ok(self.reparam[*mlp].as_ref().expect("computed above")[*slot])
            }
            _ => Err(Error::Contract(format!(
                "attachment {spec_index} is not a prefix"
            ))),
        }
    }

    /// Attention sublayer output before residual and normalization.
    fn attention(&mut self, site: Site, x: Var, c: Var, batch: usize, mask: Option<&Tensor>) -> Result<Var> {
        let heads = self.model.config.heads;
        let b = |p: &str| format!("{site}.{p}.bias");
        let (bq, bk, bv, bo) = (
            self.opt_param(&b("q"))?,
            self.opt_param(&b("k"))?,
            self.opt_param(&b("v"))?,
            self.opt_param(&b("o"))?,
        );
        let q = self.projection(site, HookPoint::AttnQueryProj, x, &format!("{site}.q.weight"), bq)?;
        let wk = self.param(&format!("{site}.k.weight"))?;
        let k = linear(&mut self.g, c, wk, bk)?;
        let v = self.projection(site, HookPoint::AttnValueProj, c, &format!("{site}.v.weight"), bv)?;

        let dh = self.model.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = split_heads(&mut self.g, q, heads)?;
        let ks = split_heads(&mut self.g, k, heads)?;
        let vs = split_heads(&mut self.g, v, heads)?;

        let head_delta = self.delta(site, HookPoint::HeadAttnOutput);
        let prefix = match head_delta {
            Some((delta, spec)) if spec.is_prefix() => {
                let p = self.prefix_vars(delta, delta.spec)?;
                let pks = split_heads(&mut self.g, p.key, heads)?;
                let pvs = split_heads(&mut self.g, p.value, heads)?;
                Some((delta, spec, pks, pvs))
            }
            _ => None,
        };
        let x_heads = match head_delta {
            Some((_, spec)) if !spec.is_prefix() && spec.insertion_form == InsertionForm::Parallel => {
                Some(split_heads(&mut self.g, x, heads)?)
            }
            _ => None,
        };

        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let h = match &prefix {
                Some((delta, spec, pks, pvs)) => {
                    let native =
                        spec.composition == Composition::GatedAdd && self.prefix_form == PrefixForm::Native;
                    if native {
                        prefix_head_native(&mut self.g, qs[i], ks[i], vs[i], pks[i], pvs[i], batch, scale, mask)?
                    } else {
                        let learned = self.scale_var(delta)?;
                        prefix_head_decomposed(
                            &mut self.g,
                            qs[i],
                            ks[i],
                            vs[i],
                            pks[i],
                            pvs[i],
                            batch,
                            scale,
                            mask,
                            spec.composition,
                            learned,
                        )?
                        .0
                    }
                }
                None => attn(&mut self.g, qs[i], ks[i], vs[i], batch, scale, mask)?,
            };
            let h = match head_delta {
                Some((delta, spec)) if !spec.is_prefix() => {
                    let SiteParams::MultiHead(pairs) = &delta.params else {
                        return Err(Error::Contract(format!("{} needs per-head parameters", spec.label())));
                    };
                    let input = x_heads.as_ref().map_or(h, |xs| xs[i]);
                    let (down, up) = &pairs[i];
                    self.apply_bottleneck(delta, spec, down, up, input, h)?
                }
                _ => h,
            };
            self.record(Some(site), HookPoint::HeadAttnOutput, Some(i), h);
            outs.push(h);
        }
        let cat = self.g.concat_cols(&outs)?;
        let wo = self.param(&format!("{site}.o.weight"))?;
        if let Some(bo) = bo {
            self.record(Some(site), HookPoint::BiasTerms, None, bo);
        }
        linear(&mut self.g, cat, wo, bo)
    }

    /// FFN sublayer output before residual and normalization.
    fn ffn(&mut self, site: Site, x: Var) -> Result<Var> {
        let b1 = self.param(&format!("{site}.fc1.bias"))?;
        let h1 = self.projection(site, HookPoint::FfnWeight1, x, &format!("{site}.fc1.weight"), Some(b1))?;
        let a = self.g.relu(h1);
        let b2 = self.param(&format!("{site}.fc2.bias"))?;
        self.record(Some(site), HookPoint::BiasTerms, None, b2);
        self.projection(site, HookPoint::FfnWeight2, a, &format!("{site}.fc2.weight"), Some(b2))
    }

    /// Dropout, sublayer-output modifications, residual and layer norm.
    fn close_sublayer(&mut self, site: Site, hook: HookPoint, x: Var, h: Var) -> Result<Var> {
        let mut h = self.dropout(h)?;
        let delta = self.delta(site, hook);
        if let Some((d, spec)) = delta {
            if spec.insertion_form == InsertionForm::Parallel {
                h = self.apply_single(d, spec, x, h)?;
            }
        }
        self.record(Some(site), hook, None, h);
        let r = self.g.add(x, h)?;
        let gain = self.param(&format!("{site}_norm.gain"))?;
        let bias = self.param(&format!("{site}_norm.bias"))?;
        let out = self.g.layer_norm(r, gain, bias, self.model.config.ln_eps)?;
        match delta {
            Some((d, spec)) if spec.insertion_form == InsertionForm::Sequential => self.apply_single(d, spec, out, out),
            _ => Ok(out),
        }
    }

    fn attention_block(&mut self, site: Site, x: Var, c: Var, batch: usize, mask: Option<&Tensor>) -> Result<Var> {
        let h = self.attention(site, x, c, batch, mask)?;
        self.close_sublayer(site, HookPoint::AttnSublayerOutput, x, h)
    }

    fn ffn_block(&mut self, site: Site, x: Var) -> Result<Var> {
        let h = self.ffn(site, x)?;
        self.close_sublayer(site, HookPoint::FfnSublayerOutput, x, h)
    }

    fn embed(&mut self, seqs: &[&[usize]], stack: Stack, what: &str) -> Result<(Var, usize)> {
        let n = check_batch(seqs, what)?;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let table = self.param("embed_tokens.weight")?;
        let x = self.g.gather_rows(table, &ids)?;
        let d = self.model.config.d_model;
        let x = match self.model.config.positions {
            Positions::Sinusoidal => self.g.add_const_blocks(x, &sinusoidal_positions(n, d))?,
            Positions::Learned { max_len } => {
                if n > max_len {
                    return Err(Error::Contract(format!(
                        "{what} length {n} exceeds {max_len} positions"
                    )));
                }
                let tag = match stack {
                    Stack::Encoder => "enc",
                    Stack::Decoder => "dec",
                };
                let table = self.param(&format!("{tag}.pos.weight"))?;
                let pos_ids: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..n).collect();
                let pos = self.g.gather_rows(table, &pos_ids)?;
                self.g.add(x, pos)?
            }
        };
        Ok((x, n))
    }

    /// Runs the encoder stack over a batch of equal-length sources.
    pub fn encode(&mut self, src: &[&[usize]]) -> Result<Encoded> {
        let batch = src.len();
        let (mut x, mut n) = self.embed(src, Stack::Encoder, "source")?;
        if let Some(name) = &self.model.attachments.prompt {
            let p = self.param(name)?;
            n += self.g.shape(p)[0];
            x = self.g.batched_concat_rows(p, x, batch, true)?;
        }
        self.record(None, HookPoint::InputEmbedding, None, x);
        for layer in 0..self.model.config.layers {
            x = self.attention_block(Site::new(Stack::Encoder, layer, SublayerKind::SelfAttn), x, x, batch, None)?;
            x = self.ffn_block(Site::new(Stack::Encoder, layer, SublayerKind::Ffn), x)?;
        }
        Ok(Encoded { out: x, batch, len: n })
    }

    /// Decoder logits `[(batch·n) × vocab]` for decoder inputs `tgt`.
    pub fn decode(&mut self, enc: &Encoded, tgt: &[&[usize]]) -> Result<Var> {
        if !self.model.config.is_encoder_decoder() {
            return Err(Error::Contract("encoder-only model has no decoder".into()));
        }
        if tgt.len() != enc.batch {
            return Err(Error::Contract(format!(
                "{} targets for {} sources",
                tgt.len(),
                enc.batch
            )));
        }
        let (mut x, n) = self.embed(tgt, Stack::Decoder, "target")?;
        let mask = causal_mask(n);
        for layer in 0..self.model.config.layers {
            let s = Site::new(Stack::Decoder, layer, SublayerKind::SelfAttn);
            x = self.attention_block(s, x, x, enc.batch, Some(&mask))?;
            let s = Site::new(Stack::Decoder, layer, SublayerKind::CrossAttn);
            x = self.attention_block(s, x, enc.out, enc.batch, None)?;
            x = self.ffn_block(Site::new(Stack::Decoder, layer, SublayerKind::Ffn), x)?;
        }
        if self.model.config.tie_embeddings {
            let table = self.param("embed_tokens.weight")?;
            self.g.matmul_nt(x, table)
        } else {
            let w = self.param("lm_head.weight")?;
            let b = self.param("lm_head.bias")?;
            linear(&mut self.g, x, w, Some(b))
        }
    }

    pub fn seq2seq_logits(&mut self, src: &[&[usize]], tgt: &[&[usize]]) -> Result<Var> {
        let enc = self.encode(src)?;
        self.decode(&enc, tgt)
    }

    /// Mean-pooled classification logits `[batch × classes]`.
    pub fn classify_logits(&mut self, src: &[&[usize]]) -> Result<Var> {
        if self.model.config.is_encoder_decoder() {
            return Err(Error::Contract("classification needs an encoder-only model".into()));
        }
        let enc = self.encode(src)?;
        let pooled = self.g.segment_mean(enc.out, enc.batch)?;
        let w = self.param("classifier.weight")?;
        let b = self.param("classifier.bias")?;
        linear(&mut self.g, pooled, w, Some(b))
    }
}

impl Transformer {
    /// Replaces every bias vector with `N(0, std²)` draws. Base biases start
    /// at zero, which hides bias-path bugs in tests.
    pub fn randomize_biases(&mut self, std: f64, rng: &mut dyn RngCore) {
        for p in self.params.iter_mut() {
            if p.is_bias() && p.value.numel() > 0 {
                p.value = Tensor::randn(p.shape(), std, rng);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn model(seed: u64) -> Transformer {
        Transformer::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn logits_shape_is_target_by_vocab() {
        let m = model(0);
        let l = m.logits(&[1, 2, 3, 4, 5], &[0, 1, 2]).unwrap();
        assert_eq!(l.shape(), &[3, 32]);
    }

    #[test]
    fn zero_length_target_is_an_error() {
        let m = model(0);
        assert!(matches!(m.logits(&[1, 2], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        let m = model(0);
        assert!(matches!(m.logits(&[1, 99], &[0]), Err(Error::OutOfVocab { id: 99, .. })));
    }

    #[test]
    fn decoder_is_causal() {
        let m = model(3);
        let src = [4, 5, 6, 7];
        let a = m.logits(&src, &[0, 1, 2, 3, 4]).unwrap();
        let b = m.logits(&src, &[0, 1, 2, 9, 9]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model(1);
        let a = m.logits(&[1, 2, 3], &[0, 4]).unwrap();
        let b = m.logits(&[1, 2, 3], &[0, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_covers_every_sublayer() {
        let m = model(2);
        let (_, trace) = m.trace(&[1, 2, 3], &[0, 1]).unwrap();
        let cfg = m.config();
        assert_eq!(trace.count(HookPoint::AttnSublayerOutput), 3 * cfg.layers);
        assert_eq!(trace.count(HookPoint::FfnSublayerOutput), 2 * cfg.layers);
        assert_eq!(trace.count(HookPoint::HeadAttnOutput), 3 * cfg.layers * cfg.heads);
        assert_eq!(trace.count(HookPoint::InputEmbedding), 1);
        let head = trace.entries.iter().find(|e| e.hook == HookPoint::HeadAttnOutput).unwrap();
        assert_eq!(head.value.shape(), &[3, cfg.head_dim()]);
        let w1 = trace.entries.iter().find(|e| e.hook == HookPoint::FfnWeight1).unwrap();
        assert_eq!(w1.value.shape(), &[3, cfg.d_ff]);
    }

    #[test]
    fn batched_forward_matches_single() {
        let m = model(4);
        let srcs: [&[usize]; 2] = [&[1, 2, 3], &[7, 8, 9]];
        let tgts: [&[usize]; 2] = [&[0, 5], &[0, 6]];
        let mut f = Forward::inference(&m).unwrap();
        let out = f.seq2seq_logits(&srcs, &tgts).unwrap();
        let all = f.g.value(out).clone();
        for i in 0..2 {
            let one = m.logits(srcs[i], tgts[i]).unwrap();
            assert!(all.slice_rows(2 * i, 2).max_abs_diff(&one) < 1e-12);
        }
    }

    #[test]
    fn zero_weights_reduce_blocks_to_layer_norm_chain() {
        let mut m = model(5);
        let names: Vec<String> = m
            .params()
            .iter()
            .map(|(_, p)| p.name.clone())
            .filter(|n| n.contains(".q.") || n.contains(".k.") || n.contains(".v.") || n.contains(".o.") || n.contains(".fc"))
            .collect();
        for n in names {
            let id = m.params().id(&n).unwrap();
            let shape = m.params().get(id).shape().to_vec();
            m.params_mut().set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut f = Forward::inference(&m).unwrap().with_trace();
        let enc = f.encode(&[&[1, 2, 3]]).unwrap();
        let out = f.g.value(enc.out).clone();
        let input = f.take_trace().find(None, HookPoint::InputEmbedding).next().unwrap().value.clone();
        let mut g = Graph::new();
        let mut x = g.constant(input);
        let gain = g.constant(Tensor::ones(&[32]));
        let bias = g.constant(Tensor::zeros(&[32]));
        for _ in 0..2 * m.config().layers {
            x = g.layer_norm(x, gain, bias, m.config().ln_eps).unwrap();
        }
        assert!(g.value(x).max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn shape_only_model_counts_but_cannot_run() {
        let m = Transformer::shape_only(ModelConfig::desk()).unwrap();
        let live = model(0);
        assert_eq!(m.params().total_numel(), live.params().total_numel());
        assert!(m.forward().is_err());
    }

    #[test]
    fn fresh_model_has_nothing_trainable() {
        assert_eq!(model(0).params().trainable_numel(), 0);
    }

    #[test]
    fn greedy_decode_emits_requested_length() {
        let m = model(6);
        let out = m.greedy_decode(&[&[1, 2, 3], &[3, 2, 1]], 4, 0).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.len() == 4 && s.iter().all(|&t| t < 32)));
    }

    #[test]
    fn encoder_only_model_classifies() {
        let cfg = ModelConfig {
            architecture: Architecture::EncoderOnly { classes: 2 },
            ..ModelConfig::desk()
        };
        let m = Transformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = m.classify(&[&[1, 2, 3], &[4, 5, 6]]).unwrap();
        assert_eq!(l.shape(), &[2, 2]);
        assert!(m.logits(&[1], &[0]).is_err());
    }
}
