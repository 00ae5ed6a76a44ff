use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{HookPoint, Site, Transformer};
use crate::tensor::Tensor;

use super::design::{Composition, DesignSpec, FunctionalForm, InsertionForm};
use super::params::{PeftParams, PromptParams};

/// Graph-side tensor names of one attached modification at one site.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum SiteParams {
    Bottleneck { down: String, up: String },
    MultiHead(Vec<(String, String)>),
    Prefix { key: String, value: String },
    /// Prefix produced by slot `slot` of shared MLP `mlp`.
    ReparamSlot { mlp: usize, slot: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttachedDelta {
    /// Index into [`Attachments::specs`].
    pub spec: usize,
    pub params: SiteParams,
    /// Learned replacement for the constant of `ScaledAdd`.
    pub scale: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MlpNames {
    pub embedding: String,
    pub w_1: String,
    pub b_1: String,
    pub w_2: String,
    pub b_2: String,
}

/// Everything attached to a [`Transformer`].
#[derive(Clone, Debug, Default)]
pub struct Attachments {
    pub(crate) specs: Vec<DesignSpec>,
    pub(crate) deltas: BTreeMap<(Site, HookPoint), AttachedDelta>,
    pub(crate) mlps: Vec<MlpNames>,
    pub(crate) prompt: Option<String>,
    pub(crate) bitfit: bool,
    owned: BTreeSet<String>,
}

impl Attachments {
    pub fn specs(&self) -> &[DesignSpec] {
        &self.specs
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty() && self.prompt.is_none() && !self.bitfit
    }

    pub fn has_prompt(&self) -> bool {
        self.prompt.is_some()
    }

    pub fn bitfit(&self) -> bool {
        self.bitfit
    }

    /// Whether a tensor was added by an attachment.
    pub fn owns(&self, name: &str) -> bool {
        self.owned.contains(name)
    }

    pub fn owned(&self) -> impl Iterator<Item = &str> {
        self.owned.iter().map(String::as_str)
    }

    /// `(site, hook)` pairs currently modified.
    pub fn modified(&self) -> impl Iterator<Item = (Site, HookPoint)> + '_ {
        self.deltas.keys().copied()
    }
}

struct Layout {
    sites: Vec<(Site, SiteParams, Option<String>)>,
    /// Tensor names and shapes in the order [`flatten`] yields values.
    tensors: Vec<(String, Vec<usize>)>,
    mlp: Option<MlpNames>,
}

fn layout(spec: &DesignSpec, model: &Transformer, index: usize) -> Result<Layout> {
    spec.validate()?;
    let config = model.config();
    let sites = spec.target_sites(config);
    if sites.is_empty() {
        return Err(Error::Config(format!("{} matches no sublayer", spec.label())));
    }
    let (d, r) = (config.d_model, spec.bottleneck);
    let (d_in, d_out) = spec.widths(config);
    let hook = spec.modified_representation;
    let mut out = Layout {
        sites: Vec::new(),
        tensors: Vec::new(),
        mlp: None,
    };
    if let Some(reparam) = spec.reparam {
        let base = format!("peft.{index}.reparam");
        let names = MlpNames {
            embedding: format!("{base}.embedding"),
            w_1: format!("{base}.w_1"),
            b_1: format!("{base}.b_1"),
            w_2: format!("{base}.w_2"),
            b_2: format!("{base}.b_2"),
        };
        let width = sites.len() * 2 * d;
        out.tensors.extend([
            (names.embedding.clone(), vec![r, reparam.embed_dim]),
            (names.w_1.clone(), vec![reparam.embed_dim, reparam.hidden]),
            (names.b_1.clone(), vec![reparam.hidden]),
            (names.w_2.clone(), vec![reparam.hidden, width]),
            (names.b_2.clone(), vec![width]),
        ]);
        out.mlp = Some(names);
    }
    let mlp_index = model.attachments.mlps.len();
    for (slot, site) in sites.into_iter().enumerate() {
        let base = format!("peft.{index}.{site}.{hook}");
        let params = if spec.is_prefix() {
            if spec.reparam.is_some() {
                SiteParams::ReparamSlot { mlp: mlp_index, slot }
            } else {
                let (key, value) = (format!("{base}.prefix_key"), format!("{base}.prefix_value"));
                out.tensors.push((key.clone(), vec![r, d]));
                out.tensors.push((value.clone(), vec![r, d]));
                SiteParams::Prefix { key, value }
            }
        } else if hook == HookPoint::HeadAttnOutput {
            let pairs = (0..config.heads)
                .map(|h| {
                    let (down, up) = (format!("{base}.{h}.down"), format!("{base}.{h}.up"));
                    out.tensors.push((down.clone(), vec![d_in, r]));
                    out.tensors.push((up.clone(), vec![r, d_out]));
                    (down, up)
                })
                .collect();
            SiteParams::MultiHead(pairs)
        } else {
            let (down, up) = (format!("{base}.down"), format!("{base}.up"));
            out.tensors.push((down.clone(), vec![d_in, r]));
            out.tensors.push((up.clone(), vec![r, d_out]));
            SiteParams::Bottleneck { down, up }
        };
        let scale = spec.trainable_scale.then(|| format!("{base}.scale"));
        out.sites.push((site, params, scale));
    }
    Ok(out)
}

fn flatten(values: PeftParams) -> Vec<Tensor> {
    match values {
        PeftParams::Bottleneck(v) => v.into_iter().flat_map(|(_, p)| [p.down, p.up]).collect(),
        PeftParams::MultiHead(v) => v
            .into_iter()
            .flat_map(|(_, hs)| hs.into_iter().flat_map(|p| [p.down, p.up]))
            .collect(),
        PeftParams::Prefix(v) => v.into_iter().flat_map(|(_, p)| [p.key, p.value]).collect(),
        PeftParams::PrefixReparam { mlp, .. } => vec![mlp.embedding, mlp.w_1, mlp.b_1, mlp.w_2, mlp.b_2],
    }
}

/// Attaches each `(spec, params)` pair. Nothing is attached if any pair is
/// invalid or two modifications would share a `(site, hook)` slot.
pub fn attach_modifications(model: &mut Transformer, mods: Vec<(DesignSpec, PeftParams)>) -> Result<()> {
    let mods = mods.into_iter().map(|(s, p)| (s, Some(p))).collect();
    register(model, mods)
}

/// Attaches `specs` with freshly initialized parameters. On a shape-only
/// model only the shapes are registered.
pub fn attach_specs<R: Rng + ?Sized>(model: &mut Transformer, specs: &[DesignSpec], rng: &mut R) -> Result<()> {
    let mut mods = Vec::with_capacity(specs.len());
    for spec in specs {
        let values = if model.params().is_shape_only() {
            spec.validate()?;
            None
        } else {
            Some(PeftParams::init(spec, model.config(), rng)?)
        };
        mods.push((spec.clone(), values));
    }
    register(model, mods)
}

fn register(model: &mut Transformer, mods: Vec<(DesignSpec, Option<PeftParams>)>) -> Result<()> {
    let first = model.attachments.specs.len();
    let mut plans = Vec::with_capacity(mods.len());
    let mut taken: BTreeSet<(Site, HookPoint)> = model.attachments.deltas.keys().copied().collect();
    let mut mlp_offset = 0;
    for (i, (spec, values)) in mods.into_iter().enumerate() {
        let mut plan = layout(&spec, model, first + i)?;
        for (_, params, _) in &mut plan.sites {
            if let SiteParams::ReparamSlot { mlp, .. } = params {
                *mlp += mlp_offset;
            }
        }
        if plan.mlp.is_some() {
            mlp_offset += 1;
        }
        for (site, _, _) in &plan.sites {
            if !taken.insert((*site, spec.modified_representation)) {
                return Err(Error::Config(format!(
                    "{site} already has a modification at {}",
                    spec.modified_representation
                )));
            }
        }
        let values = match values {
            Some(v) => {
                let expected: Vec<Site> = plan.sites.iter().map(|(s, _, _)| *s).collect();
                if v.sites() != expected {
                    return Err(Error::Config(format!(
                        "parameters of {} do not cover its sites",
                        spec.label()
                    )));
                }
                let tensors = flatten(v);
                if tensors.len() != plan.tensors.len() {
                    return Err(Error::Config(format!(
                        "parameters of {} have the wrong layout",
                        spec.label()
                    )));
                }
                for ((_, shape), t) in plan.tensors.iter().zip(&tensors) {
                    if t.shape() != shape.as_slice() {
                        return Err(Error::dim("attach_modifications", shape, t.shape()));
                    }
                }
                Some(tensors)
            }
            None => None,
        };
        plans.push((spec, plan, values));
    }

    for (spec, plan, values) in plans {
        let index = model.attachments.specs.len();
        let hook = spec.modified_representation;
        match values {
            Some(values) => {
                for ((name, _), t) in plan.tensors.iter().zip(values) {
                    model.params_mut().insert(name.clone(), t, true)?;
                }
            }
            None => {
                for (name, shape) in &plan.tensors {
                    model.params_mut().insert_shape(name.clone(), shape, true)?;
                }
            }
        }
        let mut owned: Vec<String> = plan.tensors.into_iter().map(|(n, _)| n).collect();
        for (site, params, scale) in plan.sites {
            if let Some(name) = &scale {
                model.params_mut().insert(name.clone(), Tensor::vector(vec![spec.scale()]), true)?;
                owned.push(name.clone());
            }
            model.attachments.deltas.insert(
                (site, hook),
                AttachedDelta {
                    spec: index,
                    params,
                    scale,
                },
            );
        }
        if let Some(names) = plan.mlp {
            model.attachments.mlps.push(names);
        }
        model.attachments.owned.extend(owned);
        model.attachments.specs.push(spec);
    }
    Ok(())
}

/// Prepends trainable prompt vectors to the encoder input.
pub fn prompt_tuning_attach(model: &mut Transformer, p: PromptParams) -> Result<()> {
    let d = model.config().d_model;
    let shape = p.embeddings.shape().to_vec();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::dim("prompt_tuning_attach", &shape, &[d]));
    }
    attach_prompt_tensor(model, Some(p.embeddings), &shape)
}

/// Prompt of length `l`, initialized like the token embeddings (or only
/// registered by shape on a shape-only model).
pub fn attach_prompt<R: Rng + ?Sized>(model: &mut Transformer, l: usize, rng: &mut R) -> Result<()> {
    let d = model.config().d_model;
    if model.params().is_shape_only() {
        if l == 0 {
            return Err(Error::Contract("prompt length must be at least 1".into()));
        }
        return attach_prompt_tensor(model, None, &[l, d]);
    }
    let std = model.config().effective_init_std();
    prompt_tuning_attach(model, PromptParams::init(l, d, std, rng)?)
}

fn attach_prompt_tensor(model: &mut Transformer, value: Option<Tensor>, shape: &[usize]) -> Result<()> {
    if model.attachments.prompt.is_some() {
        return Err(Error::Config("a prompt is already attached".into()));
    }
    if shape[0] == 0 {
        return Err(Error::Contract("prompt length must be at least 1".into()));
    }
    let name = "prompt.embeddings".to_string();
    match value {
        Some(v) => model.params_mut().insert(name.clone(), v, true)?,
        None => model.params_mut().insert_shape(name.clone(), shape, true)?,
    };
    model.attachments.owned.insert(name.clone());
    model.attachments.prompt = Some(name);
    Ok(())
}

/// Marks every bias vector of the base model trainable.
pub fn bitfit_attach(model: &mut Transformer) {
    model.attachments.bitfit = true;
    let owned = model.attachments.owned.clone();
    for p in model.params_mut().iter_mut() {
        if p.is_bias() && !owned.contains(&p.name) {
            p.trainable = true;
        }
    }
}

fn merged_weight(site: Site, hook: HookPoint) -> Option<String> {
    let proj = match hook {
        HookPoint::AttnQueryProj => "q.weight",
        HookPoint::AttnValueProj => "v.weight",
        HookPoint::FfnWeight1 => "fc1.weight",
        HookPoint::FfnWeight2 => "fc2.weight",
        _ => return None,
    };
    Some(format!("{site}.{proj}"))
}

/// Folds every weight-level LoRA modification into its base weight,
/// `W ← W + s·W_down·W_up`, and detaches it.
pub fn merge_lora(model: &Transformer) -> Result<Transformer> {
    let mut out = model.clone();
    let keys: Vec<(Site, HookPoint)> = out
        .attachments
        .deltas
        .iter()
        .filter(|((site, hook), d)| {
            out.attachments.specs[d.spec].functional_form == FunctionalForm::LinearBottleneck
                && merged_weight(*site, *hook).is_some()
        })
        .map(|(k, _)| *k)
        .collect();
    for (site, hook) in keys {
        let delta = out.attachments.deltas.remove(&(site, hook)).expect("listed above");
        let spec = &out.attachments.specs[delta.spec];
        if spec.insertion_form != InsertionForm::Parallel {
            return Err(Error::Config(format!("{} reads the projection output and cannot be merged", spec.label())));
        }
        let s = match (&delta.scale, spec.composition) {
            (Some(name), _) => out.params().by_name(name)?.value.item(),
            (None, Composition::ScaledAdd(s)) => s,
            (None, _) => 1.0,
        };
        let SiteParams::Bottleneck { down, up } = &delta.params else {
            return Err(Error::Contract("LoRA without projection pair".into()));
        };
        let dw = out
            .params()
            .by_name(down)?
            .value
            .matmul(&out.params().by_name(up)?.value)?
            .scale(s);
        let w_name = merged_weight(site, hook).expect("filtered above");
        let id = out.params().id(&w_name)?;
        let merged = out.params().get(id).value.add(&dw)?;
        out.params_mut().set(id, merged)?;
        let mut names = vec![down.clone(), up.clone()];
        names.extend(delta.scale.clone());
        for n in names {
            out.params_mut().remove(&n)?;
            out.attachments.owned.remove(&n);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Transformer};
    use crate::peft::design::SiteFilter;
    use crate::peft::InitScheme;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (Transformer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Transformer::new(ModelConfig::desk(), &mut rng).unwrap();
        (m, rng)
    }

    const SRC: [usize; 5] = [3, 1, 4, 1, 5];
    const TGT: [usize; 4] = [0, 3, 1, 4];

    #[test]
    fn empty_attachment_is_bit_identical() {
        let (mut m, mut rng) = model();
        let base = m.logits(&SRC, &TGT).unwrap();
        attach_specs(&mut m, &[], &mut rng).unwrap();
        assert_eq!(m.logits(&SRC, &TGT).unwrap(), base);
    }

    #[test]
    fn duplicate_attachment_is_a_config_error() {
        let (mut m, mut rng) = model();
        let spec = DesignSpec::parallel_adapter(HookPoint::FfnSublayerOutput, 2);
        let err = attach_specs(&mut m, &[spec.clone(), spec.clone()], &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(m.attachments().is_empty());
        assert_eq!(m.params().trainable_numel(), 0);
        attach_specs(&mut m, std::slice::from_ref(&spec), &mut rng).unwrap();
        assert!(matches!(attach_specs(&mut m, &[spec], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_gated_pairing_is_a_config_error() {
        let (mut m, mut rng) = model();
        let bad = DesignSpec::new(
            FunctionalForm::ReluBottleneck,
            InsertionForm::Parallel,
            HookPoint::FfnSublayerOutput,
            Composition::GatedAdd,
            2,
        );
        assert!(matches!(attach_specs(&mut m, &[bad], &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_up_projection_is_identity_at_every_hook() {
        let specs = [
            DesignSpec::sequential_adapter(HookPoint::AttnSublayerOutput, 3),
            DesignSpec::sequential_adapter(HookPoint::FfnSublayerOutput, 3),
            DesignSpec::parallel_adapter(HookPoint::AttnSublayerOutput, 3),
            DesignSpec::parallel_adapter(HookPoint::FfnSublayerOutput, 3),
            DesignSpec::scaled_parallel_adapter(HookPoint::FfnSublayerOutput, 3, 4.0),
            DesignSpec::multihead_parallel_adapter(3),
            DesignSpec::lora(HookPoint::AttnQueryProj, 2, 2.0),
            DesignSpec::lora(HookPoint::AttnValueProj, 2, 2.0),
            DesignSpec::lora(HookPoint::FfnWeight1, 2, 2.0),
            DesignSpec::lora(HookPoint::FfnWeight2, 2, 2.0),
        ];
        for spec in specs {
            let (mut m, mut rng) = model();
            let base = m.logits(&SRC, &TGT).unwrap();
            let mut p = PeftParams::init(&spec, m.config(), &mut rng).unwrap();
            p.zero_up();
            attach_modifications(&mut m, vec![(spec.clone(), p)]).unwrap();
            assert_eq!(m.logits(&SRC, &TGT).unwrap(), base, "{spec}");
        }
    }

    #[test]
    fn nonzero_adapter_changes_output() {
        let (mut m, mut rng) = model();
        let base = m.logits(&SRC, &TGT).unwrap();
        let spec = DesignSpec::parallel_adapter(HookPoint::FfnSublayerOutput, 3).with_init(InitScheme::Normal { std: 0.5 });
        attach_specs(&mut m, &[spec], &mut rng).unwrap();
        assert_ne!(m.logits(&SRC, &TGT).unwrap(), base);
    }

    #[test]
    fn lora_merge_reproduces_attached_outputs() {
        let (mut m, mut rng) = model();
        m.randomize_biases(0.1, &mut rng);
        let specs: Vec<DesignSpec> = [HookPoint::AttnQueryProj, HookPoint::AttnValueProj, HookPoint::FfnWeight1, HookPoint::FfnWeight2]
            .into_iter()
            .map(|h| DesignSpec::lora(h, 2, 2.0).with_init(InitScheme::Normal { std: 0.3 }))
            .collect();
        attach_specs(&mut m, &specs, &mut rng).unwrap();
        let attached = m.logits(&SRC, &TGT).unwrap();
        let merged = merge_lora(&m).unwrap();
        assert!(merged.attachments().modified().next().is_none());
        assert_eq!(merged.params().total_numel(), merged.base_numel());
        let out = merged.logits(&SRC, &TGT).unwrap();
        assert!(out.max_abs_diff(&attached) <= 1e-10);
    }

    #[test]
    fn bitfit_marks_only_biases_and_keeps_outputs() {
        let (mut m, _) = model();
        let base = m.logits(&SRC, &TGT).unwrap();
        bitfit_attach(&mut m);
        let bias_total: usize = m.params().iter().filter(|(_, p)| p.is_bias()).map(|(_, p)| p.numel()).sum();
        assert_eq!(m.params().trainable_numel(), bias_total);
        assert!(m.params().iter().all(|(_, p)| p.trainable == p.is_bias()));
        assert_eq!(m.logits(&SRC, &TGT).unwrap(), base);
    }

    #[test]
    fn prompt_lengthens_encoder_input() {
        let (mut m, mut rng) = model();
        attach_prompt(&mut m, 3, &mut rng).unwrap();
        assert_eq!(m.params().trainable_numel(), 3 * 32);
        let (_, trace) = m.trace(&SRC, &TGT).unwrap();
        let input = trace.find(None, HookPoint::InputEmbedding).next().unwrap();
        assert_eq!(input.value.shape(), &[3 + SRC.len(), 32]);
        let (mut one, mut rng) = model();
        attach_prompt(&mut one, 1, &mut rng).unwrap();
        assert_eq!(one.params().trainable_numel(), 32);
        assert!(attach_prompt(&mut one, 1, &mut rng).is_err());
    }

    #[test]
    fn site_filter_limits_attachment() {
        let (mut m, mut rng) = model();
        let spec = DesignSpec::parallel_adapter(HookPoint::FfnSublayerOutput, 2)
            .with_sites(SiteFilter::Stack(crate::model::Stack::Encoder));
        attach_specs(&mut m, &[spec], &mut rng).unwrap();
        assert_eq!(m.attachments().modified().count(), 2);
    }

    #[test]
    fn shape_only_attachment_registers_shapes() {
        let mut m = Transformer::shape_only(ModelConfig::desk()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        attach_specs(&mut m, &[DesignSpec::prefix(4)], &mut rng).unwrap();
        assert_eq!(m.params().trainable_numel(), 2 * 4 * 32 * 6);
    }
}
