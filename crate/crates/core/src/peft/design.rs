use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookPoint, ModelConfig, Site, Stack, SublayerKind};

/// How Δh is computed from its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalForm {
    /// `relu(input·W_down)·W_up`
    ReluBottleneck,
    /// `softmax(x·W_q·P_kᵀ)·P_v`, the prefix form.
    SoftmaxBottleneck,
    /// `input·W_down·W_up`
    LinearBottleneck,
}

impl FunctionalForm {
    pub fn name(self) -> &'static str {
        match self {
            FunctionalForm::ReluBottleneck => "relu_bottleneck",
            FunctionalForm::SoftmaxBottleneck => "softmax_bottleneck",
            FunctionalForm::LinearBottleneck => "linear_bottleneck",
        }
    }
}

/// Where Δh takes its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionForm {
    /// From the modified representation `h` itself.
    Sequential,
    /// From the input `x` of the module that computes `h`.
    Parallel,
}

impl InsertionForm {
    pub fn name(self) -> &'static str {
        match self {
            InsertionForm::Sequential => "sequential",
            InsertionForm::Parallel => "parallel",
        }
    }
}

/// How Δh merges with `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// `h + Δh`
    Add,
    /// `h + s·Δh`
    ScaledAdd(f64),
    /// `(1-λ)·h + λ·Δh`
    GatedAdd,
}

impl Composition {
    pub fn name(self) -> &'static str {
        match self {
            Composition::Add => "add",
            Composition::ScaledAdd(_) => "scaled_add",
            Composition::GatedAdd => "gated_add",
        }
    }
}

/// Which sites of the model a spec applies to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteFilter {
    /// Every sublayer carrying the hook point.
    #[default]
    All,
    Stack(Stack),
    Kinds(Vec<SublayerKind>),
    Only(Vec<Site>),
}

impl SiteFilter {
    fn admits(&self, site: &Site) -> bool {
        match self {
            SiteFilter::All => true,
            SiteFilter::Stack(s) => site.stack == *s,
            SiteFilter::Kinds(k) => k.contains(&site.kind),
            SiteFilter::Only(list) => list.contains(site),
        }
    }
}

/// Weight initialization of an attached module.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Fan-in uniform `W_down` (bound `1/√fan_in`), zero `W_up`.
    LoraUniform,
    /// Both matrices (or both prefix tensors) `N(0, std²)`.
    Normal { std: f64 },
    /// `W_down ~ N(0, std²)`, zero `W_up` (or zero `P_v`).
    NormalZeroUp { std: f64 },
}

/// Small-MLP reparameterization of prefixes, shared across all sites of a
/// spec.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixReparam {
    pub embed_dim: usize,
    pub hidden: usize,
}

/// One point of the design space: fully determines one modification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub functional_form: FunctionalForm,
    pub insertion_form: InsertionForm,
    pub modified_representation: HookPoint,
    pub composition: Composition,
    /// `r` for bottlenecks, `l` for prefixes.
    pub bottleneck: usize,
    /// Learn the `s` of `ScaledAdd`, one scalar per site.
    #[serde(default)]
    pub trainable_scale: bool,
    #[serde(default)]
    pub init: Option<InitScheme>,
    #[serde(default)]
    pub reparam: Option<PrefixReparam>,
    #[serde(default)]
    pub sites: SiteFilter,
}

impl DesignSpec {
    pub fn new(
        functional_form: FunctionalForm,
        insertion_form: InsertionForm,
        modified_representation: HookPoint,
        composition: Composition,
        bottleneck: usize,
    ) -> Self {
        Self {
            functional_form,
            insertion_form,
            modified_representation,
            composition,
            bottleneck,
            trainable_scale: false,
            init: None,
            reparam: None,
            sites: SiteFilter::All,
        }
    }

    pub fn prefix(l: usize) -> Self {
        Self::new(
            FunctionalForm::SoftmaxBottleneck,
            InsertionForm::Parallel,
            HookPoint::HeadAttnOutput,
            Composition::GatedAdd,
            l,
        )
    }

    pub fn sequential_adapter(at: HookPoint, r: usize) -> Self {
        Self::new(FunctionalForm::ReluBottleneck, InsertionForm::Sequential, at, Composition::Add, r)
    }

    pub fn parallel_adapter(at: HookPoint, r: usize) -> Self {
        Self::new(FunctionalForm::ReluBottleneck, InsertionForm::Parallel, at, Composition::Add, r)
    }

    pub fn scaled_parallel_adapter(at: HookPoint, r: usize, s: f64) -> Self {
        Self::new(
            FunctionalForm::ReluBottleneck,
            InsertionForm::Parallel,
            at,
            Composition::ScaledAdd(s),
            r,
        )
    }

    pub fn multihead_parallel_adapter(r: usize) -> Self {
        Self::parallel_adapter(HookPoint::HeadAttnOutput, r)
    }

    /// LoRA on one projection weight.
    pub fn lora(target: HookPoint, r: usize, s: f64) -> Self {
        Self::new(
            FunctionalForm::LinearBottleneck,
            InsertionForm::Parallel,
            target,
            Composition::ScaledAdd(s),
            r,
        )
    }

    pub fn with_sites(mut self, sites: SiteFilter) -> Self {
        self.sites = sites;
        self
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = Some(init);
        self
    }

    pub fn is_prefix(&self) -> bool {
        self.functional_form == FunctionalForm::SoftmaxBottleneck
    }

    pub fn scale(&self) -> f64 {
        match self.composition {
            Composition::ScaledAdd(s) => s,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rep = self.modified_representation;
        if self.bottleneck == 0 {
            return Err(Error::Config("bottleneck dimension must be at least 1".into()));
        }
        if rep.on_attention().is_none() {
            return Err(Error::Config(format!(
                "`{rep}` is not a Δh site; use prompt tuning or BitFit attachment"
            )));
        }
        if self.composition == Composition::GatedAdd
            && !(self.is_prefix() && rep == HookPoint::HeadAttnOutput)
        {
            return Err(Error::Config(
                "gated_add requires softmax_bottleneck at head_attn_output".into(),
            ));
        }
        if self.is_prefix()
            && (rep != HookPoint::HeadAttnOutput || self.insertion_form != InsertionForm::Parallel)
        {
            return Err(Error::Config(
                "softmax_bottleneck is only defined as a parallel head_attn_output modification".into(),
            ));
        }
        if self.reparam.is_some() && !self.is_prefix() {
            return Err(Error::Config("reparameterization only applies to prefixes".into()));
        }
        if let Composition::ScaledAdd(s) = self.composition {
            if !s.is_finite() {
                return Err(Error::Config(format!("scale must be finite, got {s}")));
            }
            let weight_hook = matches!(
                rep,
                HookPoint::AttnQueryProj
                    | HookPoint::AttnValueProj
                    | HookPoint::FfnWeight1
                    | HookPoint::FfnWeight2
            );
            if self.functional_form == FunctionalForm::LinearBottleneck && weight_hook && s < 1.0 {
                return Err(Error::Config(format!("LoRA scale must be >= 1, got {s}")));
            }
        } else if self.trainable_scale {
            return Err(Error::Config("trainable_scale requires scaled_add".into()));
        }
        Ok(())
    }

    /// Sites of `config` this spec modifies.
    pub fn target_sites(&self, config: &ModelConfig) -> Vec<Site> {
        let on_attn = self.modified_representation.on_attention();
        crate::model::sites(config)
            .into_iter()
            .filter(|s| Some(s.kind.is_attention()) == on_attn)
            .filter(|s| self.sites.admits(s))
            .collect()
    }

    /// `(input width, output width)` of the Δh module at one site. For
    /// head-level modules these are per-head widths.
    pub fn widths(&self, config: &ModelConfig) -> (usize, usize) {
        let (d, dm, dh) = (config.d_model, config.d_ff, config.head_dim());
        let seq = self.insertion_form == InsertionForm::Sequential;
        match self.modified_representation {
            HookPoint::HeadAttnOutput => (dh, dh),
            HookPoint::FfnWeight1 => (if seq { dm } else { d }, dm),
            HookPoint::FfnWeight2 => (if seq { d } else { dm }, d),
            _ => (d, d),
        }
    }

    pub fn default_init(&self) -> InitScheme {
        match (self.functional_form, self.composition) {
            (FunctionalForm::LinearBottleneck, _) => InitScheme::LoraUniform,
            (FunctionalForm::ReluBottleneck, Composition::ScaledAdd(_)) => InitScheme::LoraUniform,
            _ => InitScheme::Normal { std: 0.01 },
        }
    }

    /// Short label, e.g. `PA(ffn_sublayer_output,r=16)`.
    pub fn label(&self) -> String {
        let name = match (self.functional_form, self.insertion_form, self.composition) {
            (FunctionalForm::SoftmaxBottleneck, _, Composition::GatedAdd) => "prefix",
            (FunctionalForm::SoftmaxBottleneck, _, _) => "prefix-ungated",
            (FunctionalForm::LinearBottleneck, _, _) => "lora",
            (FunctionalForm::ReluBottleneck, InsertionForm::Sequential, _) => "SA",
            (FunctionalForm::ReluBottleneck, InsertionForm::Parallel, Composition::ScaledAdd(_)) => {
                "scaled-PA"
            }
            (FunctionalForm::ReluBottleneck, InsertionForm::Parallel, _)
                if self.modified_representation == HookPoint::HeadAttnOutput =>
            {
                "MH-PA"
            }
            (FunctionalForm::ReluBottleneck, InsertionForm::Parallel, _) => "PA",
        };
        format!("{name}({},b={})", self.modified_representation, self.bottleneck)
    }
}

impl fmt::Display for DesignSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}
