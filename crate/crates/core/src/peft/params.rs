use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Site};
use crate::tensor::Tensor;

use super::design::{DesignSpec, FunctionalForm, InitScheme, PrefixReparam};

/// Down/up projection pair. Serves adapters (ReLU form) and LoRA (linear
/// form) alike; the owning [`DesignSpec`] decides the nonlinearity and the
/// composition.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `d_in × r`
    pub down: Tensor,
    /// `r × d_out`
    pub up: Tensor,
}

impl AdapterParams {
    pub fn bottleneck(&self) -> usize {
        self.down.cols()
    }

    pub fn numel(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    pub fn init<R: Rng + ?Sized>(d_in: usize, r: usize, d_out: usize, init: InitScheme, rng: &mut R) -> Self {
        match init {
            InitScheme::LoraUniform => Self {
                down: Tensor::uniform(&[d_in, r], 1.0 / (d_in as f64).sqrt(), rng),
                up: Tensor::zeros(&[r, d_out]),
            },
            InitScheme::Normal { std } => Self {
                down: Tensor::randn(&[d_in, r], std, rng),
                up: Tensor::randn(&[r, d_out], std, rng),
            },
            InitScheme::NormalZeroUp { std } => Self {
                down: Tensor::randn(&[d_in, r], std, rng),
                up: Tensor::zeros(&[r, d_out]),
            },
        }
    }
}

/// Prefix keys and values, `l × d` each (split per head column-wise).
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixParams {
    pub key: Tensor,
    pub value: Tensor,
}

impl PrefixParams {
    pub fn len(&self) -> usize {
        self.key.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.key.rows() == 0
    }
}

/// MLP producing the prefixes of every site from a small embedding:
/// `tanh(E·W_1 + b_1)·W_2 + b_2`, output columns laid out as
/// `[site0 keys | site0 values | site1 keys | ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixMlp {
    /// `l × embed_dim`
    pub embedding: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
}

impl PrefixMlp {
    pub fn numel(&self) -> usize {
        self.embedding.numel() + self.w_1.numel() + self.b_1.numel() + self.w_2.numel() + self.b_2.numel()
    }
}

/// Prompt vectors prepended to the encoder input, `l × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams {
    pub embeddings: Tensor,
}

impl PromptParams {
    pub fn init<R: Rng + ?Sized>(l: usize, d: usize, std: f64, rng: &mut R) -> Result<Self> {
        if l == 0 {
            return Err(Error::Contract("prompt length must be at least 1".into()));
        }
        Ok(Self {
            embeddings: Tensor::randn(&[l, d], std, rng),
        })
    }
}

/// Trainable tensors of one [`DesignSpec`], per site.
#[derive(Clone, Debug, PartialEq)]
pub enum PeftParams {
    /// One projection pair per site.
    Bottleneck(Vec<(Site, AdapterParams)>),
    /// One projection pair per head per site.
    MultiHead(Vec<(Site, Vec<AdapterParams>)>),
    /// Stored prefixes per site.
    Prefix(Vec<(Site, PrefixParams)>),
    /// Prefixes generated by one MLP shared across `sites`.
    PrefixReparam { mlp: PrefixMlp, sites: Vec<Site> },
}

impl PeftParams {
    /// Fresh parameters for `spec` on `config`, initialized per the spec's
    /// (or its default) init scheme.
    pub fn init<R: Rng + ?Sized>(spec: &DesignSpec, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let sites = spec.target_sites(config);
        let init = spec.init.unwrap_or_else(|| spec.default_init());
        let r = spec.bottleneck;
        let (d_in, d_out) = spec.widths(config);
        let d = config.d_model;
        Ok(match spec.functional_form {
            FunctionalForm::SoftmaxBottleneck => match spec.reparam {
                Some(PrefixReparam { embed_dim, hidden }) => {
                    let out = sites.len() * 2 * d;
                    PeftParams::PrefixReparam {
                        mlp: PrefixMlp {
                            embedding: Tensor::randn(&[r, embed_dim], 1.0, rng),
                            w_1: Tensor::randn(&[embed_dim, hidden], 1.0 / (embed_dim as f64).sqrt(), rng),
                            b_1: Tensor::zeros(&[hidden]),
                            w_2: Tensor::randn(&[hidden, out], 0.01, rng),
                            b_2: Tensor::zeros(&[out]),
                        },
                        sites,
                    }
                }
                None => PeftParams::Prefix(
                    sites
                        .into_iter()
                        .map(|s| {
                            let (std, zero_v) = match init {
                                InitScheme::Normal { std } => (std, false),
                                InitScheme::NormalZeroUp { std } => (std, true),
                                InitScheme::LoraUniform => (0.01, true),
                            };
                            let key = Tensor::randn(&[r, d], std, rng);
                            let value = if zero_v {
                                Tensor::zeros(&[r, d])
                            } else {
                                Tensor::randn(&[r, d], std, rng)
                            };
                            (s, PrefixParams { key, value })
                        })
                        .collect(),
                ),
            },
            _ if spec.modified_representation == crate::model::HookPoint::HeadAttnOutput => {
                PeftParams::MultiHead(
                    sites
                        .into_iter()
                        .map(|s| {
                            let heads = (0..config.heads)
                                .map(|_| AdapterParams::init(d_in, r, d_out, init, rng))
                                .collect();
                            (s, heads)
                        })
                        .collect(),
                )
            }
            _ => PeftParams::Bottleneck(
                sites
                    .into_iter()
                    .map(|s| (s, AdapterParams::init(d_in, r, d_out, init, rng)))
                    .collect(),
            ),
        })
    }

    pub fn numel(&self) -> usize {
        match self {
            PeftParams::Bottleneck(v) => v.iter().map(|(_, p)| p.numel()).sum(),
            PeftParams::MultiHead(v) => v
                .iter()
                .map(|(_, hs)| hs.iter().map(AdapterParams::numel).sum::<usize>())
                .sum(),
            PeftParams::Prefix(v) => v.iter().map(|(_, p)| p.key.numel() + p.value.numel()).sum(),
            PeftParams::PrefixReparam { mlp, .. } => mlp.numel(),
        }
    }

    pub fn sites(&self) -> Vec<Site> {
        match self {
            PeftParams::Bottleneck(v) => v.iter().map(|(s, _)| *s).collect(),
            PeftParams::MultiHead(v) => v.iter().map(|(s, _)| *s).collect(),
            PeftParams::Prefix(v) => v.iter().map(|(s, _)| *s).collect(),
            PeftParams::PrefixReparam { sites, .. } => sites.clone(),
        }
    }

    /// Zeroes every up-projection (or prefix value).
    pub fn zero_up(&mut self) {
        match self {
            PeftParams::Bottleneck(v) => v.iter_mut().for_each(|(_, p)| p.up = Tensor::zeros(p.up.shape())),
            PeftParams::MultiHead(v) => v
                .iter_mut()
                .flat_map(|(_, hs)| hs.iter_mut())
                .for_each(|p| p.up = Tensor::zeros(p.up.shape())),
            PeftParams::Prefix(v) => v
                .iter_mut()
                .for_each(|(_, p)| p.value = Tensor::zeros(p.value.shape())),
            PeftParams::PrefixReparam { mlp, .. } => {
                mlp.w_2 = Tensor::zeros(mlp.w_2.shape());
                mlp.b_2 = Tensor::zeros(mlp.b_2.shape());
            }
        }
    }
}
