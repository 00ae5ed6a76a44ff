use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookPoint, ModelConfig, Transformer};

use super::attach::{attach_prompt, attach_specs, bitfit_attach};
use super::design::DesignSpec;
use super::params::PeftParams;

/// Default `s` of the scaled parallel adapter.
pub const DEFAULT_SCALE: f64 = 4.0;

/// Sublayer family an adapter is placed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Attn,
    Ffn,
}

impl Placement {
    pub fn hook(self) -> HookPoint {
        match self {
            Placement::Attn => HookPoint::AttnSublayerOutput,
            Placement::Ffn => HookPoint::FfnSublayerOutput,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::Attn => "attn",
            Placement::Ffn => "ffn",
        }
    }
}

/// Named fine-tuning methods, each expanding to design specs (or to a
/// model-wide change for prompts, BitFit and full fine-tuning).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Full,
    BitFit,
    Prompt { l: usize },
    Prefix { l: usize },
    SequentialAdapter { at: Placement, r: usize },
    ParallelAdapter { at: Placement, r: usize },
    ScaledParallelAdapter { at: Placement, r: usize, s: f64 },
    MultiHeadParallelAdapter { r: usize },
    LoraAttn { r: usize, s: f64 },
    LoraFfn { r: usize, s: f64 },
    Mam { l: usize, r: usize, s: f64 },
}

impl Method {
    /// Method name as used in configs and CSV output.
    pub fn name(&self) -> String {
        match self {
            Method::Full => "full".into(),
            Method::BitFit => "bitfit".into(),
            Method::Prompt { .. } => "prompt".into(),
            Method::Prefix { .. } => "prefix".into(),
            Method::SequentialAdapter { at, .. } => format!("sa_{}", at.name()),
            Method::ParallelAdapter { at, .. } => format!("pa_{}", at.name()),
            Method::ScaledParallelAdapter { at, .. } => format!("scaled_pa_{}", at.name()),
            Method::MultiHeadParallelAdapter { .. } => "mh_pa".into(),
            Method::LoraAttn { .. } => "lora_attn".into(),
            Method::LoraFfn { .. } => "lora_ffn".into(),
            Method::Mam { .. } => "mam".into(),
        }
    }

    /// Builds a method from its name and bottleneck. `l` is only read by
    /// `mam`, which takes `bottleneck` as `r`; `s` defaults to
    /// [`DEFAULT_SCALE`] for scaled adapters and to 1 for LoRA.
    pub fn parse(name: &str, bottleneck: usize, l: Option<usize>, s: Option<f64>) -> Result<Self> {
        let b = bottleneck;
        let placement = |suffix: &str| match suffix {
            "attn" => Ok(Placement::Attn),
            "ffn" => Ok(Placement::Ffn),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        };
        Ok(match name {
            "full" => Method::Full,
            "bitfit" => Method::BitFit,
            "prompt" => Method::Prompt { l: b },
            "prefix" => Method::Prefix { l: b },
            "mh_pa" => Method::MultiHeadParallelAdapter { r: b },
            "lora_attn" | "lora" => Method::LoraAttn { r: b, s: s.unwrap_or(1.0) },
            "lora_ffn" => Method::LoraFfn { r: b, s: s.unwrap_or(1.0) },
            "mam" => Method::Mam {
                l: l.ok_or_else(|| Error::Config("mam needs a prefix length `l`".into()))?,
                r: b,
                s: s.unwrap_or(DEFAULT_SCALE),
            },
            _ => {
                if let Some(p) = name.strip_prefix("scaled_pa_") {
                    Method::ScaledParallelAdapter {
                        at: placement(p)?,
                        r: b,
                        s: s.unwrap_or(DEFAULT_SCALE),
                    }
                } else if let Some(p) = name.strip_prefix("sa_") {
                    Method::SequentialAdapter { at: placement(p)?, r: b }
                } else if let Some(p) = name.strip_prefix("pa_") {
                    Method::ParallelAdapter { at: placement(p)?, r: b }
                } else {
                    return Err(Error::Config(format!("unknown method `{name}`")));
                }
            }
        })
    }

    /// Bottleneck (`r`, or `l` for prefix and prompt); 0 when undefined.
    pub fn bottleneck(&self) -> usize {
        match *self {
            Method::Full | Method::BitFit => 0,
            Method::Prompt { l } | Method::Prefix { l } => l,
            Method::SequentialAdapter { r, .. }
            | Method::ParallelAdapter { r, .. }
            | Method::ScaledParallelAdapter { r, .. }
            | Method::MultiHeadParallelAdapter { r }
            | Method::LoraAttn { r, .. }
            | Method::LoraFfn { r, .. }
            | Method::Mam { r, .. } => r,
        }
    }

    /// Design specs attached by this method.
    pub fn specs(&self) -> Vec<DesignSpec> {
        match *self {
            Method::Full | Method::BitFit | Method::Prompt { .. } => vec![],
            Method::Prefix { l } => vec![DesignSpec::prefix(l)],
            Method::SequentialAdapter { at, r } => vec![DesignSpec::sequential_adapter(at.hook(), r)],
            Method::ParallelAdapter { at, r } => vec![DesignSpec::parallel_adapter(at.hook(), r)],
            Method::ScaledParallelAdapter { at, r, s } => {
                vec![DesignSpec::scaled_parallel_adapter(at.hook(), r, s)]
            }
            Method::MultiHeadParallelAdapter { r } => vec![DesignSpec::multihead_parallel_adapter(r)],
            Method::LoraAttn { r, s } => vec![
                DesignSpec::lora(HookPoint::AttnQueryProj, r, s),
                DesignSpec::lora(HookPoint::AttnValueProj, r, s),
            ],
            Method::LoraFfn { r, s } => vec![
                DesignSpec::lora(HookPoint::FfnWeight1, r, s),
                DesignSpec::lora(HookPoint::FfnWeight2, r, s),
            ],
            Method::Mam { l, r, s } => mam_specs(l, r, s),
        }
    }

    /// Attaches the method to `model`.
    pub fn attach<R: Rng + ?Sized>(&self, model: &mut Transformer, rng: &mut R) -> Result<()> {
        match *self {
            Method::Full => Ok(()),
            Method::BitFit => {
                bitfit_attach(model);
                Ok(())
            }
            Method::Prompt { l } => attach_prompt(model, l, rng),
            _ => attach_specs(model, &self.specs(), rng),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Method::Full | Method::BitFit => f.write_str(&self.name()),
            Method::Mam { l, r, .. } => write!(f, "mam(l={l},r={r})"),
            _ => write!(f, "{}({})", self.name(), self.bottleneck()),
        }
    }
}

/// Prefix tuning at every attention sublayer plus a scaled parallel adapter
/// at every FFN sublayer.
pub fn mam_specs(l: usize, r: usize, s: f64) -> Vec<DesignSpec> {
    vec![
        DesignSpec::prefix(l),
        DesignSpec::scaled_parallel_adapter(HookPoint::FfnSublayerOutput, r, s),
    ]
}

/// MAM specs with fresh parameters, `s` = [`DEFAULT_SCALE`].
pub fn build_mam<R: Rng + ?Sized>(
    config: &ModelConfig,
    l: usize,
    r: usize,
    rng: &mut R,
) -> Result<Vec<(DesignSpec, PeftParams)>> {
    if l == 0 {
        return Err(Error::Contract("prefix length must be at least 1".into()));
    }
    if r == 0 {
        return Err(Error::Contract("bottleneck must be at least 1".into()));
    }
    mam_specs(l, r, DEFAULT_SCALE)
        .into_iter()
        .map(|spec| {
            let p = PeftParams::init(&spec, config, rng)?;
            Ok((spec, p))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::attach::attach_modifications;
    use crate::peft::Composition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_round_trip() {
        let all = [
            Method::Full,
            Method::BitFit,
            Method::Prompt { l: 3 },
            Method::Prefix { l: 3 },
            Method::SequentialAdapter { at: Placement::Ffn, r: 3 },
            Method::ParallelAdapter { at: Placement::Attn, r: 3 },
            Method::ScaledParallelAdapter { at: Placement::Ffn, r: 3, s: DEFAULT_SCALE },
            Method::MultiHeadParallelAdapter { r: 3 },
            Method::LoraAttn { r: 3, s: 1.0 },
            Method::LoraFfn { r: 3, s: 1.0 },
        ];
        for m in all {
            let b = if m.bottleneck() == 0 { 1 } else { m.bottleneck() };
            let back = Method::parse(&m.name(), b, None, None).unwrap();
            assert_eq!(back.name(), m.name());
        }
        assert!(Method::parse("nope", 1, None, None).is_err());
        assert!(Method::parse("mam", 16, None, None).is_err());
    }

    #[test]
    fn mam_uses_prefix_and_scaled_ffn_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::desk();
        let mods = build_mam(&cfg, 4, 16, &mut rng).unwrap();
        assert!(mods[0].0.is_prefix());
        assert_eq!(mods[1].0.composition, Composition::ScaledAdd(4.0));
        assert_eq!(mods[1].0.modified_representation, HookPoint::FfnSublayerOutput);
        let mut m = Transformer::new(cfg, &mut rng).unwrap();
        attach_modifications(&mut m, mods).unwrap();
        let (d, n_attn, n_ffn, l) = (32, 3, 2, 2);
        assert_eq!(m.params().trainable_numel(), 2 * 4 * d * n_attn * l + 2 * 16 * d * n_ffn * l);
        assert!(build_mam(m.config(), 0, 16, &mut rng).is_err());
    }
}
