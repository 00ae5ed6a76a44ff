use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    SelfAttn,
    CrossAttn,
    Ffn,
}

impl SublayerKind {
    pub fn is_attention(self) -> bool {
        !matches!(self, SublayerKind::Ffn)
    }
}

/// One sublayer of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub stack: Stack,
    pub layer: usize,
    pub kind: SublayerKind,
}

impl Site {
    pub fn new(stack: Stack, layer: usize, kind: SublayerKind) -> Self {
        Self { stack, layer, kind }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stack = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        let kind = match self.kind {
            SublayerKind::SelfAttn => "self_attn",
            SublayerKind::CrossAttn => "cross_attn",
            SublayerKind::Ffn => "ffn",
        };
        write!(f, "{stack}.{}.{kind}", self.layer)
    }
}

/// Representations a modification can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookPoint {
    InputEmbedding,
    AttnQueryProj,
    AttnValueProj,
    HeadAttnOutput,
    AttnSublayerOutput,
    FfnWeight1,
    FfnWeight2,
    FfnSublayerOutput,
    BiasTerms,
}

impl HookPoint {
    pub const ALL: [HookPoint; 9] = [
        HookPoint::InputEmbedding,
        HookPoint::AttnQueryProj,
        HookPoint::AttnValueProj,
        HookPoint::HeadAttnOutput,
        HookPoint::AttnSublayerOutput,
        HookPoint::FfnWeight1,
        HookPoint::FfnWeight2,
        HookPoint::FfnSublayerOutput,
        HookPoint::BiasTerms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HookPoint::InputEmbedding => "input_embedding",
            HookPoint::AttnQueryProj => "attn_query_proj",
            HookPoint::AttnValueProj => "attn_value_proj",
            HookPoint::HeadAttnOutput => "head_attn_output",
            HookPoint::AttnSublayerOutput => "attn_sublayer_output",
            HookPoint::FfnWeight1 => "ffn_weight_1",
            HookPoint::FfnWeight2 => "ffn_weight_2",
            HookPoint::FfnSublayerOutput => "ffn_sublayer_output",
            HookPoint::BiasTerms => "bias_terms",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == s)
    }

    /// Whether the hook lives in attention sublayers (`Some(true)`), FFN
    /// sublayers (`Some(false)`), or is model-wide (`None`).
    pub fn on_attention(self) -> Option<bool> {
        match self {
            HookPoint::AttnQueryProj
            | HookPoint::AttnValueProj
            | HookPoint::HeadAttnOutput
            | HookPoint::AttnSublayerOutput => Some(true),
            HookPoint::FfnWeight1 | HookPoint::FfnWeight2 | HookPoint::FfnSublayerOutput => Some(false),
            HookPoint::InputEmbedding | HookPoint::BiasTerms => None,
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All sublayers of a model in forward order.
pub fn sites(config: &ModelConfig) -> Vec<Site> {
    let mut out = Vec::new();
    for layer in 0..config.layers {
        out.push(Site::new(Stack::Encoder, layer, SublayerKind::SelfAttn));
        out.push(Site::new(Stack::Encoder, layer, SublayerKind::Ffn));
    }
    if config.is_encoder_decoder() {
        for layer in 0..config.layers {
            out.push(Site::new(Stack::Decoder, layer, SublayerKind::SelfAttn));
            out.push(Site::new(Stack::Decoder, layer, SublayerKind::CrossAttn));
            out.push(Site::new(Stack::Decoder, layer, SublayerKind::Ffn));
        }
    }
    out
}

/// One observed tensor.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub site: Option<Site>,
    pub hook: HookPoint,
    pub head: Option<usize>,
    pub value: Tensor,
}

/// Tensors observed at hook points during a traced forward pass.
#[derive(Clone, Debug, Default)]
pub struct SublayerTrace {
    pub entries: Vec<TraceEntry>,
}

impl SublayerTrace {
    pub fn find(&self, site: Option<Site>, hook: HookPoint) -> impl Iterator<Item = &TraceEntry> {
        self.entries
            .iter()
            .filter(move |e| e.site == site && e.hook == hook)
    }

    pub fn count(&self, hook: HookPoint) -> usize {
        self.entries.iter().filter(|e| e.hook == hook).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hook_names_round_trip() {
        for h in HookPoint::ALL {
            assert_eq!(HookPoint::parse(h.name()), Some(h));
        }
        assert_eq!(HookPoint::parse("nope"), None);
    }

    #[test]
    fn desk_model_has_3l_attention_and_2l_ffn_sites() {
        let cfg = ModelConfig::desk();
        let s = sites(&cfg);
        let attn = s.iter().filter(|s| s.kind.is_attention()).count();
        assert_eq!(attn, 3 * cfg.layers);
        assert_eq!(s.len() - attn, 2 * cfg.layers);
    }
}
