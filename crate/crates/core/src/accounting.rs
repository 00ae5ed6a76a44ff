//! Tunable-parameter counts: closed formulas and audits of live models.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{HookPoint, ModelConfig, Transformer};
use crate::peft::{DesignSpec, FunctionalForm, Method};

/// Per-sublayer tunable counts `N_W`. `None` where the method adds nothing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SublayerCounts {
    pub attn: Option<usize>,
    pub ffn: Option<usize>,
    /// Parameters added once at the model input (prompt tuning).
    pub input: Option<usize>,
}

/// Closed-form per-sublayer counts of a named method.
pub fn count_per_sublayer(method: &Method, d: usize, d_m: usize) -> Result<SublayerCounts> {
    if matches!(method, Method::Full | Method::BitFit) {
        return Err(Error::Config(format!(
            "`{}` has no closed-form count; audit the model instead",
            method.name()
        )));
    }
    let b = method.bottleneck();
    if b == 0 {
        return Err(Error::Config("bottleneck must be at least 1".into()));
    }
    let mut c = SublayerCounts::default();
    match *method {
        Method::Prompt { l } => c.input = Some(l * d),
        Method::Prefix { l } => c.attn = Some(2 * l * d),
        Method::SequentialAdapter { at, r }
        | Method::ParallelAdapter { at, r }
        | Method::ScaledParallelAdapter { at, r, .. } => match at {
            crate::peft::Placement::Attn => c.attn = Some(2 * r * d),
            crate::peft::Placement::Ffn => c.ffn = Some(2 * r * d),
        },
        Method::MultiHeadParallelAdapter { r } => c.attn = Some(2 * r * d),
        Method::LoraAttn { r, .. } => c.attn = Some(2 * 2 * r * d),
        Method::LoraFfn { r, .. } => c.ffn = Some(2 * (r * d + r * d_m)),
        Method::Mam { l, r, .. } => {
            if l == 0 {
                return Err(Error::Config("prefix length must be at least 1".into()));
            }
            c.attn = Some(2 * l * d);
            c.ffn = Some(2 * r * d);
        }
        Method::Full | Method::BitFit => unreachable!("handled above"),
    }
    Ok(c)
}

/// Tunable parameters one spec adds at one of its sites.
pub fn count_spec_per_site(spec: &DesignSpec, config: &ModelConfig) -> usize {
    let r = spec.bottleneck;
    let base = match spec.functional_form {
        FunctionalForm::SoftmaxBottleneck => 2 * r * config.d_model,
        _ if spec.modified_representation == HookPoint::HeadAttnOutput => {
            let (d_in, d_out) = spec.widths(config);
            config.heads * r * (d_in + d_out)
        }
        _ => {
            let (d_in, d_out) = spec.widths(config);
            r * (d_in + d_out)
        }
    };
    base + usize::from(spec.trainable_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetReport {
    pub method: String,
    /// Per-sublayer `N_W` at attention and FFN sublayers.
    pub per_sublayer_attn: usize,
    pub per_sublayer_ffn: usize,
    pub attn_total: usize,
    pub ffn_total: usize,
    /// Prompt parameters at the input.
    pub input_total: usize,
    pub total: usize,
    pub base_total: usize,
    pub rel_percent: f64,
    /// Parameters of prefix-generating MLPs, which replace the stored
    /// prefixes during training and are not part of `total`.
    pub reparam_params: usize,
}

impl BudgetReport {
    /// Two-column text rendering.
    pub fn to_text(&self) -> String {
        let rows = [
            ("method", self.method.clone()),
            ("N_W attn", group(self.per_sublayer_attn)),
            ("N_W ffn", group(self.per_sublayer_ffn)),
            ("|theta| attn", group(self.attn_total)),
            ("|theta| ffn", group(self.ffn_total)),
            ("|theta| input", group(self.input_total)),
            ("|theta|", group(self.total)),
            ("base total", group(self.base_total)),
            ("relative", format!("{:.4}%", self.rel_percent)),
            ("reparam params", group(self.reparam_params)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<16}{v:>16}\n"));
        }
        out
    }

    pub const CSV_HEADER: &'static str =
        "method,n_w_attn,n_w_ffn,attn_total,ffn_total,input_total,total,base_total,rel_percent,reparam_params";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.per_sublayer_attn,
            self.per_sublayer_ffn,
            self.attn_total,
            self.ffn_total,
            self.input_total,
            self.total,
            self.base_total,
            self.rel_percent,
            self.reparam_params
        )
    }
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Thousands-separated integer.
pub fn group(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Parameters of the base model with `config`, from a shape-only build.
pub fn base_total(config: &ModelConfig) -> Result<usize> {
    Ok(Transformer::shape_only(config.clone())?.base_numel())
}

/// Sums the formula counts of `specs` over their sites. Encoder-decoder
/// models count one encoder plus one decoder block as one layer.
pub fn count_total(config: &ModelConfig, specs: &[DesignSpec]) -> Result<BudgetReport> {
    let mut report = BudgetReport {
        method: specs.iter().map(DesignSpec::label).collect::<Vec<_>>().join("+"),
        per_sublayer_attn: 0,
        per_sublayer_ffn: 0,
        attn_total: 0,
        ffn_total: 0,
        input_total: 0,
        total: 0,
        base_total: base_total(config)?,
        rel_percent: 0.0,
        reparam_params: 0,
    };
    for spec in specs {
        spec.validate()?;
        let n_w = count_spec_per_site(spec, config);
        let sites = spec.target_sites(config);
        let n = sites.len() * n_w;
        if spec.modified_representation.on_attention() == Some(true) {
            report.per_sublayer_attn += n_w;
            report.attn_total += n;
        } else {
            report.per_sublayer_ffn += n_w;
            report.ffn_total += n;
        }
        if let Some(rp) = spec.reparam {
            let width = sites.len() * 2 * config.d_model;
            report.reparam_params +=
                spec.bottleneck * rp.embed_dim + rp.embed_dim * rp.hidden + rp.hidden + rp.hidden * width + width;
        }
    }
    report.total = report.attn_total + report.ffn_total;
    report.rel_percent = relative_percentage(report.total, report.base_total)?;
    Ok(report)
}

/// [`count_total`] for a named method. Prompt tuning adds `l·d` at the
/// input; full fine-tuning and BitFit are audited on a shape-only model.
pub fn count_method(config: &ModelConfig, method: &Method) -> Result<BudgetReport> {
    let mut report = count_total(config, &method.specs())?;
    report.method = method.to_string();
    if let Method::Prompt { l } = method {
        if *l == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        report.input_total = l * config.d_model;
    }
    report.total = match method {
        Method::Full | Method::BitFit => audit_trainable(&shape_model(config, method)?),
        _ => report.attn_total + report.ffn_total + report.input_total,
    };
    report.rel_percent = relative_percentage(report.total, report.base_total)?;
    Ok(report)
}

/// Shape-only model of `config` with `method` attached.
pub fn shape_model(config: &ModelConfig, method: &Method) -> Result<Transformer> {
    let mut m = Transformer::shape_only(config.clone())?;
    method.attach(&mut m, &mut ChaCha8Rng::seed_from_u64(0))?;
    if matches!(method, Method::Full) {
        crate::train::freeze_base(&mut m, crate::train::TuningMode::Full);
    }
    Ok(m)
}

/// Sum of trainable tensor sizes in the live parameter set.
pub fn audit_trainable(model: &Transformer) -> usize {
    model.params().trainable_numel()
}

/// `100·tunable/base_total`.
pub fn relative_percentage(tunable: usize, base_total: usize) -> Result<f64> {
    if base_total == 0 {
        return Err(Error::Contract("base total must be positive".into()));
    }
    Ok(100.0 * tunable as f64 / base_total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::Placement;

    #[test]
    fn per_sublayer_examples() {
        let prefix = count_per_sublayer(&Method::Prefix { l: 200 }, 1024, 4096).unwrap();
        assert_eq!(prefix.attn, Some(409_600));
        let lora = count_per_sublayer(&Method::LoraFfn { r: 102, s: 1.0 }, 1024, 4096).unwrap();
        assert_eq!(lora.ffn, Some(1_044_480));
        assert_eq!(lora.ffn, Some(10 * 102 * 1024));
        let pa = count_per_sublayer(&Method::ParallelAdapter { at: Placement::Ffn, r: 1 }, 32, 128).unwrap();
        assert_eq!(pa.ffn, Some(64));
        assert!(count_per_sublayer(&Method::BitFit, 32, 128).is_err());
        assert!(count_per_sublayer(&Method::Prefix { l: 0 }, 32, 128).is_err());
    }

    #[test]
    fn bart_totals() {
        let cfg = ModelConfig::bart_large();
        let prefix = count_total(&cfg, &[DesignSpec::prefix(200)]).unwrap();
        assert_eq!(prefix.total, 14_745_600);
        let mam = count_method(&cfg, &Method::Mam { l: 30, r: 512, s: 4.0 }).unwrap();
        assert_eq!(mam.total, 27_377_664);
        assert_eq!(count_total(&cfg, &[]).unwrap().total, 0);
    }

    #[test]
    fn relative_percentage_edges() {
        assert_eq!(relative_percentage(50, 50).unwrap(), 100.0);
        assert_eq!(relative_percentage(0, 50).unwrap(), 0.0);
        assert!(relative_percentage(1, 0).is_err());
    }

    #[test]
    fn grouping() {
        assert_eq!(group(14_745_600), "14,745,600");
        assert_eq!(group(999), "999");
        assert_eq!(group(1000), "1,000");
    }
}
