//! TOML experiment and grid files.

use std::path::PathBuf;

use serde::Deserialize;

use super::grid::{prebuilt_grid, GridSpec, Template};
use super::{Experiment, Tuning};
use crate::accounting::{count_method, count_total, BudgetReport};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, Positions};
use crate::peft::{DesignSpec, Method};
use crate::task::TaskSpec;
use crate::train::TrainConfig;

/// `[model]`: a preset plus field overrides.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `desk` (default), `bart_large` or `roberta_base`.
    pub preset: Option<String>,
    pub layers: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    /// Defaults to the task vocabulary for the desk preset.
    pub vocab: Option<usize>,
    pub architecture: Option<Architecture>,
    pub positions: Option<Positions>,
    pub tie_embeddings: Option<bool>,
    pub attn_bias: Option<bool>,
    pub ln_eps: Option<f64>,
    pub init_std: Option<f64>,
}

impl ModelSection {
    pub fn build(&self, task: &TaskSpec) -> Result<ModelConfig> {
        let preset = self.preset.as_deref().unwrap_or("desk");
        let mut c = match preset {
            "desk" => ModelConfig {
                vocab: task.vocab,
                ..ModelConfig::desk()
            },
            "bart_large" => ModelConfig::bart_large(),
            "roberta_base" => ModelConfig::roberta_base(),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset `{other}` (desk, bart_large or roberta_base)"
                )))
            }
        };
        macro_rules! over {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        over!(layers, d_model, heads, d_ff, vocab, architecture, positions, tie_embeddings, attn_bias, ln_eps, init_std);
        c.validate()?;
        Ok(c)
    }
}

/// `[method]`: a named method.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,
    #[serde(default)]
    pub bottleneck: usize,
    pub l: Option<usize>,
    pub s: Option<f64>,
}

impl MethodSection {
    pub fn method(&self) -> Result<Method> {
        Method::parse(&self.name, self.bottleneck, self.l, self.s)
    }
}

/// One experiment: model, task, training settings and either `[method]` or
/// `[[peft]]` specs.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub name: Option<String>,
    #[serde(default)]
    pub model_seed: u64,
    /// Where `train` saves the final parameters.
    pub checkpoint: Option<PathBuf>,
    /// Where `train` writes the run's CSV row and curve.
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    pub task: Option<TaskSpec>,
    pub train: Option<toml::Table>,
    pub method: Option<MethodSection>,
    #[serde(default)]
    pub peft: Vec<DesignSpec>,
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

/// Training settings, with `None` for the learning rate when unset.
fn train_config(table: Option<&toml::Table>) -> Result<(TrainConfig, Option<f64>)> {
    let Some(t) = table else {
        return Ok((TrainConfig::default(), None));
    };
    let cfg: TrainConfig = toml::Value::Table(t.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse(format!("[train]: {e}")))?;
    let lr = t.contains_key("learning_rate").then_some(cfg.learning_rate);
    Ok((cfg, lr))
}

pub fn parse_experiment(text: &str) -> Result<ExperimentFile> {
    let f: ExperimentFile = parse_toml(text)?;
    if f.method.is_some() && !f.peft.is_empty() {
        return Err(Error::Config("use either [method] or [[peft]], not both".into()));
    }
    Ok(f)
}

impl ExperimentFile {
    pub fn task(&self) -> TaskSpec {
        self.task.clone().unwrap_or_else(TaskSpec::copy)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.build(&self.task())
    }

    /// The named method; `None` for raw `[[peft]]` specs.
    pub fn named_method(&self) -> Result<Option<Method>> {
        self.method.as_ref().map(MethodSection::method).transpose()
    }

    pub fn tuning(&self) -> Result<(Tuning, String)> {
        match (self.named_method()?, self.peft.is_empty()) {
            (Some(m), _) => Ok((Tuning::from_method(&m), m.to_string())),
            (None, false) => {
                let t = Tuning::Specs(self.peft.clone());
                let label = t.label();
                Ok((t, label))
            }
            (None, true) => Err(Error::Config("no [method] or [[peft]] section".into())),
        }
    }

    pub fn experiment(&self) -> Result<Experiment> {
        let (tuning, label) = self.tuning()?;
        let (mut train, lr) = train_config(self.train.as_ref())?;
        train.learning_rate = lr.unwrap_or_else(|| tuning.default_learning_rate());
        let exp = Experiment {
            label: self.name.clone().unwrap_or(label),
            model: self.model_config()?,
            model_seed: self.model_seed,
            task: self.task(),
            train,
            tuning,
        };
        exp.validate()?;
        Ok(exp)
    }

    /// Closed-form budget of the configured method on the configured model.
    pub fn budget(&self) -> Result<BudgetReport> {
        let config = self.model_config()?;
        match self.named_method()? {
            Some(m) => count_method(&config, &m),
            None if !self.peft.is_empty() => count_total(&config, &self.peft),
            None => Err(Error::Config("no [method] or [[peft]] section".into())),
        }
    }
}

/// A grid: optionally a prebuilt grid as the starting point, then overrides.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub name: Option<String>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub seeds_per_cell: Option<usize>,
    pub model_seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub bottlenecks: Option<Vec<usize>>,
    /// CSV destination; the CLI flag wins.
    pub output: Option<PathBuf>,
    pub model: Option<ModelSection>,
    pub task: Option<TaskSpec>,
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub templates: Vec<Template>,
}

pub fn parse_grid(text: &str) -> Result<GridFile> {
    parse_toml(text)
}

impl GridFile {
    pub fn grid(&self) -> Result<GridSpec> {
        let mut g = match &self.preset {
            Some(p) => prebuilt_grid(p)?,
            None => GridSpec::desk("grid"),
        };
        if let Some(n) = &self.name {
            g.name = n.clone();
        }
        if let Some(t) = &self.task {
            g.task = t.clone();
            g.model.vocab = g.model.vocab.max(t.vocab);
        }
        if let Some(m) = &self.model {
            g.model = m.build(&g.task)?;
        }
        if let Some(table) = &self.train {
            // Unset keys keep the grid's values rather than the global defaults.
            let mut merged = toml::Value::try_from(&g.train)
                .map_err(|e| Error::Parse(e.to_string()))?
                .as_table()
                .cloned()
                .unwrap_or_default();
            merged.extend(table.clone());
            g.train = train_config(Some(&merged))?.0;
            if table.contains_key("learning_rate") {
                g.learning_rate = Some(g.train.learning_rate);
            }
        }
        if let Some(lr) = self.learning_rate {
            g.learning_rate = Some(lr);
        }
        if let Some(s) = self.seed {
            g.seed = s;
        }
        if let Some(k) = self.seeds_per_cell {
            g.seeds_per_cell = k;
        }
        if let Some(s) = self.model_seed {
            g.model_seed = s;
        }
        if let Some(b) = &self.bottlenecks {
            g.bottlenecks = b.clone();
        }
        if !self.templates.is_empty() {
            g.templates = self.templates.clone();
        }
        g.experiments()?;
        Ok(g)
    }
}
