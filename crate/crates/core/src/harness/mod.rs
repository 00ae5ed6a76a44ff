//! Experiments: attach, freeze, train, evaluate and record.

mod file;
mod grid;
mod output;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::accounting::{audit_trainable, relative_percentage};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, restore};
use crate::model::{ModelConfig, Transformer};
use crate::peft::{attach_prompt, attach_specs, bitfit_attach, DesignSpec, Method};
use crate::task::{gen_task, Dataset, TaskSpec};
use crate::train::{
    default_learning_rate, evaluate, freeze_base, method_learning_rate, train_loop, RunStatus, TrainConfig,
    TrainOutcome, TuningMode,
};

pub use file::{parse_experiment, parse_grid, ExperimentFile, GridFile, MethodSection, ModelSection};
pub use grid::{cell_seed, prebuilt_grid, run_grid, Cell, GridSpec, Template, PREBUILT_GRIDS};
pub use output::{emit_csv, emit_curves, write_csv, CSV_HEADER};

/// What a run fine-tunes.
#[derive(Clone, Debug, PartialEq)]
pub enum Tuning {
    /// Every base tensor, nothing attached.
    Full,
    BitFit,
    Prompt { l: usize },
    Specs(Vec<DesignSpec>),
}

impl Tuning {
    pub fn from_method(method: &Method) -> Self {
        match *method {
            Method::Full => Tuning::Full,
            Method::BitFit => Tuning::BitFit,
            Method::Prompt { l } => Tuning::Prompt { l },
            m => Tuning::Specs(m.specs()),
        }
    }

    pub fn specs(&self) -> &[DesignSpec] {
        match self {
            Tuning::Specs(s) => s,
            _ => &[],
        }
    }

    pub fn mode(&self) -> TuningMode {
        match self {
            Tuning::Full => TuningMode::Full,
            _ => TuningMode::Peft,
        }
    }

    pub fn default_learning_rate(&self) -> f64 {
        match self {
            Tuning::Full => method_learning_rate(&Method::Full),
            Tuning::BitFit => method_learning_rate(&Method::BitFit),
            Tuning::Prompt { l } => method_learning_rate(&Method::Prompt { l: *l }),
            Tuning::Specs(s) => default_learning_rate(s),
        }
    }

    /// Attaches to `model` and sets the trainable flags.
    pub fn apply(&self, model: &mut Transformer, rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            Tuning::Full => {}
            Tuning::BitFit => bitfit_attach(model),
            Tuning::Prompt { l } => attach_prompt(model, *l, rng)?,
            Tuning::Specs(specs) => attach_specs(model, specs, rng)?,
        }
        freeze_base(model, self.mode());
        Ok(())
    }

    /// Default label: the method name, or the spec labels joined by `+`.
    pub fn label(&self) -> String {
        match self {
            Tuning::Full => "full".into(),
            Tuning::BitFit => "bitfit".into(),
            Tuning::Prompt { l } => format!("prompt({l})"),
            Tuning::Specs(s) => s.iter().map(DesignSpec::label).collect::<Vec<_>>().join("+"),
        }
    }
}

/// One fully specified run. `train.seed` is the run seed: it drives
/// attachment initialization, batch order and dropout. The frozen base is
/// drawn from `model_seed`, so runs that differ only in the run seed share
/// the base model.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub label: String,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub tuning: Tuning,
}

const ATTACH_SALT: u64 = 0xa77a_c4ed;

pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Experiment {
    /// Experiment with the default training settings and learning rate of
    /// `method`.
    pub fn for_method(model: ModelConfig, task: TaskSpec, method: &Method) -> Self {
        let tuning = Tuning::from_method(method);
        let train = TrainConfig {
            learning_rate: method_learning_rate(method),
            ..TrainConfig::default()
        };
        Self {
            label: method.to_string(),
            model,
            model_seed: 0,
            task,
            train,
            tuning,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    /// Hex digest of everything but the run seed.
    pub fn config_hash(&self) -> String {
        let train = TrainConfig {
            seed: 0,
            ..self.train.clone()
        };
        let canonical = format!(
            "{:?}|{}|{:?}|{:?}|{:?}",
            self.model, self.model_seed, self.task, train, self.tuning
        );
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// Base model from `model_seed` with the tuning attached and frozen.
    pub fn build_model(&self) -> Result<Transformer> {
        let mut model = Transformer::new(self.model.clone(), &mut ChaCha8Rng::seed_from_u64(self.model_seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.train.seed, ATTACH_SALT));
        self.tuning.apply(&mut model, &mut rng)?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.task.vocab > self.model.vocab {
            return Err(Error::Config(format!(
                "task vocabulary {} exceeds model vocabulary {}",
                self.task.vocab, self.model.vocab
            )));
        }
        for spec in self.tuning.specs() {
            spec.validate()?;
        }
        Ok(())
    }
}

/// One experiment outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub method: String,
    pub specs: Vec<DesignSpec>,
    /// Bottleneck of non-spec tunings (prompt length); 0 otherwise.
    pub extra_bottleneck: usize,
    pub seed: u64,
    /// Audited from the live model.
    pub tunable_params: usize,
    pub base_total: usize,
    pub rel_percent: f64,
    /// `(step, dev token accuracy)`.
    pub curve: Vec<(usize, f64)>,
    pub losses: Vec<f64>,
    pub final_metric: f64,
    pub steps: usize,
    pub wall_seconds: f64,
    pub status: RunStatus,
}

impl RunRecord {
    fn pending(exp: &Experiment) -> Self {
        Self {
            config_hash: exp.config_hash(),
            method: exp.label.clone(),
            specs: exp.tuning.specs().to_vec(),
            extra_bottleneck: match exp.tuning {
                Tuning::Prompt { l } => l,
                _ => 0,
            },
            seed: exp.train.seed,
            tunable_params: 0,
            base_total: 0,
            rel_percent: 0.0,
            curve: Vec::new(),
            losses: Vec::new(),
            final_metric: 0.0,
            steps: 0,
            wall_seconds: 0.0,
            status: RunStatus::Ok,
        }
    }

    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &RunRecord) -> bool {
        RunRecord {
            wall_seconds: 0.0,
            ..self.clone()
        } == RunRecord {
            wall_seconds: 0.0,
            ..other.clone()
        }
    }
}

fn run_inner(exp: &Experiment, data: Option<&Dataset>, rec: &mut RunRecord) -> Result<Transformer> {
    exp.validate()?;
    let mut model = exp.build_model()?;
    rec.tunable_params = audit_trainable(&model);
    rec.base_total = model.base_numel();
    rec.rel_percent = relative_percentage(rec.tunable_params, rec.base_total)?;
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = gen_task(&exp.task)?;
            &owned
        }
    };
    let TrainOutcome {
        curve,
        losses,
        final_metric,
        steps,
        status,
        wall_seconds: _,
    } = train_loop(&mut model, data, &exp.train)?;
    rec.curve = curve;
    rec.losses = losses;
    rec.final_metric = final_metric;
    rec.steps = steps;
    rec.status = status;
    Ok(model)
}

/// Runs `exp` and keeps the trained model. Errors end up in the record's
/// status; the model is `None` when the run could not start or crashed.
pub fn run_experiment_with_model(exp: &Experiment) -> (RunRecord, Option<Transformer>) {
    run_with_data(exp, None)
}

pub(crate) fn run_with_data(exp: &Experiment, data: Option<&Dataset>) -> (RunRecord, Option<Transformer>) {
    let start = std::time::Instant::now();
    let mut rec = RunRecord::pending(exp);
    let model = match run_inner(exp, data, &mut rec) {
        Ok(m) => Some(m),
        Err(e) => {
            rec.status = RunStatus::Failed(e.to_string());
            None
        }
    };
    rec.wall_seconds = start.elapsed().as_secs_f64();
    (rec, model)
}

/// Attach, freeze, train, evaluate, record.
pub fn run_experiment(exp: &Experiment) -> RunRecord {
    run_experiment_with_model(exp).0
}

/// Split of a generated task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, dev or test)"))),
        }
    }
}

/// Rebuilds the experiment's model, loads the checkpoint into it and
/// returns token accuracy on `split`.
pub fn evaluate_checkpoint(exp: &Experiment, checkpoint: &Path, split: Split) -> Result<f64> {
    exp.validate()?;
    let mut model = exp.build_model()?;
    restore(&mut model, load_checkpoint(checkpoint)?)?;
    let data = gen_task(&exp.task)?;
    let examples = match split {
        Split::Train => &data.train,
        Split::Dev => &data.dev,
        Split::Test => &data.test,
    };
    evaluate(&model, examples)
}
