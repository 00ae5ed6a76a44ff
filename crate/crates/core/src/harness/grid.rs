use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;

use super::{mix, run_with_data, Experiment, RunRecord, Tuning};
use crate::error::{Error, Result};
use crate::model::{HookPoint, ModelConfig};
use crate::peft::{Composition, DesignSpec, InsertionForm, Method};
use crate::task::{gen_task, TaskSpec};
use crate::train::TrainConfig;

/// One row of a grid before axis expansion: either named methods or
/// explicit specs, plus optional per-template axes.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub label: Option<String>,
    /// Method names; several are combined into one run.
    #[serde(default)]
    pub methods: Vec<String>,
    /// Prefix length for `prefix` and `mam` entries when the bottleneck
    /// axis should only move the adapter size.
    pub l: Option<usize>,
    pub s: Option<f64>,
    #[serde(default)]
    pub specs: Vec<DesignSpec>,
    /// Replaces the grid's bottleneck values for this template.
    #[serde(default)]
    pub bottlenecks: Vec<usize>,
    #[serde(default)]
    pub insertion_forms: Vec<InsertionForm>,
    #[serde(default)]
    pub representations: Vec<HookPoint>,
    #[serde(default)]
    pub compositions: Vec<Composition>,
    pub learning_rate: Option<f64>,
}

impl Template {
    pub fn methods(names: &[&str]) -> Self {
        Self {
            methods: names.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    pub fn specs(specs: Vec<DesignSpec>) -> Self {
        Self {
            specs,
            ..Self::default()
        }
    }

    fn has_axes(&self) -> bool {
        !(self.insertion_forms.is_empty() && self.representations.is_empty() && self.compositions.is_empty())
    }

    /// Tuning for bottleneck `b` (`None` keeps spec bottlenecks and requires
    /// methods to need none).
    fn tuning(&self, b: Option<usize>) -> Result<(Tuning, String)> {
        if self.methods.is_empty() == self.specs.is_empty() {
            return Err(Error::Config("a template needs either `methods` or `specs`".into()));
        }
        if !self.specs.is_empty() {
            let mut specs = self.specs.clone();
            if let Some(b) = b {
                for s in &mut specs {
                    s.bottleneck = match (s.is_prefix(), self.l) {
                        (true, Some(l)) => l,
                        _ => b,
                    };
                }
            }
            let t = Tuning::Specs(specs);
            let label = t.label();
            return Ok((t, label));
        }
        let mut parsed = Vec::with_capacity(self.methods.len());
        for name in &self.methods {
            let size = match (name.as_str(), self.l) {
                ("prefix" | "prompt", Some(l)) => l,
                _ => b.ok_or_else(|| Error::Config(format!("method `{name}` needs a bottleneck value")))?,
            };
            parsed.push(Method::parse(name, size, self.l, self.s)?);
        }
        let label = parsed.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+");
        if let [single] = parsed[..] {
            return Ok((Tuning::from_method(&single), label));
        }
        let mut specs = Vec::new();
        for m in &parsed {
            if m.specs().is_empty() {
                return Err(Error::Config(format!("`{}` cannot be combined with other methods", m.name())));
            }
            specs.extend(m.specs());
        }
        Ok((Tuning::Specs(specs), label))
    }
}

/// One expanded grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub tuning: Tuning,
    pub learning_rate: f64,
}

/// Cross product of templates, bottleneck values and per-template axes,
/// each cell repeated over `seeds_per_cell` seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub name: String,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub task: TaskSpec,
    pub train: TrainConfig,
    /// Overrides the per-tuning default for every cell without its own.
    pub learning_rate: Option<f64>,
    pub seed: u64,
    pub seeds_per_cell: usize,
    pub bottlenecks: Vec<usize>,
    pub templates: Vec<Template>,
}

/// Run seed of replicate `rep` of cell `cell`.
pub fn cell_seed(grid_seed: u64, cell: usize, rep: usize) -> u64 {
    mix(mix(grid_seed, cell as u64 + 1), rep as u64 + 1)
}

impl GridSpec {
    /// Desk model on the copy task with short training runs.
    pub fn desk(name: &str) -> Self {
        let task = TaskSpec::copy();
        Self {
            name: name.into(),
            model: ModelConfig {
                vocab: task.vocab,
                ..ModelConfig::desk()
            },
            model_seed: 0,
            task,
            train: TrainConfig {
                total_steps: 300,
                eval_every: 100,
                eval_examples: 100,
                ..TrainConfig::default()
            },
            learning_rate: None,
            seed: 0,
            seeds_per_cell: 3,
            bottlenecks: vec![1, 4, 16],
            templates: Vec::new(),
        }
    }

    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.templates.is_empty() {
            return Err(Error::Config(format!("grid `{}` has no templates", self.name)));
        }
        let mut cells = Vec::new();
        for t in &self.templates {
            let bs: Vec<Option<usize>> = match (&t.bottlenecks[..], &self.bottlenecks[..]) {
                ([], []) => vec![None],
                ([], g) => g.iter().copied().map(Some).collect(),
                (own, _) => own.iter().copied().map(Some).collect(),
            };
            let ins: Vec<Option<InsertionForm>> = axis(&t.insertion_forms);
            let reps: Vec<Option<HookPoint>> = axis(&t.representations);
            let comps: Vec<Option<Composition>> = axis(&t.compositions);
            let mut seen_fixed = false;
            for &b in &bs {
                let (tuning, label) = t.tuning(b)?;
                let specs = match tuning {
                    Tuning::Specs(s) => s,
                    other => {
                        // Full fine-tuning and BitFit have no bottleneck.
                        let fixed = matches!(other, Tuning::Full | Tuning::BitFit);
                        if !(fixed && seen_fixed) {
                            cells.push(self.cell(t, t.label.clone().unwrap_or(label), other));
                        }
                        seen_fixed |= fixed;
                        continue;
                    }
                };
                for &i in &ins {
                    for &r in &reps {
                        for &c in &comps {
                            let specs: Vec<DesignSpec> = specs
                                .iter()
                                .map(|s| {
                                    let mut s = s.clone();
                                    if let Some(i) = i {
                                        s.insertion_form = i;
                                    }
                                    if let Some(r) = r {
                                        s.modified_representation = r;
                                    }
                                    if let Some(c) = c {
                                        s.composition = c;
                                    }
                                    s
                                })
                                .collect();
                            for s in &specs {
                                s.validate().map_err(|e| {
                                    Error::Config(format!("grid `{}` cell {}: {e}", self.name, s.label()))
                                })?;
                            }
                            let tuning = Tuning::Specs(specs);
                            let label = match &t.label {
                                Some(l) => l.clone(),
                                None if t.has_axes() => tuning.label(),
                                None => label.clone(),
                            };
                            cells.push(self.cell(t, label, tuning));
                        }
                    }
                }
            }
        }
        Ok(cells)
    }

    fn cell(&self, t: &Template, label: String, tuning: Tuning) -> Cell {
        let learning_rate = t
            .learning_rate
            .or(self.learning_rate)
            .unwrap_or_else(|| tuning.default_learning_rate());
        Cell {
            label,
            tuning,
            learning_rate,
        }
    }

    /// Every cell × seed as an experiment, in cell-major order.
    pub fn experiments(&self) -> Result<Vec<Experiment>> {
        if self.seeds_per_cell == 0 {
            return Err(Error::Config("seeds_per_cell must be at least 1".into()));
        }
        let mut out = Vec::new();
        for (ci, cell) in self.cells()?.into_iter().enumerate() {
            for rep in 0..self.seeds_per_cell {
                let train = TrainConfig {
                    learning_rate: cell.learning_rate,
                    seed: cell_seed(self.seed, ci, rep),
                    ..self.train.clone()
                };
                let exp = Experiment {
                    label: cell.label.clone(),
                    model: self.model.clone(),
                    model_seed: self.model_seed,
                    task: self.task.clone(),
                    train,
                    tuning: cell.tuning.clone(),
                };
                exp.validate()?;
                out.push(exp);
            }
        }
        Ok(out)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.train.total_steps = steps;
        self
    }
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

pub const PREBUILT_GRIDS: [&str; 5] = ["insertion", "representation", "composition", "budget", "combination"];

/// Named comparison grids on the desk model.
pub fn prebuilt_grid(name: &str) -> Result<GridSpec> {
    let mut g = GridSpec::desk(name);
    g.templates = match name {
        // Sequential vs parallel adapters at both sublayers.
        "insertion" => vec![Template {
            insertion_forms: vec![InsertionForm::Sequential, InsertionForm::Parallel],
            representations: vec![HookPoint::AttnSublayerOutput, HookPoint::FfnSublayerOutput],
            ..Template::specs(vec![DesignSpec::parallel_adapter(HookPoint::AttnSublayerOutput, 1)])
        }],
        // Each method at attention and at the FFN.
        "representation" => ["prefix", "pa_attn", "pa_ffn", "lora_attn", "lora_ffn"]
            .iter()
            .map(|m| Template::methods(&[m]))
            .collect(),
        "composition" => {
            g.bottlenecks = vec![4];
            vec![
                Template {
                    compositions: vec![Composition::GatedAdd, Composition::Add],
                    ..Template::specs(vec![DesignSpec::prefix(4)])
                },
                Template {
                    compositions: vec![Composition::Add, Composition::ScaledAdd(4.0)],
                    ..Template::specs(vec![DesignSpec::parallel_adapter(HookPoint::FfnSublayerOutput, 4)])
                },
                Template {
                    compositions: vec![Composition::ScaledAdd(1.0), Composition::ScaledAdd(4.0)],
                    ..Template::specs(vec![DesignSpec::lora(HookPoint::FfnWeight1, 4, 1.0)])
                },
            ]
        }
        // Smallest budgets: a single bottleneck unit per site.
        "budget" => {
            g.bottlenecks = vec![1];
            ["prefix", "sa_ffn", "pa_attn", "pa_ffn", "mh_pa", "lora_attn", "lora_ffn", "prompt", "bitfit"]
                .iter()
                .map(|m| Template::methods(&[m]))
                .collect()
        }
        "combination" => {
            g.bottlenecks = vec![16];
            let with_l = |names: &[&str]| Template {
                l: Some(4),
                ..Template::methods(names)
            };
            vec![
                Template::methods(&["pa_ffn"]),
                Template::methods(&["scaled_pa_ffn"]),
                with_l(&["prefix", "pa_ffn"]),
                with_l(&["mam"]),
                Template::methods(&["mh_pa", "pa_ffn"]),
                Template::methods(&["mh_pa", "scaled_pa_ffn"]),
            ]
        }
        other => {
            return Err(Error::Config(format!(
                "unknown grid `{other}` (one of {})",
                PREBUILT_GRIDS.join(", ")
            )))
        }
    };
    Ok(g)
}

/// Runs every experiment of `grid` on up to `workers` threads. Records come
/// back in experiment order whatever the schedule.
pub fn run_grid(grid: &GridSpec, workers: usize) -> Result<Vec<RunRecord>> {
    let exps = grid.experiments()?;
    let data = gen_task(&grid.task)?;
    let next = AtomicUsize::new(0);
    let sink: Mutex<Vec<(usize, RunRecord)>> = Mutex::new(Vec::with_capacity(exps.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, exps.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(exp) = exps.get(i) else { break };
                let (rec, _) = run_with_data(exp, Some(&data));
                sink.lock().unwrap_or_else(|p| p.into_inner()).push((i, rec));
            });
        }
    });
    let mut out = sink.into_inner().unwrap_or_else(|p| p.into_inner());
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, r)| r).collect())
}
