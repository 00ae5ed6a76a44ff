//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Takes about fifteen minutes on one core.

use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use peftlab_core::harness::{prebuilt_grid, run_experiment, run_experiment_with_model, Experiment, CSV_HEADER};
use peftlab_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use peftlab_core::model::ModelConfig;
use peftlab_core::peft::Method;
use peftlab_core::task::TaskSpec;
use peftlab_core::verify::{self, SuiteReport};

const SEED: u64 = 0;

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_suite(r: peftlab_core::Result<SuiteReport>, budget_s: f64) -> Outcome {
    match r {
        Ok(r) => {
            let mut detail = format!(
                "max error {:.3e} (tolerance {:.0e}), {} cases, {:.2}s",
                r.max_error, r.tolerance, r.cases, r.seconds
            );
            for f in r.failures.iter().take(3) {
                detail.push_str(&format!("; {f}"));
            }
            Outcome {
                passed: r.passed && r.seconds < budget_s,
                detail,
            }
        }
        Err(e) => Outcome {
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn copy_experiment(method: &Method) -> Experiment {
    let task = TaskSpec::copy();
    let model = ModelConfig {
        vocab: task.vocab,
        ..ModelConfig::desk()
    };
    Experiment::for_method(model, task, method).with_seed(SEED)
}

fn method(name: &str, b: usize) -> Method {
    Method::parse(name, b, Some(4), None).expect("known method")
}

/// Every frozen tensor after 500 steps equals its pre-training checkpoint.
fn freeze_audit(dir: &Path) -> Outcome {
    let methods = [
        method("bitfit", 0),
        method("prompt", 8),
        method("prefix", 8),
        method("sa_attn", 16),
        method("pa_ffn", 16),
        method("scaled_pa_ffn", 16),
        method("mh_pa", 8),
        method("lora_attn", 8),
        method("lora_ffn", 8),
        method("mam", 16),
    ];
    let mut checked = 0;
    let mut problems = Vec::new();
    for m in &methods {
        let mut exp = copy_experiment(m);
        exp.train.total_steps = 500;
        exp.train.eval_every = 0;
        exp.train.eval_examples = 50;
        let path = dir.join(format!("{}.ckpt", m.name()));
        let before = exp.build_model().and_then(|model| save_checkpoint(&path, model.params()));
        if let Err(e) = before {
            problems.push(format!("{m}: {e}"));
            continue;
        }
        let (rec, model) = run_experiment_with_model(&exp);
        let (Some(model), true) = (model, rec.status.is_ok()) else {
            problems.push(format!("{m}: {}", rec.status.label()));
            continue;
        };
        let mut moved = false;
        for t in load_checkpoint(&path).expect("checkpoint reads back") {
            let now = &model.params().by_name(&t.name).expect("same structure").value;
            let same = now.data().iter().zip(t.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if t.trainable {
                moved |= !same;
            } else {
                checked += 1;
                if !same {
                    problems.push(format!("{m}: frozen `{}` changed", t.name));
                }
            }
        }
        if !moved {
            problems.push(format!("{m}: no trainable tensor moved"));
        }
    }
    Outcome {
        passed: problems.is_empty(),
        detail: format!(
            "{} methods x 500 steps, {checked} frozen tensors bit-identical{}",
            methods.len(),
            problems.iter().take(3).map(|p| format!("; {p}")).collect::<String>()
        ),
    }
}

/// Default-hyperparameter copy-task runs plus a bit-exact replay.
fn sanity_training() -> Outcome {
    let start = Instant::now();
    let methods = [
        Method::Full,
        method("prefix", 8),
        method("pa_ffn", 16),
        method("lora_attn", 8),
        method("mam", 16),
    ];
    let mut passed = true;
    let mut parts = Vec::new();
    let mut last = None;
    for m in &methods {
        let exp = copy_experiment(m);
        let rec = run_experiment(&exp);
        let ok = rec.status.is_ok() && rec.final_metric >= 0.95 && rec.steps <= 3000;
        passed &= ok;
        parts.push(format!("{m} {:.4}", rec.final_metric));
        eprintln!("    {m}: accuracy {:.4} after {} steps, {:.0}s", rec.final_metric, rec.steps, rec.wall_seconds);
        last = Some((exp, rec));
    }
    let (exp, first) = last.expect("at least one method");
    let replay = run_experiment(&exp);
    let bits = |c: &[(usize, f64)]| c.iter().map(|&(s, m)| (s, m.to_bits())).collect::<Vec<_>>();
    let replayed = bits(&first.curve) == bits(&replay.curve) && first.same_result(&replay);
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        passed: passed && replayed && secs < 1800.0,
        detail: format!(
            "{}; replay {}; {secs:.0}s",
            parts.join(", "),
            if replayed { "bit-identical" } else { "DIFFERS" }
        ),
    }
}

fn peftlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_peftlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Checks one grid CSV: schema, row count, one row per cell x seed.
fn check_grid_csv(path: &Path, expected: usize) -> Result<(), String> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = rd.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(format!("header {header:?}"));
    }
    let mut keys = HashSet::new();
    let mut rows = 0;
    for r in rd.records() {
        let r = r.map_err(|e| e.to_string())?;
        rows += 1;
        if r.len() != CSV_HEADER.len() || &r[13] != "ok" {
            return Err(format!("bad row {r:?}"));
        }
        let numeric = r[8].parse::<usize>().is_ok()
            && r[9].parse::<f64>().is_ok()
            && r[10].parse::<f64>().is_ok()
            && r[11].parse::<usize>().is_ok();
        if !numeric {
            return Err(format!("non-numeric field in {r:?}"));
        }
        keys.insert((r[0].to_owned(), r[7].to_owned()));
    }
    if rows != expected || keys.len() != expected {
        return Err(format!("{rows} rows, {} distinct cell/seed pairs, expected {expected}", keys.len()));
    }
    Ok(())
}

fn grid_replay(dir: &Path) -> Outcome {
    let mut parts = Vec::new();
    let mut passed = true;
    for name in ["insertion", "representation", "composition", "combination"] {
        let expected = prebuilt_grid(name).and_then(|g| g.experiments()).map(|e| e.len()).unwrap_or(0);
        let csv = dir.join(format!("{name}.csv"));
        let o = peftlab(&["grid", "--preset", name, "--steps", "20", "--output", csv.to_str().unwrap()]);
        let result = if o.status.success() {
            check_grid_csv(&csv, expected)
        } else {
            Err(format!("exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
        };
        match result {
            Ok(()) => parts.push(format!("{name} {expected} rows")),
            Err(e) => {
                passed = false;
                parts.push(format!("{name} FAILED ({e})"));
            }
        }
    }
    let v = peftlab(&["verify"]);
    let verified = v.status.code() == Some(0);
    passed &= verified;
    parts.push(format!("verify exit {:?}", v.status.code()));
    Outcome {
        passed,
        detail: parts.join(", "),
    }
}

fn main() -> ExitCode {
    // Ignore the harness arguments cargo passes; this target has no filters.
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Check)> = vec![
        ("prefix equivalence", Box::new(|| from_suite(verify::prefix_equivalence(100, SEED), 10.0))),
        ("lambda properties", Box::new(|| from_suite(verify::lambda_properties(SEED), f64::INFINITY))),
        ("parameter counts", Box::new(|| from_suite(verify::parameter_counts(), 60.0))),
        ("gradient checks", Box::new(|| from_suite(verify::gradients(10, SEED), f64::INFINITY))),
        ("init and merge identities", Box::new(|| from_suite(verify::identities(SEED), f64::INFINITY))),
        ("rank bound", Box::new(|| from_suite(verify::rank_bound(SEED), f64::INFINITY))),
        ("freeze audit", Box::new(|| freeze_audit(dir.path()))),
        ("copy-task training", Box::new(sanity_training)),
        ("grid replay", Box::new(|| grid_replay(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let out = run();
        failed += usize::from(!out.passed);
        println!(
            "{} {} {name}: {}",
            if out.passed { "PASS" } else { "FAIL" },
            i + 1,
            out.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
