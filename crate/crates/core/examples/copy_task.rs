//! Trains one method on the copy task and prints its dev accuracy curve.
//!
//! cargo run --release -p peftlab-core --example copy_task -- mam 16 4

use peftlab_core::harness::{run_experiment, Experiment};
use peftlab_core::model::ModelConfig;
use peftlab_core::peft::Method;
use peftlab_core::task::TaskSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map(String::as_str).unwrap_or("mam");
    let size = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(16);
    let l = args.get(2).map(|s| s.parse()).transpose()?;
    let seed = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(0);

    let method = Method::parse(name, size, l.or(Some(4)), None)?;
    let task = TaskSpec::copy();
    let model = ModelConfig {
        vocab: task.vocab,
        ..ModelConfig::desk()
    };
    let exp = Experiment::for_method(model, task, &method).with_seed(seed);
    let rec = run_experiment(&exp);
    for (step, acc) in &rec.curve {
        println!("{step:>6} {acc:.4}");
    }
    println!(
        "{} lr={} params={} ({:.3}%) final={:.4} {} {:.1}s",
        rec.method,
        exp.train.learning_rate,
        rec.tunable_params,
        rec.rel_percent,
        rec.final_metric,
        rec.status.label(),
        rec.wall_seconds
    );
    Ok(())
}
