//! Fixtures shared by the benchmarks.

use peftlab_core::harness::Experiment;
use peftlab_core::model::{ModelConfig, Transformer};
use peftlab_core::peft::Method;
use peftlab_core::task::{gen_task, Dataset, TaskSpec};

/// Copy task of the standard size, trimmed to `train` training pairs.
pub fn copy_data(train: usize) -> Dataset {
    gen_task(&TaskSpec {
        train,
        dev: 128,
        test: 16,
        ..TaskSpec::copy()
    })
    .expect("copy task spec is valid")
}

/// Desk model with `method` attached and the base frozen.
pub fn desk_model(method: &Method) -> Transformer {
    let task = TaskSpec::copy();
    let model = ModelConfig {
        vocab: task.vocab,
        ..ModelConfig::desk()
    };
    Experiment::for_method(model, task, method)
        .build_model()
        .expect("desk model builds")
}

/// Methods benchmarked side by side.
pub fn methods() -> Vec<Method> {
    ["full", "prefix", "pa_ffn", "lora_attn", "mam"]
        .iter()
        .map(|n| {
            let b = match *n {
                "prefix" | "lora_attn" => 8,
                _ => 16,
            };
            Method::parse(n, b, Some(4), None).expect("known method")
        })
        .collect()
}
