//! Synthetic sequence tasks.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decoder start token; never produced by the generators as a source token.
pub const BOS: usize = 0;

/// Token whose count decides the parity label.
pub const PARITY_TOKEN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Target is a single token: the parity (0 or 1) of the number of
    /// [`PARITY_TOKEN`]s in the source.
    ClassifyParity,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ClassifyParity => "classify_parity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_eval")]
    pub dev: usize,
    #[serde(default = "default_eval")]
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train() -> usize {
    2000
}

fn default_eval() -> usize {
    200
}

impl TaskSpec {
    /// Copy task with vocabulary 16, length 10 and 2000 training pairs.
    pub fn copy() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab: 16,
            seq_len: 10,
            train: default_train(),
            dev: default_eval(),
            test: default_eval(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 {
            return Err(Error::Config(format!("task vocabulary must be at least 3, got {}", self.vocab)));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("task sequence length must be positive".into()));
        }
        if self.train == 0 {
            return Err(Error::Config("task needs at least one training example".into()));
        }
        let space = ((self.vocab - 1) as f64).powi(self.seq_len.min(64) as i32);
        let wanted = (self.train + self.dev + self.test) as f64;
        if space < 2.0 * wanted {
            return Err(Error::Config(format!(
                "{} distinct sequences requested from a space of {space}",
                self.train + self.dev + self.test
            )));
        }
        Ok(())
    }

    /// Length of each target sequence.
    pub fn target_len(&self) -> usize {
        match self.kind {
            TaskKind::ClassifyParity => 1,
            _ => self.seq_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    /// Teacher-forcing decoder input: `[BOS, tgt[..n-1]]`.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.tgt.len());
        v.push(BOS);
        v.extend_from_slice(&self.tgt[..self.tgt.len() - 1]);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Deterministic serialization, used to compare datasets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for split in [&self.train, &self.dev, &self.test] {
            out.extend((split.len() as u64).to_le_bytes());
            for ex in split {
                for seq in [&ex.src, &ex.tgt] {
                    out.extend((seq.len() as u64).to_le_bytes());
                    for &t in seq.iter() {
                        out.extend((t as u64).to_le_bytes());
                    }
                }
            }
        }
        out
    }
}

pub fn target_for(kind: TaskKind, src: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::ClassifyParity => vec![src.iter().filter(|&&t| t == PARITY_TOKEN).count() % 2],
    }
}

/// Draws distinct source sequences over tokens `1..vocab` and splits them
/// into train, dev and test, so the splits never share a source.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train + spec.dev + spec.test;
    let mut seen = HashSet::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    while sources.len() < total {
        let s: Vec<usize> = (0..spec.seq_len).map(|_| rng.gen_range(1..spec.vocab)).collect();
        if seen.insert(s.clone()) {
            sources.push(s);
        }
    }
    sources.shuffle(&mut rng);
    let mut it = sources.into_iter().map(|src| Example {
        tgt: target_for(spec.kind, &src),
        src,
    });
    let train = it.by_ref().take(spec.train).collect();
    let dev = it.by_ref().take(spec.dev).collect();
    let test = it.collect();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        dev,
        test,
    })
}
