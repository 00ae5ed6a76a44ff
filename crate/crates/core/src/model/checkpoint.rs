//! Checkpoint container.
//!
//! ```text
//! PEFTCKPT 1
//! tensors <count>
//! <name>\t<shape>\t<trainable>     one line per tensor
//! end
//! <payload>
//! ```
//!
//! `<shape>` is the extents joined by `x` (`32x128`, `32`, or `-` for a
//! scalar), `<trainable>` is `0` or `1`. The payload follows the newline
//! after `end`: every tensor's elements as little-endian IEEE-754 `f64`,
//! row-major, in header order, with nothing in between.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ParamStore;
use super::transformer::Transformer;

const MAGIC: &str = "PEFTCKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(vec![]);
    }
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad shape `{s}`")))
        })
        .collect()
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    if store.is_shape_only() {
        return Err(Error::Checkpoint("shape-only store has no values".into()));
    }
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    writeln!(w, "{MAGIC}").map_err(io)?;
    writeln!(w, "tensors {}", store.len()).map_err(io)?;
    for (_, p) in store.iter() {
        if p.name.contains(['\t', '\n']) {
            return Err(Error::Checkpoint(format!("unsupported tensor name `{}`", p.name)));
        }
        writeln!(w, "{}\t{}\t{}", p.name, format_shape(p.shape()), u8::from(p.trainable)).map_err(io)?;
    }
    writeln!(w, "end").map_err(io)?;
    for (_, p) in store.iter() {
        w.write_all(&p.value.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<CheckpointTensor>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<()> {
        line.clear();
        let n = r
            .read_line(line)
            .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        if line.ends_with('\n') {
            line.pop();
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line != MAGIC {
        return Err(Error::Checkpoint(format!("not a checkpoint (header `{line}`)")));
    }
    next_line(&mut r, &mut line)?;
    let count: usize = line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad count line `{line}`")))?;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        next_line(&mut r, &mut line)?;
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, flag] = fields[..] else {
            return Err(Error::Checkpoint(format!("bad tensor line `{line}`")));
        };
        let trainable = match flag {
            "0" => false,
            "1" => true,
            _ => return Err(Error::Checkpoint(format!("bad trainable flag `{flag}`"))),
        };
        header.push((name.to_string(), parse_shape(shape)?, trainable));
    }
    next_line(&mut r, &mut line)?;
    if line != "end" {
        return Err(Error::Checkpoint(format!("expected `end`, found `{line}`")));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape, trainable) in header {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("payload of `{name}` truncated")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(CheckpointTensor {
            name,
            value: Tensor::new(&shape, data)?,
            trainable,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), store)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointTensor>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}

/// Copies checkpoint values into `model`, whose tensor names and shapes
/// must match the checkpoint exactly. Trainable flags are restored too.
pub fn restore(model: &mut Transformer, tensors: Vec<CheckpointTensor>) -> Result<()> {
    if tensors.len() != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            model.params().len()
        )));
    }
    for t in tensors {
        let id = model
            .params()
            .id(&t.name)
            .map_err(|_| Error::Checkpoint(format!("model has no tensor `{}`", t.name)))?;
        model.params_mut().set(id, t.value)?;
        model.params_mut().get_mut(id).trainable = t.trainable;
    }
    Ok(())
}
