//! Parameter container on disk: a text header listing `(name, rows, cols)`
//! per tensor, then the tensor data as little-endian `f64` in header order.
//! Optimizer hyperparameters and step count go to a key=value sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

use super::{AdamState, ParamSet, Tensor2};

const MAGIC: &str = "slate-params v1";

pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    for (name, t) in params.iter() {
        if name.chars().any(char::is_whitespace) {
            return Err(Error::Format(format!(
                "parameter name {name:?} contains whitespace"
            )));
        }
        if !t.is_finite() {
            return Err(Error::Format(format!("parameter {name} is not finite")));
        }
        writeln!(w, "tensor {name} {} {}", t.rows(), t.cols())?;
    }
    writeln!(w, "end")?;
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format(format!(
            "bad magic line {:?} in {}",
            line.trim_end(),
            path.display()
        )));
    }
    let mut decls: Vec<(String, usize, usize)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated header".into()));
        }
        let trimmed = line.trim_end();
        if trimmed == "end" {
            break;
        }
        let mut fields = trimmed.split_whitespace();
        match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some("tensor"), Some(name), Some(rows), Some(cols)) => {
                let rows: usize = rows
                    .parse()
                    .map_err(|_| Error::Format(format!("bad rows in {trimmed:?}")))?;
                let cols: usize = cols
                    .parse()
                    .map_err(|_| Error::Format(format!("bad cols in {trimmed:?}")))?;
                decls.push((name.to_string(), rows, cols));
            }
            _ => return Err(Error::Format(format!("bad header line {trimmed:?}"))),
        }
    }
    let mut params = ParamSet::new();
    for (name, rows, cols) in decls {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated data for tensor {name}")))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor2::from_vec(rows, cols, data)?);
    }
    Ok(params)
}

/// Moments are not persisted; a loaded state starts with fresh moments at the
/// recorded step count.
pub fn save_optimizer(state: &AdamState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step={}", state.step)?;
    writeln!(w, "lr={}", state.lr)?;
    writeln!(w, "beta1={}", state.beta1)?;
    writeln!(w, "beta2={}", state.beta2)?;
    writeln!(w, "eps={}", state.eps)?;
    writeln!(w, "weight_decay={}", state.weight_decay)?;
    w.flush()?;
    Ok(())
}

pub fn load_optimizer(path: &Path) -> Result<AdamState> {
    let mut state = AdamState::new(0.0, 0.0);
    for (idx, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let parse = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("bad number {v:?}"),
            })
        };
        match key {
            "step" => {
                state.step = value.parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    msg: format!("bad step {value:?}"),
                })?
            }
            "lr" => state.lr = parse(value)?,
            "beta1" => state.beta1 = parse(value)?,
            "beta2" => state.beta2 = parse(value)?,
            "eps" => state.eps = parse(value)?,
            "weight_decay" => state.weight_decay = parse(value)?,
            other => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("unknown optimizer key {other:?}"),
                })
            }
        }
    }
    Ok(state)
}
