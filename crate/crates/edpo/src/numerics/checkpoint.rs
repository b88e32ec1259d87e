//! Self-describing text container for named tensors.
//!
//! Layout:
//! ```text
//! edpo-checkpoint v1
//! tensor <name> <ndim> <d0> <d1> ...
//! <values, space-separated>
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so
//! `read(write(t)) == t` bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

use super::tensor::Tensor;

const MAGIC: &str = "edpo-checkpoint v1";

pub fn write_checkpoint_str(tensors: &BTreeMap<String, Tensor>) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (name, t) in tensors {
        write!(out, "tensor {name} {}", t.shape().len()).unwrap();
        for d in t.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
            first = false;
        }
        out.push('\n');
    }
    out
}

pub fn read_checkpoint_str(text: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty checkpoint".into() })?;
    if magic != MAGIC {
        return Err(Error::Parse { line: 1, msg: format!("bad magic line: {magic:?}") });
    }
    let mut out = BTreeMap::new();
    while let Some((i, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Parse { line: i + 1, msg: format!("expected tensor header: {header:?}") });
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "missing tensor name".into() })?
            .to_string();
        let ndim: usize = parse_field(parts.next(), i + 1, "ndim")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(parse_field(parts.next(), i + 1, "dim")?);
        }
        let (j, values) = lines
            .next()
            .ok_or_else(|| Error::Parse { line: i + 2, msg: "missing value line".into() })?;
        let data = values
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse { line: j + 1, msg: format!("bad value {s:?}: {e}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.insert(name, tensor);
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::write(path, write_checkpoint_str(tensors))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    read_checkpoint_str(&std::fs::read_to_string(path)?)
}

fn parse_field<T: std::str::FromStr>(s: Option<&str>, line: usize, what: &str) -> Result<T> {
    s.ok_or_else(|| Error::Parse { line, msg: format!("missing {what}") })?
        .parse::<T>()
        .map_err(|_| Error::Parse { line, msg: format!("bad {what}") })
}
