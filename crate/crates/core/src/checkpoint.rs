//! Weight checkpoints.
//!
//! Layout: a UTF-8 header followed by raw little-endian `f64` values.
//!
//! ```text
//! ddvi-checkpoint 1
//! tensors <count>
//! <name> <dim0>x<dim1>
//! ...
//! data
//! <f64 LE bytes for every tensor, in header order>
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::ParamStore;

const MAGIC: &str = "ddvi-checkpoint 1";

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "tensors {}", store.len())?;
    for (name, t) in store.iter() {
        writeln!(w, "{} {}", name, shape_str(t.shape()))?;
    }
    writeln!(w, "data")?;
    for (_, t) in store.iter() {
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parsed checkpoint entries in file order.
pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic line".into()));
    }
    let count_line = next_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad tensor count line '{count_line}'")))?;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let entry = next_line(&mut r)?;
        let (name, shape) = entry
            .rsplit_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad header line '{entry}'")))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape in '{entry}'")))?;
        header.push((name.to_string(), shape));
    }
    if next_line(&mut r)? != "data" {
        return Err(Error::Checkpoint("missing data marker".into()));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in header {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated data for tensor '{name}'")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Loads values into `store`, which must have exactly the same names and
/// shapes. On mismatch every difference is reported.
pub fn load_into(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mut diffs = Vec::new();
    let expected: Vec<(String, Vec<usize>)> = store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    for (name, shape) in &expected {
        match entries.iter().find(|(n, _)| n == name) {
            None => diffs.push(format!("missing tensor {name} (expected {})", shape_str(shape))),
            Some((_, t)) if t.shape() != shape.as_slice() => diffs.push(format!(
                "tensor {name}: expected {}, checkpoint has {}",
                shape_str(shape),
                shape_str(t.shape())
            )),
            _ => {}
        }
    }
    for (name, t) in &entries {
        if !expected.iter().any(|(n, _)| n == name) {
            diffs.push(format!(
                "unexpected tensor {name} ({})",
                shape_str(t.shape())
            ));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::CheckpointMismatch(diffs));
    }
    for (name, t) in entries {
        let id = store.find(&name).expect("checked above");
        *store.get_mut(id) = t;
    }
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let entries = read_checkpoint(std::io::BufReader::new(f))?;
    load_into(store, entries)
}
