//! Named-tensor files: an 8-byte little-endian header length, a JSON header
//! listing `(name, shape, offset)` and then raw little-endian f64 data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (String, ArrayViewD<'a, f64>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut offset = 0;
    let header: Vec<Entry> = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(header.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for (_, t) in &tensors {
        for v in t.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let entries: Vec<Entry> = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("{}: bad tensor header: {e}", path.display())))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(io)?;
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut out = BTreeMap::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let slice = values.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::Checkpoint(format!(
                "{}: tensor {} is truncated",
                path.display(),
                e.name
            ))
        })?;
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), slice.to_vec())
            .map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
        out.insert(e.name, arr);
    }
    Ok(out)
}

pub fn save_params(model: &impl Parameterized, path: &Path) -> Result<()> {
    let mut owned = Vec::new();
    model.visit("", &mut |name, v| {
        owned.push((name.to_string(), v.to_owned()))
    });
    write_tensors(path, owned.iter().map(|(n, v)| (n.clone(), v.view())))
}

/// Copies tensors into the model's parameters. Names are matched after
/// prepending `prefix`; every parameter must be present with its shape.
pub fn assign_params(
    model: &mut impl Parameterized,
    tensors: &BTreeMap<String, ArrayD<f64>>,
    prefix: &str,
) -> Result<()> {
    let mut err = None;
    model.visit_mut("", &mut |name, mut value, _| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match tensors.get(&key) {
            None => err = Some(Error::Checkpoint(format!("missing tensor {key}"))),
            Some(t) if t.shape() != value.shape() => {
                err = Some(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    value.shape()
                )))
            }
            Some(t) => value.assign(t),
        }
    });
    err.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;

    #[test]
    fn params_survive_a_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let a = Linear::new(3, 2, true, &mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
        save_params(&a, &p).unwrap();
        let mut b = Linear::zeros(3, 2, true);
        assign_params(&mut b, &read_tensors(&p).unwrap(), "").unwrap();
        assert_eq!(a, b);

        let mut wrong = Linear::zeros(4, 2, true);
        assert!(assign_params(&mut wrong, &read_tensors(&p).unwrap(), "").is_err());
    }
}
