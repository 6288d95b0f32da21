//! Versioned little-endian weight files.
//!
//! Layout: magic `LFW1`, `u32` tensor count, then per tensor a `u32` name
//! length, the UTF-8 name, a `u32` rank, `rank` `u32` dims and the `f32`
//! payload. Names starting with `meta/` carry run metadata and are skipped
//! when loading into a module.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

use super::{Module, Real, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LFW1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }

    /// Metadata entry whose payload is a single zero.
    pub fn meta(key: &str) -> Self {
        NamedTensor::new(format!("meta/{key}"), Tensor::zeros(&[1]))
    }

    pub fn is_meta(&self) -> bool {
        self.name.starts_with("meta/")
    }
}

pub fn write_weights(mut w: impl Write, items: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for item in items {
        w.write_all(&(item.name.len() as u32).to_le_bytes())?;
        w.write_all(item.name.as_bytes())?;
        let shape = item.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in item.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::WeightsFormat(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_weights(mut r: impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::WeightsFormat(format!("missing header: {e}")))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::WeightsFormat(format!("bad magic {magic:?}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::WeightsFormat(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::WeightsFormat("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::WeightsFormat(format!("truncated payload of {name}: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::WeightsFormat(format!("{name}: {e}")))?;
        out.push(NamedTensor { name, tensor });
    }
    Ok(out)
}

/// Converts every parameter of `module` to `f32` entries, prefixing names.
pub fn module_tensors<T: Real>(prefix: &str, module: &impl Module<T>) -> Vec<NamedTensor> {
    module
        .params()
        .into_iter()
        .map(|(name, p)| NamedTensor::new(format!("{prefix}{name}"), p.value.cast()))
        .collect()
}

/// Assigns the entries named `prefix + param name` to `module`.
pub fn load_module<T: Real>(prefix: &str, module: &mut impl Module<T>, items: &[NamedTensor]) -> Result<()> {
    for (name, p) in module.params_mut() {
        let full = format!("{prefix}{name}");
        let item = items
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| Error::WeightsFormat(format!("missing tensor {full}")))?;
        if item.tensor.shape() != p.value.shape() {
            return Err(Error::WeightsFormat(format!(
                "{full}: stored shape {:?}, expected {:?}",
                item.tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = item.tensor.cast();
    }
    Ok(())
}

pub fn write_weights_file(path: &Path, items: &[NamedTensor]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_weights(BufWriter::new(f), items).map_err(|e| Error::io(path, e))
}

pub fn read_weights_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u32>(),
            name in "[a-z./_]{1,12}",
        ) {
            let len: usize = dims.iter().product();
            let data: Vec<f32> = (0..len)
                .map(|i| f32::from_bits(crate::rng::derive(seed as u64, &[i as u64]) as u32 & 0x7f7f_ffff))
                .collect();
            let items = vec![
                NamedTensor::new(name, Tensor::new(&dims, data).unwrap()),
                NamedTensor::meta("seed=3"),
            ];
            let mut buf = Vec::new();
            write_weights(&mut buf, &items).unwrap();
            let back = read_weights(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            for (a, b) in items.iter().zip(&back) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
                let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(read_weights(&b"XXXX\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_weights(&mut buf, &[NamedTensor::new("w", Tensor::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_weights(buf.as_slice()).is_err());
    }
}
