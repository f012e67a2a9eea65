//! Single-file archives of named arrays plus a JSON manifest.
//!
//! Layout (little-endian): magic `STMAECK1`, `u64` manifest length, manifest
//! bytes, `u64` array count, then per array `u32` name length, name, `u8`
//! dtype tag, `u64` element count, elements. Arrays are stored sorted by
//! name so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 8] = b"STMAECK1";

#[derive(Debug, Clone, PartialEq)]
enum Array {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Array {
    fn len(&self) -> usize {
        match self {
            Array::F32(v) => v.len(),
            Array::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub manifest: serde_json::Value,
    arrays: BTreeMap<String, Array>,
}

impl Archive {
    pub fn new(manifest: serde_json::Value) -> Self {
        Self {
            manifest,
            arrays: BTreeMap::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn put<T: Scalar>(&mut self, name: impl Into<String>, data: &[T]) {
        let arr = match T::DTYPE {
            Dtype::F32 => Array::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            Dtype::F64 => Array::F64(data.iter().map(|v| v.as_f64()).collect()),
        };
        self.arrays.insert(name.into(), arr);
    }

    /// Reads an array, converting from the stored dtype.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Vec<T>> {
        match self.arrays.get(name) {
            Some(Array::F32(v)) => Ok(v.iter().map(|&x| T::lit(x as f64)).collect()),
            Some(Array::F64(v)) => Ok(v.iter().map(|&x| T::lit(x)).collect()),
            None => Err(Error::Checkpoint(format!("missing array {name:?}"))),
        }
    }

    fn get_exact<T: Scalar>(&self, name: &str, len: usize) -> Result<Vec<T>> {
        let v = self.get(name)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!(
                "array {name:?} has {} elements, expected {len}",
                v.len()
            )));
        }
        Ok(v)
    }

    /// Stores parameter values, Adam moments and buffers under `prefix`.
    pub fn store_model<T: Scalar>(&mut self, prefix: &str, model: &mut (impl Parameters<T> + ?Sized)) {
        model.visit_params(prefix, &mut |name, p| {
            self.put(name.to_string(), &p.value);
            self.put(format!("{name}@m1"), &p.moment1);
            self.put(format!("{name}@m2"), &p.moment2);
        });
        model.visit_buffers(prefix, &mut |name, b| self.put(name.to_string(), b));
    }

    /// Inverse of [`Archive::store_model`]; every array must be present with
    /// the expected length. Gradients are cleared.
    pub fn load_model<T: Scalar>(&self, prefix: &str, model: &mut (impl Parameters<T> + ?Sized)) -> Result<()> {
        let mut err = None;
        model.visit_params(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            let n = p.value.len();
            let loaded = (|| -> Result<_> {
                Ok((
                    self.get_exact(name, n)?,
                    self.get_exact(&format!("{name}@m1"), n)?,
                    self.get_exact(&format!("{name}@m2"), n)?,
                ))
            })();
            match loaded {
                Ok((v, m1, m2)) => {
                    p.value = v;
                    p.moment1 = m1;
                    p.moment2 = m2;
                    p.zero_grad();
                }
                Err(e) => err = Some(e),
            }
        });
        model.visit_buffers(prefix, &mut |name, b| {
            if err.is_none() {
                match self.get_exact(name, b.len()) {
                    Ok(v) => *b = v,
                    Err(e) => err = Some(e),
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match arr {
                Array::F32(v) => {
                    out.push(Dtype::F32.tag());
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| x.write_le(&mut out));
                }
                Array::F64(v) => {
                    out.push(Dtype::F64.tag());
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| x.write_le(&mut out));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let mlen = r.u64()? as usize;
        let manifest = serde_json::from_slice(r.take(mlen)?)?;
        let count = r.u64()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let dtype = Dtype::from_tag(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint("unknown dtype tag".into()))?;
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let arr = match dtype {
                Dtype::F32 => Array::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                Dtype::F64 => Array::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            };
            debug_assert_eq!(arr.len(), n);
            arrays.insert(name, arr);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last array".into()));
        }
        Ok(Self { manifest, arrays })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mode, StageSpec, StageStack};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> StageStack<f32> {
        let spec = StageSpec {
            in_channels: 2,
            out_channels: 3,
            stride: 1,
            upsample: false,
            batch_norm: true,
            activation: Activation::Relu,
        };
        StageStack::new(&[spec], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn model_roundtrip_restores_values_and_buffers() {
        let mut a = net(1);
        a.forward(&Tensor::full([2, 2, 4, 4], 0.7), Mode::Train);
        let mut ar = Archive::new(serde_json::json!({"phase": "test"}));
        ar.store_model("net.", &mut a);
        let bytes = ar.to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back, ar);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut b = net(2);
        back.load_model("net.", &mut b).unwrap();
        let x = Tensor::from_fn([1, 2, 4, 4], |[_, c, y, x]| (c + y * x) as f32 * 0.1);
        assert_eq!(a.forward(&x, Mode::Eval), b.forward(&x, Mode::Eval));
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let mut ar = Archive::new(serde_json::json!({}));
        ar.put("x", &[1.0f64, 2.0]);
        let bytes = ar.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Archive::from_bytes(&bad).is_err());
        assert!(ar.load_model("net.", &mut net(0)).is_err());
    }

    #[test]
    fn dtype_conversion_on_read() {
        let mut ar = Archive::new(serde_json::Value::Null);
        ar.put("w", &[0.5f32, -1.25]);
        assert_eq!(ar.get::<f64>("w").unwrap(), vec![0.5, -1.25]);
    }
}
