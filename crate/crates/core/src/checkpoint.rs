//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WINQCKPT"  u32 version  u64 meta_len  meta (UTF-8 JSON)
//! u32 n_arrays, then per array: u32 name_len, name, u64 count, count × f64
//! 32-byte SHA-256 of every preceding byte
//! ```
//!
//! The metadata block records the parameter layout plus free-form run
//! metadata (configs, seeds, step). Parameter tensors are stored one array
//! per name; optimizer moments as `optimizer.m` / `optimizer.v`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, WinqError};
use crate::tensor::{ParamEntry, ParamLayout, ParamVector};
use crate::train::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WINQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    layout: Vec<ParamEntry>,
    optimizer_step: Option<u64>,
    run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run metadata (configs, seeds, step, quantizer).
    pub run: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamVector, optimizer: Option<OptimizerState>, run: serde_json::Value) -> Self {
        Self { params, optimizer, run }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            layout: self.params.layout().entries().to_vec(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            run: self.run.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut arrays: Vec<(&str, &[f64])> = self
            .params
            .layout()
            .entries()
            .iter()
            .map(|e| (e.name.as_str(), &self.params.as_slice()[e.offset..e.offset + e.len]))
            .collect();
        if let Some(o) = &self.optimizer {
            arrays.push(("optimizer.m", &o.m));
            arrays.push(("optimizer.v", &o.v));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, values) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| WinqError::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(WinqError::Checkpoint(format!("format version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("digest mismatch"));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| WinqError::Checkpoint(format!("metadata: {e}")))?;
        let n_arrays = r.u32()? as usize;
        let mut arrays = std::collections::HashMap::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("array name is not UTF-8"))?.to_string();
            let count = r.u64()? as usize;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| bad("array length overflow"))?)?;
            let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.insert(name, values);
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes before digest"));
        }

        let mut layout = ParamLayout::new();
        for e in &meta.layout {
            layout.push(&e.name, e.shape.clone(), e.kind)?;
            let stored = layout.get(&e.name).expect("just pushed");
            if stored.offset != e.offset || stored.len != e.len {
                return Err(WinqError::Checkpoint(format!("layout entry {} is inconsistent", e.name)));
            }
        }
        let mut data = Vec::with_capacity(layout.total_len());
        for e in layout.entries() {
            let v = arrays.remove(&e.name).ok_or_else(|| WinqError::Checkpoint(format!("missing array {}", e.name)))?;
            if v.len() != e.len {
                return Err(WinqError::Checkpoint(format!("array {} has {} values, expected {}", e.name, v.len(), e.len)));
            }
            data.extend(v);
        }
        let n = data.len();
        let params = ParamVector::new(layout, data)?;
        let optimizer = match meta.optimizer_step {
            Some(step) => {
                let m = arrays.remove("optimizer.m").ok_or_else(|| bad("missing optimizer.m"))?;
                let v = arrays.remove("optimizer.v").ok_or_else(|| bad("missing optimizer.v"))?;
                if m.len() != n || v.len() != n {
                    return Err(bad("optimizer moments do not match parameter count"));
                }
                Some(OptimizerState { m, v, step })
            }
            None => None,
        };
        Ok(Self { params, optimizer, run: meta.run })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| WinqError::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;
    use proptest::prelude::*;

    fn sample(values: Vec<f64>) -> Checkpoint {
        let mut layout = ParamLayout::new();
        layout.push("a.weight", vec![2, values.len() / 2], ParamKind::Weight).unwrap();
        let n = layout.total_len();
        let params = ParamVector::new(layout, values[..n].to_vec()).unwrap();
        let opt = OptimizerState { m: values[..n].iter().map(|x| x * 0.5).collect(), v: vec![1e-300; n], step: 42 };
        Checkpoint::new(params, Some(opt), serde_json::json!({ "step": 42, "note": "x" }))
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(raw in prop::collection::vec(any::<u64>(), 2..40)) {
            // Arbitrary bit patterns, including NaN payloads and subnormals.
            let mut values: Vec<f64> = raw.into_iter().map(f64::from_bits).collect();
            values.truncate(values.len() / 2 * 2);
            let ck = sample(values);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.params.as_slice()), bits(ck.params.as_slice()));
            let (a, b) = (back.optimizer.unwrap(), ck.optimizer.unwrap());
            prop_assert_eq!(bits(&a.m), bits(&b.m));
            prop_assert_eq!(a.step, b.step);
            prop_assert_eq!(back.run, ck.run);
        }
    }

    #[test]
    fn detects_corruption_and_version() {
        let bytes = sample(vec![1.0, 2.0, 3.0, 4.0]).to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(WinqError::Checkpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(WinqError::Checkpoint(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        let err = Checkpoint::from_bytes(&version).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
