//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "CTPCKPT\0"
//! version    u32       CHECKPOINT_VERSION
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "shape"}]}
//! blocks     per tensor: u64 element count, then that many f64 values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CtpError, Result};
use crate::numerics::mlp::{Activation, Linear, Mlp, Parameterized};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        self.tensors.push((name.into(), t.cast()));
    }

    /// Adds every parameter of `model` under `prefix.`.
    pub fn push_params<S: Scalar, M: Parameterized<S> + ?Sized>(&mut self, prefix: &str, model: &M) {
        for (name, t) in model.param_names().into_iter().zip(model.params()) {
            self.push(format!("{prefix}.{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CtpError::contract(format!("checkpoint has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| 8 + 8 * t.len()).sum();
        let mut out = Vec::with_capacity(20 + meta.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in &self.tensors {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        let bad = |detail: &str| CtpError::Format {
            path: origin.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut r = Reader { buf, pos: 0 };
        if r.take(8) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let meta_len = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let meta = r.take(meta_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(meta).map_err(|e| bad(&format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n = r.u64().ok_or_else(|| bad("truncated block"))? as usize;
            if n != th.shape.iter().product::<usize>() {
                return Err(bad(&format!("block size mismatch for {}", th.name)));
            }
            let raw = r
                .take(n.checked_mul(8).ok_or_else(|| bad("block too large"))?)
                .ok_or_else(|| bad("truncated block"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((th.name, Tensor::new(th.shape, data)?));
        }
        if r.pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CtpError::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(CtpError::contract(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MlpMeta {
    sizes: Vec<usize>,
    activation: Activation,
}

/// Writes a network under `prefix` (layer shapes go into `meta[prefix]`).
pub fn store_mlp<S: Scalar>(ck: &mut Checkpoint, prefix: &str, net: &Mlp<S>) {
    let meta = MlpMeta {
        sizes: net.sizes(),
        activation: net.activation(),
    };
    if let serde_json::Value::Object(map) = &mut ck.meta {
        map.insert(
            format!("{prefix}.layout"),
            serde_json::to_value(meta).expect("layout serializes"),
        );
    }
    ck.push_params(prefix, net);
}

pub fn restore_mlp<S: Scalar>(ck: &Checkpoint, prefix: &str) -> Result<Mlp<S>> {
    let layout = ck
        .meta
        .get(format!("{prefix}.layout"))
        .cloned()
        .ok_or_else(|| CtpError::contract(format!("checkpoint has no layout for {prefix}")))?;
    let meta: MlpMeta = serde_json::from_value(layout)
        .map_err(|e| CtpError::contract(format!("bad layout for {prefix}: {e}")))?;
    let layers = (0..meta.sizes.len().saturating_sub(1))
        .map(|i| {
            let weight = ck.get(&format!("{prefix}.layer{i}.weight"))?.cast();
            let bias = ck.get(&format!("{prefix}.layer{i}.bias"))?.cast();
            Ok(Linear { weight, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    let net = Mlp::from_layers(layers, meta.activation)?;
    if net.sizes() != meta.sizes {
        return Err(CtpError::contract(format!("layout mismatch for {prefix}")));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::new(&[3, 7, 2], Activation::Silu, &mut rng).unwrap();
        let mut ck = Checkpoint::new("test", serde_json::json!({"note": "x"}));
        store_mlp(&mut ck, "net", &net);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let net2: Mlp<f64> = restore_mlp(&back, "net").unwrap();
        assert_eq!(net2, net);
        let x = Tensor::matrix(1, 3, vec![0.1, 0.2, -0.3]).unwrap();
        let (a, b) = (net.forward(&x).unwrap(), net2.forward(&x).unwrap());
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new("t", serde_json::json!({}));
        ck.push("a", &Tensor::<f64>::zeros(&[2, 2]));
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("m")).is_err());
        let mut v2 = ck.to_bytes();
        v2[8] = 9;
        let err = Checkpoint::from_bytes(&v2, Path::new("m")).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, CtpError::MissingArtifact(_)));
    }
}
