//! Binary named-tensor checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "WFE1"  u32 version
//! model:  u64 embed_dim, u64 hidden_dim, u64 src_vocab, u64 tgt_vocab,
//!         f64 dropout, u8 wfe_head, u8 wfe_bias
//! loss:   f64 epsilon, u32 exponent, f64 c1, f64 c2
//! u32 entry count, then per entry:
//!         u32 name length, name bytes (UTF-8), u8 dtype (0 = f64, 1 = f32),
//!         u32 rank, u64 per dim, row-major payload
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2Seq};
use crate::tensor::Tensor;
use crate::wfe::WfeLossConfig;

pub const MAGIC: &[u8; 4] = b"WFE1";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub loss: WfeLossConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Seq2Seq, loss: &WfeLossConfig) -> Self {
        Checkpoint {
            model: model.config().clone(),
            loss: loss.clone(),
            tensors: model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let m = &self.model;
        for v in [m.embed_dim, m.hidden_dim, m.src_vocab_size, m.tgt_vocab_size] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&m.dropout.to_le_bytes());
        out.push(m.wfe_head as u8);
        out.push(m.wfe_bias as u8);
        let l = &self.loss;
        out.extend_from_slice(&l.epsilon.to_le_bytes());
        out.extend_from_slice(&l.exponent.to_le_bytes());
        out.extend_from_slice(&l.c1.to_le_bytes());
        out.extend_from_slice(&l.c2.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let model = ModelConfig {
            embed_dim: r.usize()?,
            hidden_dim: r.usize()?,
            src_vocab_size: r.usize()?,
            tgt_vocab_size: r.usize()?,
            dropout: r.f64()?,
            wfe_head: r.flag()?,
            wfe_bias: r.flag()?,
        };
        let loss = WfeLossConfig {
            epsilon: r.f64()?,
            exponent: r.u32()?,
            c1: r.f64()?,
            c2: r.f64()?,
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(len, "tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format {
                    offset: start as u64,
                    msg: format!("duplicate tensor `{name}`"),
                });
            }
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.usize()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error(0, format!("tensor `{name}` is too large")))?;
            let data = match dtype {
                DTYPE_F64 => (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?,
                DTYPE_F32 => (0..n)
                    .map(|_| r.f32().map(f64::from))
                    .collect::<Result<Vec<_>>>()?,
                other => return Err(r.error(1 + 4 + 8 * rank, format!("unknown dtype {other}"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.error(0, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            loss,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies every tensor into `model`, which must have exactly the same
    /// parameter names and shapes.
    pub fn restore_into(&self, model: &mut Seq2Seq) -> Result<()> {
        for (name, t) in &self.tensors {
            let id = model.params.id(name).ok_or_else(|| Error::Shape {
                name: name.clone(),
                expected: vec![],
                found: t.shape().to_vec(),
            })?;
            let expected = model.params.get(id).shape().to_vec();
            if expected != t.shape() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
        }
        let present: HashSet<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        if let Some((missing, t)) = model.params.iter().find(|(n, _)| !present.contains(n)) {
            return Err(Error::Shape {
                name: missing.to_string(),
                expected: t.shape().to_vec(),
                found: vec![],
            });
        }
        for (name, t) in &self.tensors {
            let id = model.params.id(name).expect("checked above");
            *model.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<(Seq2Seq, WfeLossConfig)> {
        let mut model = Seq2Seq::zeros(self.model.clone())?;
        self.restore_into(&mut model)?;
        Ok((model, self.loss))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, back: usize, msg: String) -> Error {
        Error::Format {
            offset: self.pos.saturating_sub(back) as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.error(1, format!("expected 0 or 1, found {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.array()?);
        usize::try_from(v).map_err(|_| self.error(8, format!("value {v} out of range")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn config(h: usize, wfe: bool) -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            hidden_dim: h,
            src_vocab_size: 9,
            tgt_vocab_size: 7,
            dropout: 0.3,
            wfe_head: wfe,
            wfe_bias: false,
        }
    }

    fn model(h: usize, wfe: bool) -> Seq2Seq {
        Seq2Seq::new(config(h, wfe), &mut Rng::new(11)).unwrap()
    }

    #[test]
    fn byte_exact_roundtrip() {
        for wfe in [true, false] {
            let m = model(8, wfe);
            let bytes = Checkpoint::from_model(&m, &WfeLossConfig::default()).to_bytes();
            let (back, loss) = Checkpoint::from_bytes(&bytes).unwrap().into_model().unwrap();
            assert_eq!(back.params, m.params);
            assert_eq!(loss, WfeLossConfig::default());
            assert_eq!(Checkpoint::from_model(&back, &loss).to_bytes(), bytes);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_model(&model(4, true), &WfeLossConfig::default());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = Checkpoint::from_model(&model(4, true), &WfeLossConfig::default()).to_bytes();
        for cut in (0..bytes.len()).step_by(7) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = Checkpoint::from_model(&model(4, false), &WfeLossConfig::default()).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        bytes[0] = b'W';
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let ck = Checkpoint::from_model(&model(8, true), &WfeLossConfig::default());
        let mut small = model(4, true);
        match ck.restore_into(&mut small) {
            Err(Error::Shape { name, .. }) => assert_eq!(name, "enc.l0.fwd.W"),
            other => panic!("{other:?}"),
        }
        let mut base = model(8, false);
        match ck.restore_into(&mut base) {
            Err(Error::Shape { name, .. }) => assert!(name.starts_with("wfe.")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reads_f32_payloads() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        for v in [1u64, 2, 3, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&0.0f64.to_le_bytes());
        bytes.extend_from_slice(&[0, 0]);
        let l = WfeLossConfig::default();
        bytes.extend_from_slice(&l.epsilon.to_le_bytes());
        bytes.extend_from_slice(&l.exponent.to_le_bytes());
        bytes.extend_from_slice(&l.c1.to_le_bytes());
        bytes.extend_from_slice(&l.c2.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(DTYPE_F32);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.tensors[0].1.data(), &[1.5, -2.0]);
    }
}
