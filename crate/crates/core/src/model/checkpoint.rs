//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "OFFRCKPT"
//! version    u32 LE
//! header_len u64 LE, then header_len bytes of JSON {"config", "tokenizer"}
//! epoch      u64 LE
//! val_loss   f64 LE
//! n_params   u64 LE
//! per parameter:
//!   name_len u32 LE, name (UTF-8)
//!   ndim     u32 LE, dims (u64 LE each)
//!   data     f64 LE, row-major
//! checksum   32 bytes, SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::Tokenizer;
use super::{ModelConfig, ModelError, Result, Seq2Seq};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OFFRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tokenizer: Tokenizer,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub epoch: u64,
    pub val_loss: f64,
}

pub fn encode_checkpoint(model: &Seq2Seq, epoch: u64, val_loss: f64) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + model.params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&val_loss.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

pub fn save_checkpoint(path: &Path, model: &Seq2Seq, epoch: u64, val_loss: f64) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(model, epoch, val_loss))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| ModelError::Corrupt(format!("implausible {what} {n}")))
    }
}

struct Raw {
    header: Header,
    epoch: u64,
    val_loss: f64,
    params: BTreeMap<String, Tensor>,
}

fn parse(bytes: &[u8]) -> Result<Raw> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 32 {
        return Err(ModelError::Corrupt("truncated".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(ModelError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: r.pos,
    };
    let header_len = r.len("header length")?;
    let mut header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| ModelError::Corrupt(format!("header: {e}")))?;
    header.tokenizer.reindex();
    let epoch = r.u64()?;
    let val_loss = r.f64()?;
    let n = r.len("parameter count")?;
    let mut params = BTreeMap::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= body.len() / 8)
            .ok_or_else(|| ModelError::Corrupt(format!("parameter `{name}` is too large")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(ModelError::Corrupt(format!("duplicate parameter `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    Ok(Raw {
        header,
        epoch,
        val_loss,
        params,
    })
}

fn install(model: &mut Seq2Seq, mut params: BTreeMap<String, Tensor>) -> Result<()> {
    for p in model.params.iter_mut() {
        let t = params
            .remove(&p.name)
            .ok_or_else(|| ModelError::MissingParameter(p.name.clone()))?;
        if t.shape() != p.tensor.shape() {
            return Err(ModelError::ParameterShape {
                name: p.name.clone(),
                found: t.shape().to_vec(),
                expected: p.tensor.shape().to_vec(),
            });
        }
        p.tensor = t;
    }
    if let Some(extra) = params.into_keys().next() {
        return Err(ModelError::UnexpectedParameter(extra));
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let raw = parse(bytes)?;
    let mut model = Seq2Seq::new(raw.header.config, raw.header.tokenizer)?;
    install(&mut model, raw.params)?;
    Ok(Checkpoint {
        model,
        epoch: raw.epoch,
        val_loss: raw.val_loss,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

impl Seq2Seq {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        Ok(load_checkpoint(path)?.model)
    }

    /// Overwrite this model's weights from a checkpoint with the same architecture.
    pub fn load_parameters(&mut self, path: &Path) -> Result<()> {
        let raw = parse(&fs::read(path)?)?;
        if !raw.header.config.same_architecture(&self.config) {
            return Err(ModelError::ConfigMismatch(format!(
                "checkpoint {:?} vs model {:?}",
                raw.header.config, self.config
            )));
        }
        install(self, raw.params)?;
        self.config.seed = raw.header.config.seed;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::Tokenizer;

    fn model(seed: u64, d_model: usize) -> Seq2Seq {
        let tok = Tokenizer::build(["savings plan for travel", "generate offer :"], 1, 32);
        let mut cfg = ModelConfig::new(tok.vocab_size());
        cfg.seed = seed;
        cfg.d_model = d_model;
        cfg.d_ff = 2 * d_model;
        cfg.max_len = 32;
        Seq2Seq::new(cfg, tok).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(3, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &m, 7, 1.25).unwrap();
        let c = load_checkpoint(&path).unwrap();
        assert_eq!(c.epoch, 7);
        assert_eq!(c.val_loss, 1.25);
        assert_eq!(c.model.params, m.params);
        assert_eq!(c.model.config, m.config);
        assert_eq!(
            c.model.tokenizer.encode("savings plan"),
            m.tokenizer.encode("savings plan")
        );
        let ids = m.tokenizer.encode("generate offer : savings");
        assert_eq!(
            c.model.encode_persona(&ids).unwrap(),
            m.encode_persona(&ids).unwrap()
        );
        let mut other = model(9, 16);
        other.load_parameters(&path).unwrap();
        assert_eq!(other.params, m.params);
    }

    #[test]
    fn missing_parameter_is_named() {
        let m = model(1, 16);
        let mut raw = parse(&encode_checkpoint(&m, 0, 0.0)).unwrap();
        raw.params.remove("decoder.layer1.cross_attn.w_k");
        let mut fresh = model(1, 16);
        match install(&mut fresh, raw.params) {
            Err(ModelError::MissingParameter(n)) => assert_eq!(n, "decoder.layer1.cross_attn.w_k"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(1, 16), 0, 0.0).unwrap();
        let mut wider = model(1, 32);
        assert!(matches!(
            wider.load_parameters(&path),
            Err(ModelError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let m = model(1, 16);
        let bytes = encode_checkpoint(&m, 0, 0.0);
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(
            decode_checkpoint(&flipped),
            Err(ModelError::Corrupt(_))
        ));
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&v2),
            Err(ModelError::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 5]).is_err());
        assert!(decode_checkpoint(b"nonsense").is_err());
    }
}
