//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "NLABCKPT"
//! version    u32      1
//! config     u64 length + UTF-8 JSON of the ModelConfig
//! tensors    u64 count, then per tensor:
//!              u32 name length, name, u32 rank, u64 dims…, u8 requires_grad, f64 values…
//! norms      u64 count, then per normalization site:
//!              u32 name length, name, u8 scheme code, u64 channels,
//!              f64 epsilon, f64 momentum, f64 running_mean…, f64 running_var…
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::norm::NormScheme;
use crate::resnet::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NLABCKPT";
const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("model config serializes");
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);

    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (name, t) in model.params().iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(t.requires_grad() as u8);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let norms = model.norm_states();
    out.extend_from_slice(&(norms.len() as u64).to_le_bytes());
    for (name, n) in norms {
        put_str(&mut out, name);
        out.push(n.scheme().code());
        out.extend_from_slice(&(n.num_channels() as u64).to_le_bytes());
        out.extend_from_slice(&n.epsilon().to_le_bytes());
        out.extend_from_slice(&n.momentum().to_le_bytes());
        for v in n.running_mean().iter().chain(n.running_var()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("checkpoint size overflows".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("checkpoint size overflows".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))
    }
}

/// Rebuilds a model from checkpoint bytes. Any disagreement between the
/// stored tensors and the stored architecture is a format error.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.usize()?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = Model::build(&config, 0).map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;

    let count = r.usize()?;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, architecture has {}",
            model.params().len()
        )));
    }
    for id in model.params().ids().collect::<Vec<_>>() {
        let name = r.string()?;
        if name != model.params().name(id) {
            return Err(Error::Format(format!("expected tensor '{}', found '{name}'", model.params().name(id))));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if shape != model.params().get(id).shape() {
            return Err(Error::Format(format!("tensor '{name}' has shape {shape:?}")));
        }
        let requires_grad = r.u8()? != 0;
        let data = r.f64s(shape.iter().product())?;
        *model.params_mut().get_mut(id) = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
    }

    let count = r.usize()?;
    let states = model.norm_states_mut();
    if count != states.len() {
        return Err(Error::Format(format!("checkpoint holds {count} norm states, architecture has {}", states.len())));
    }
    for state in states {
        let _name = r.string()?;
        let scheme = NormScheme::from_code(r.u8()?)?;
        let channels = r.usize()?;
        if scheme != state.scheme() || channels != state.num_channels() {
            return Err(Error::Format(format!("norm state mismatch: {scheme} x{channels}")));
        }
        let eps = r.f64()?;
        let _momentum = r.f64()?;
        state.set_epsilon(eps).map_err(|e| Error::Format(e.to_string()))?;
        let mean = r.f64s(channels)?;
        let var = r.f64s(channels)?;
        state.set_running_stats(mean, var).map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::Mode;
    use crate::tape::Tape;

    #[test]
    fn round_trip_preserves_everything() {
        let config = ModelConfig::preset("resnet-tiny", NormScheme::BatchNorm, 10).unwrap();
        let mut model = Model::build(&config, 9).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![2, 3, 8, 8], 0.25).unwrap());
        model.forward(&mut tape, x).unwrap();
        model.freeze_norm_affine();
        let bytes = encode(&model);
        let mut back = decode(&bytes).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.norm_states(), model.norm_states());
        back.set_mode(Mode::Train);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let config = ModelConfig::preset("resnet-tiny", NormScheme::None, 10).unwrap();
        let model = Model::build(&config, 1).unwrap();
        let bytes = encode(&model);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(decode(b"garbage!"), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }
}
