//! Binary model and optimizer-state files.
//!
//! Model: `MMDL`, version byte, config (`in_channels`, `out_classes`, `depth`,
//! `base_channels` as u32 LE, norm byte 0 = batch / 1 = group, `groups` u32
//! LE, `seed` u64 LE), then every parameter as f32 LE in declaration order,
//! then, for batch norm only, running mean and variance per norm layer.
//!
//! Optimizer: `MOPT`, version byte, step u64 LE, learning rate, beta1,
//! beta2, eps as f64 LE, then first and second moments as f32 LE.

use std::fs;
use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::error::NnError;
use crate::tensor::Tensor;
use crate::unet::{build_unet, NormKind, UNet, UNetConfig};

const MODEL_MAGIC: &[u8; 4] = b"MMDL";
const OPT_MAGIC: &[u8; 4] = b"MOPT";
const VERSION: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format(format!(
                "truncated: needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, NnError> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), NnError> {
        let m = self.take(4)?;
        if m != magic {
            return Err(NnError::Format(format!("bad magic {m:?}, expected {magic:?}")));
        }
        let v = self.u8()?;
        if v != VERSION {
            return Err(NnError::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), NnError> {
        if self.pos != self.buf.len() {
            return Err(NnError::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_model(model: &UNet<f32>) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(VERSION);
    for v in [cfg.in_channels, cfg.out_classes, cfg.depth, cfg.base_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(match cfg.norm {
        NormKind::Batch => 0,
        NormKind::Group => 1,
    });
    out.extend_from_slice(&(cfg.groups as u32).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    for p in model.params() {
        put_f32s(&mut out, p.data());
    }
    if cfg.norm == NormKind::Batch {
        for (m, v) in model.running_stats() {
            put_f32s(&mut out, m);
            put_f32s(&mut out, v);
        }
    }
    out
}

pub fn decode_model(buf: &[u8]) -> Result<UNet<f32>, NnError> {
    let mut r = Reader { buf, pos: 0 };
    r.header(MODEL_MAGIC)?;
    let in_channels = r.u32()? as usize;
    let out_classes = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let norm = match r.u8()? {
        0 => NormKind::Batch,
        1 => NormKind::Group,
        b => return Err(NnError::Format(format!("unknown norm code {b}"))),
    };
    let groups = r.u32()? as usize;
    let seed = r.u64()?;
    let cfg = UNetConfig { in_channels, out_classes, depth, base_channels, norm, groups, seed };
    let mut model = build_unet::<f32>(&cfg)?;
    let expected = r.pos + 4 * model.param_count()
        + if norm == NormKind::Batch {
            8 * model.running_stats().iter().map(|(m, _)| m.len()).sum::<usize>()
        } else {
            0
        };
    if buf.len() != expected {
        return Err(NnError::Format(format!(
            "size mismatch: config implies {expected} bytes, file has {}",
            buf.len()
        )));
    }
    let params = model
        .specs()
        .iter()
        .map(|s| Tensor::new(s.shape.clone(), r.f32s(s.shape.iter().product())?))
        .collect::<Result<Vec<_>, _>>()?;
    model.set_params(params)?;
    if norm == NormKind::Batch {
        for (m, v) in model.running_stats_mut() {
            *m = r.f32s(m.len())?;
            *v = r.f32s(v.len())?;
        }
    }
    r.finish()?;
    Ok(model)
}

pub fn save_model(model: &UNet<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<UNet<f32>, NnError> {
    decode_model(&fs::read(path)?)
}

pub fn encode_adam(state: &AdamState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPT_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&state.step.to_le_bytes());
    let c = state.config;
    for v in [c.learning_rate, c.beta1, c.beta2, c.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in state.first.iter().chain(&state.second) {
        put_f32s(&mut out, m);
    }
    out
}

/// Decodes optimizer state for a model whose parameters are `params`.
pub fn decode_adam(buf: &[u8], params: &[Tensor<f32>]) -> Result<AdamState<f32>, NnError> {
    let mut r = Reader { buf, pos: 0 };
    r.header(OPT_MAGIC)?;
    let step = r.u64()?;
    let config = AdamConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let mut state = AdamState::new(config, params);
    state.step = step;
    for m in state.first.iter_mut().chain(state.second.iter_mut()) {
        *m = r.f32s(m.len())?;
    }
    r.finish()?;
    Ok(state)
}

pub fn save_adam(state: &AdamState<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    fs::write(path, encode_adam(state))?;
    Ok(())
}

pub fn load_adam(path: impl AsRef<Path>, params: &[Tensor<f32>]) -> Result<AdamState<f32>, NnError> {
    decode_adam(&fs::read(path)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_model_reports_size() {
        let model = build_unet::<f32>(&UNetConfig::default()).unwrap();
        let bytes = encode_model(&model);
        let err = decode_model(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
        let err = decode_model(&bytes[..3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn wrong_magic_or_version_is_rejected() {
        let model = build_unet::<f32>(&UNetConfig::default()).unwrap();
        let mut bytes = encode_model(&model);
        bytes[4] = 9;
        assert!(decode_model(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(decode_model(&bytes).unwrap_err().to_string().contains("magic"));
    }
}
