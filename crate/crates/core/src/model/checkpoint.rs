//! `TNWT` weight files: config, named f32 tensors, optional Adam state.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, TreeCodec};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"TNWT";
const VERSION: u16 = 1;

/// Training position saved alongside Adam moments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct OptimizerState {
    pub step: u64,
}

pub struct Checkpoint {
    pub model: TreeCodec<f32>,
    pub lambda_index: u8,
    /// Present when the file carries Adam moments (they are loaded into the parameters).
    pub optimizer: Option<OptimizerState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(model: &TreeCodec<f32>, lambda_index: u8, optimizer: Option<OptimizerState>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = model.config();
        for v in [c.channels, c.latent_channels, c.hyper_channels, c.aff_reduction, c.context_kernel] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(lambda_index);
        let params = model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in &params {
            out.extend_from_slice(&(p.name().len() as u16).to_le_bytes());
            out.extend_from_slice(p.name().as_bytes());
            for d in p.shape().dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, p.value());
        }
        match optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                for p in &params {
                    let (m1, m2) = p.moments();
                    put_f32s(&mut out, m1);
                    put_f32s(&mut out, m2);
                    out.extend_from_slice(&p.steps().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a weight file (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut f = [0usize; 5];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            channels: f[0],
            latent_channels: f[1],
            hyper_channels: f[2],
            aff_reduction: f[3],
            context_kernel: f[4],
        };
        let lambda_index = r.u8()?;
        let mut model = TreeCodec::<f32>::new(config, 0)?;
        let count = r.u32()? as usize;
        let mut stored: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
        let mut order = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = Shape::from_dims(dims);
            let values = r.f32s(shape.numel())?;
            order.push(name.clone());
            if stored.insert(name.clone(), Tensor::from_vec(shape, values)?).is_some() {
                return Err(bad(format!("duplicate parameter `{name}`")));
            }
        }
        {
            let mut params = model.params_mut();
            if params.len() != count {
                return Err(bad(format!("expected {} parameters, file has {count}", params.len())));
            }
            for p in params.iter_mut() {
                let t = stored
                    .remove(p.name())
                    .ok_or_else(|| bad(format!("missing parameter `{}`", p.name())))?;
                p.set_value(t).map_err(|e| bad(e.to_string()))?;
            }
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut by_name: HashMap<String, (Tensor<f32>, Tensor<f32>, u64)> = HashMap::new();
                let shapes: HashMap<String, Shape> =
                    model.params().iter().map(|p| (p.name().to_string(), p.shape())).collect();
                for name in &order {
                    let s = shapes[name];
                    let m1 = Tensor::from_vec(s, r.f32s(s.numel())?)?;
                    let m2 = Tensor::from_vec(s, r.f32s(s.numel())?)?;
                    let steps = r.u64()?;
                    by_name.insert(name.clone(), (m1, m2, steps));
                }
                for p in model.params_mut() {
                    let (m1, m2, steps) = by_name.remove(p.name()).expect("all names checked above");
                    p.set_optimizer_state(m1, m2, steps)?;
                }
                Some(OptimizerState { step })
            }
            other => return Err(bad(format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            lambda_index,
            optimizer,
        })
    }

    pub fn save(path: &Path, model: &TreeCodec<f32>, lambda_index: u8, optimizer: Option<OptimizerState>) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&Checkpoint::to_bytes(model, lambda_index, optimizer))?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Checkpoint::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 8,
            latent_channels: 8,
            hyper_channels: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = TreeCodec::<f32>::new(small(), 11).unwrap();
        for p in m.params_mut().into_iter().take(3) {
            let s = p.shape();
            p.set_optimizer_state(Tensor::full(s, 0.25), Tensor::full(s, 0.5), 7).unwrap();
        }
        let bytes = Checkpoint::to_bytes(&m, 2, Some(OptimizerState { step: 99 }));
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.lambda_index, 2);
        assert_eq!(ck.optimizer, Some(OptimizerState { step: 99 }));
        assert_eq!(ck.model.fingerprint(), m.fingerprint());
        for (a, b) in m.params().iter().zip(ck.model.params()) {
            assert_eq!(a.value(), b.value());
            assert_eq!(a.moments(), b.moments());
            assert_eq!(a.steps(), b.steps());
        }
        assert_eq!(Checkpoint::to_bytes(&ck.model, 2, ck.optimizer), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = TreeCodec::<f32>::new(small(), 1).unwrap();
        let bytes = Checkpoint::to_bytes(&m, 0, None);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
