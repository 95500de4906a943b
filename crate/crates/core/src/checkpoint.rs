//! Binary checkpoints.
//!
//! Layout: magic `GNGAN`, u32 format version, u32 tensor count, then for each
//! tensor a u32 name length, the UTF-8 name, u32 rows, u32 cols and the
//! row-major values as little-endian f64. Integers are little-endian.
//! Non-tensor state (layer specs, optimizer scalars, iteration, config hash)
//! is stored as small tensors in the same framing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, Adam, Layer, Mlp};
use crate::train::GnGanModel;

pub const MAGIC: &[u8; 5] = b"GNGAN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub model: GnGanModel,
}

const NETS: [&str; 3] = ["encoder", "generator", "discriminator"];
const OPTS: [&str; 3] = ["opt_ae", "opt_d", "opt_g"];

fn row(values: &[f64]) -> Matrix {
    Matrix::from_vec(1, values.len(), values.to_vec()).expect("row shape")
}

fn nets(m: &GnGanModel) -> [&Mlp; 3] {
    [&m.encoder, &m.generator, &m.discriminator]
}

fn opts(m: &GnGanModel) -> [&Adam; 3] {
    [&m.opt_ae, &m.opt_d, &m.opt_g]
}

impl Checkpoint {
    pub fn new(model: GnGanModel, config_hash: u64) -> Self {
        Self { config_hash, model }
    }

    /// Named tensors in file order.
    pub fn tensors(&self) -> Vec<(String, Matrix)> {
        let m = &self.model;
        let mut out = vec![
            (
                "meta/config_hash".to_string(),
                row(&[(self.config_hash & 0xFFFF_FFFF) as f64, (self.config_hash >> 32) as f64]),
            ),
            ("meta/iteration".to_string(), Matrix::scalar(m.iteration as f64)),
        ];
        for (name, net) in NETS.iter().zip(nets(m)) {
            for (i, l) in net.layers().iter().enumerate() {
                let spec = l.spec();
                out.push((
                    format!("{name}/layer{i}/spec"),
                    row(&[spec.in_dim as f64, spec.out_dim as f64, spec.activation.code() as f64]),
                ));
                out.push((format!("{name}/layer{i}/weight"), l.weight.clone()));
                out.push((format!("{name}/layer{i}/bias"), l.bias.clone()));
            }
        }
        for (name, opt) in OPTS.iter().zip(opts(m)) {
            out.push((
                format!("{name}/state"),
                row(&[opt.t as f64, opt.lr, opt.base_lr, opt.beta1, opt.beta2, opt.eps]),
            ));
            for (i, (mm, vv)) in opt.m.iter().zip(&opt.v).enumerate() {
                out.push((format!("{name}/m{i}"), mm.clone()));
                out.push((format!("{name}/v{i}"), vv.clone()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Tensors(Vec::with_capacity(count.min(1 << 16)));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.0.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        tensors.into_checkpoint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Errors when the stored hash differs from `expected`, unless `force`.
    pub fn check_hash(&self, expected: u64, force: bool) -> Result<()> {
        if self.config_hash != expected && !force {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {:016x}, config {expected:016x} (force to override)",
                self.config_hash
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

struct Tensors(Vec<(String, Matrix)>);

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{what}: {v} is not a count")))
    }
}

impl Tensors {
    fn get(&self, name: &str) -> Result<&Matrix> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn row(&self, name: &str, len: usize) -> Result<&[f64]> {
        let m = self.get(name)?;
        if m.shape() != (1, len) {
            return Err(Error::Checkpoint(format!("{name} has shape {:?}, want (1, {len})", m.shape())));
        }
        Ok(m.as_slice())
    }

    fn net(&self, name: &str) -> Result<Mlp> {
        let mut layers = Vec::new();
        for i in 0.. {
            let spec_name = format!("{name}/layer{i}/spec");
            if !self.0.iter().any(|(n, _)| *n == spec_name) {
                break;
            }
            let s = self.row(&spec_name, 3)?;
            let (in_dim, out_dim) = (as_count(s[0], &spec_name)?, as_count(s[1], &spec_name)?);
            let code = as_count(s[2], &spec_name)? as u32;
            let activation = Activation::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("{spec_name}: unknown activation code {code}")))?;
            let weight = self.get(&format!("{name}/layer{i}/weight"))?.clone();
            let bias = self.get(&format!("{name}/layer{i}/bias"))?.clone();
            if weight.shape() != (out_dim, in_dim) || bias.shape() != (1, out_dim) {
                return Err(Error::Checkpoint(format!("{name} layer {i}: tensor shapes disagree with spec")));
            }
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint(format!("missing tensor {name}/layer0/spec")));
        }
        Mlp::from_layers(layers).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    fn adam(&self, name: &str, params: &[&Matrix]) -> Result<Adam> {
        let s = self.row(&format!("{name}/state"), 6)?;
        let mut opt = Adam::for_params(params, s[1], s[3], s[4]);
        opt.t = as_count(s[0], name)? as u64;
        opt.base_lr = s[2];
        opt.eps = s[5];
        for (i, p) in params.iter().enumerate() {
            for (slot, kind) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let t = self.get(&format!("{name}/{kind}{i}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("{name}/{kind}{i}: shape mismatch")));
                }
                *slot = t.clone();
            }
        }
        Ok(opt)
    }

    fn into_checkpoint(self) -> Result<Checkpoint> {
        let h = self.row("meta/config_hash", 2)?;
        let config_hash = (as_count(h[0], "config hash")? as u64) | ((as_count(h[1], "config hash")? as u64) << 32);
        let iteration = as_count(self.row("meta/iteration", 1)?[0], "iteration")? as u64;
        let encoder = self.net("encoder")?;
        let generator = self.net("generator")?;
        let discriminator = self.net("discriminator")?;
        let ae_params: Vec<&Matrix> = encoder.params().into_iter().chain(generator.params()).collect();
        let opt_ae = self.adam("opt_ae", &ae_params)?;
        let opt_d = self.adam("opt_d", &discriminator.params())?;
        let opt_g = self.adam("opt_g", &generator.params())?;
        Ok(Checkpoint {
            config_hash,
            model: GnGanModel {
                encoder,
                generator,
                discriminator,
                opt_ae,
                opt_d,
                opt_g,
                iteration,
            },
        })
    }
}
