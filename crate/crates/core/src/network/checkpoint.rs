//! Binary checkpoint format (little endian):
//!
//! ```text
//! magic "CPNT" | u16 version
//! spec: u8 layer_kind, u32 j0, u32 m, u32 k, u32 out_dim, u32 input_features,
//!       f64 sigma, u8 dense_bias, f64 bn_momentum, f64 bn_eps,
//!       f64 attenuation, u8 exclude_center,
//!       u32 stage_count, stage_count x (u32 J, u32 window, u32 outputs)
//! u64 seed | u32 tensor_count
//! tensor: u8 kind (0 param, 1 buffer), u16 name_len, name bytes,
//!         u8 ndim, ndim x u32 dims, f32 data
//! ```
//!
//! Values are stored as f32 regardless of the network precision.

use std::io::Write;
use std::path::Path;

use super::{LayerKind, Network, NetworkSpec, StageSpec};
use crate::error::{Error, Result};
use crate::layers::{Parameterized, Tensor};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPNT";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("value {v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor<T: Real>(&mut self, kind: u8, t: &Tensor<T>) -> Result<()> {
        self.u8(kind);
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {}", t.name)))?;
        self.u16(len);
        self.0.extend_from_slice(name);
        let ndim = u8::try_from(t.shape.len()).map_err(|_| Error::InvalidArgument("too many tensor dimensions".into()))?;
        self.u8(ndim);
        for &d in &t.shape {
            self.u32(d)?;
        }
        for v in &t.data {
            self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<X>(&self, message: impl Into<String>) -> Result<X> {
        Err(Error::Checkpoint {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn bool(&mut self, what: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Checkpoint {
                offset: at,
                message: format!("invalid {what} flag {v}"),
            }),
        }
    }
}

/// Serialize a network (spec, seed, parameters and running statistics).
pub fn write_checkpoint<T: Real>(net: &Network<T>) -> Result<Vec<u8>> {
    let spec = net.spec();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u8(spec.layer_kind.code());
    for v in [spec.j0, spec.m, spec.k, spec.out_dim, spec.input_features] {
        w.u32(v)?;
    }
    w.f64(spec.sigma);
    w.u8(spec.dense_bias as u8);
    w.f64(spec.bn_momentum);
    w.f64(spec.bn_eps);
    w.f64(spec.attenuation);
    w.u8(spec.exclude_center as u8);
    w.u32(spec.stages.len())?;
    for s in &spec.stages {
        w.u32(s.out_features)?;
        w.u32(s.window_size)?;
        w.u32(s.output_count)?;
    }
    w.u64(net.seed());
    let params = net.params();
    let buffers = net.buffers();
    w.u32(params.len() + buffers.len())?;
    for t in params {
        w.tensor(KIND_PARAM, t)?;
    }
    for t in buffers {
        w.tensor(KIND_BUFFER, t)?;
    }
    Ok(w.0)
}

/// Rebuild a network from checkpoint bytes.
pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic (not a checkpoint file)");
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let at = r.pos;
    let kind_code = r.u8("layer kind")?;
    let layer_kind = LayerKind::from_code(kind_code).ok_or(Error::Checkpoint {
        offset: at,
        message: format!("unknown layer kind {kind_code}"),
    })?;
    let j0 = r.u32("j0")?;
    let m = r.u32("m")?;
    let k = r.u32("k")?;
    let out_dim = r.u32("out_dim")?;
    let input_features = r.u32("input_features")?;
    let sigma = r.f64("sigma")?;
    let dense_bias = r.bool("dense_bias")?;
    let bn_momentum = r.f64("bn momentum")?;
    let bn_eps = r.f64("bn eps")?;
    let attenuation = r.f64("attenuation")?;
    let exclude_center = r.bool("exclude_center")?;
    let stage_count = r.u32("stage count")?;
    if stage_count > 1024 {
        return r.fail(format!("implausible stage count {stage_count}"));
    }
    let mut stages = Vec::with_capacity(stage_count);
    for _ in 0..stage_count {
        let j = r.u32("stage width")?;
        let win = r.u32("stage window")?;
        let q = r.u32("stage outputs")?;
        stages.push(StageSpec::new(j, win, q));
    }
    let spec = NetworkSpec {
        layer_kind,
        stages,
        j0,
        m,
        k,
        out_dim,
        input_features,
        sigma,
        dense_bias,
        bn_momentum,
        bn_eps,
        attenuation,
        exclude_center,
    };
    let spec_end = r.pos;
    let seed = r.u64("seed")?;
    let mut net = Network::<T>::new(spec, seed).map_err(|e| Error::Checkpoint {
        offset: spec_end,
        message: format!("invalid network description: {e}"),
    })?;
    let count = r.u32("tensor count")?;
    let n_params = net.params().len();
    let n_buffers = net.buffers().len();
    if count != n_params + n_buffers {
        return r.fail(format!("expected {} tensors, found {count}", n_params + n_buffers));
    }
    for idx in 0..count {
        let start = r.pos;
        let kind = r.u8("tensor kind")?;
        let expected_kind = if idx < n_params { KIND_PARAM } else { KIND_BUFFER };
        if kind != expected_kind {
            r.pos = start;
            return r.fail(format!("tensor {idx}: expected kind {expected_kind}, found {kind}"));
        }
        let len = r.u16("tensor name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Checkpoint {
                offset: name_at,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dimension")?);
        }
        let target: &mut Tensor<T> = if idx < n_params {
            net.params_mut().swap_remove(idx)
        } else {
            net.buffers_mut().swap_remove(idx - n_params)
        };
        if target.name != name || target.shape != shape {
            r.pos = start;
            return r.fail(format!(
                "tensor {idx}: expected `{}` {:?}, found `{name}` {:?}",
                target.name, target.shape, shape
            ));
        }
        let data = r.take(4 * target.data.len(), "tensor data")?;
        for (dst, chunk) in target.data.iter_mut().zip(data.chunks_exact(4)) {
            *dst = T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(net)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Network<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
