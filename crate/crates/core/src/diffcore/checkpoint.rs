//! Binary checkpoint format. See `docs/checkpoint-format.md` for the layout.
//!
//! All integers and floats are little-endian. Writing is deterministic: the
//! same store, metadata and optimizer states always produce the same bytes.

use std::io::{Read, Write};

use super::adam::{AdamConfig, AdamState};
use super::params::{ParamStore, Partition};
use super::tensor::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"XDABSACK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    /// Free-form UTF-8 metadata (the trainer stores JSON here).
    pub meta: String,
    pub params: ParamStore<F>,
    pub optimizers: Vec<AdamState<F>>,
}

fn put_u8(w: &mut Vec<u8>, v: u8) {
    w.push(v);
}
fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_values<F: Real>(w: &mut Vec<u8>, data: &[F]) {
    match F::DTYPE {
        DType::F32 => data
            .iter()
            .for_each(|x| w.extend_from_slice(&(x.f64() as f32).to_le_bytes())),
        DType::F64 => data.iter().for_each(|x| w.extend_from_slice(&x.f64().to_le_bytes())),
    }
}

pub fn encode<F: Real>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    put_u32(&mut w, VERSION);
    put_u32(&mut w, ckpt.meta.len() as u32);
    w.extend_from_slice(ckpt.meta.as_bytes());
    let store = &ckpt.params;
    put_u32(&mut w, store.len() as u32);
    for e in store.entries() {
        put_u32(&mut w, e.name.len() as u32);
        w.extend_from_slice(e.name.as_bytes());
        put_u8(&mut w, F::DTYPE.code());
        put_u8(&mut w, e.partition.code());
        put_u8(&mut w, e.trainable as u8);
        put_u32(&mut w, e.value.shape().len() as u32);
        for &d in e.value.shape() {
            put_u64(&mut w, d as u64);
        }
        put_values(&mut w, e.value.data());
    }
    put_u32(&mut w, ckpt.optimizers.len() as u32);
    for st in &ckpt.optimizers {
        put_u64(&mut w, st.t);
        put_f64(&mut w, st.config.lr);
        put_f64(&mut w, st.config.beta1);
        put_f64(&mut w, st.config.beta2);
        put_f64(&mut w, st.config.eps);
        for i in 0..store.len() {
            let m = st.m.get(i).and_then(|x| x.as_ref());
            let v = st.v.get(i).and_then(|x| x.as_ref());
            let flags = (m.is_some() as u8) | ((v.is_some() as u8) << 1);
            put_u8(&mut w, flags);
            if let Some(m) = m {
                put_values(&mut w, m.data());
            }
            if let Some(v) = v {
                put_values(&mut w, v.data());
            }
        }
    }
    w
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
    fn values<F: Real>(&mut self, dtype: DType, n: usize) -> Result<Vec<F>> {
        match dtype {
            DType::F32 => Ok(self
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()),
            DType::F64 => Ok(self
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()),
        }
    }
}

pub fn decode<F: Real>(buf: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let meta = r.string()?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut dtypes = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?;
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("bad dtype for `{name}`")))?;
        let partition = Partition::from_code(r.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("bad partition for `{name}`")))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        let data = r.values(dtype, len)?;
        params.insert(&name, Tensor::new(shape, data)?, partition, trainable)?;
        dtypes.push(dtype);
    }
    let n_opt = r.u32()? as usize;
    let mut optimizers = Vec::with_capacity(n_opt);
    for _ in 0..n_opt {
        let t = r.u64()?;
        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut st = AdamState::new(config, &params);
        st.t = t;
        for (i, &dtype) in dtypes.iter().enumerate() {
            let flags = r.u8()?;
            let shape = params.entries()[i].value.shape().to_vec();
            let len = shape.iter().product();
            if flags & 1 != 0 {
                st.m[i] = Some(Tensor::new(shape.clone(), r.values(dtype, len)?)?);
            }
            if flags & 2 != 0 {
                st.v[i] = Some(Tensor::new(shape, r.values(dtype, len)?)?);
            }
        }
        optimizers.push(st);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        meta,
        params,
        optimizers,
    })
}

pub fn write_to<F: Real>(ckpt: &Checkpoint<F>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(&encode(ckpt))
}

pub fn read_from<F: Real>(mut r: impl Read) -> Result<Checkpoint<F>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    decode(&buf)
}

pub fn save<F: Real>(ckpt: &Checkpoint<F>, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Real>(path: &std::path::Path) -> Result<Checkpoint<F>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
