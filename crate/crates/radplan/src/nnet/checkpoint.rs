//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"RDCKPT"
//! version u32 (currently 1)
//! width   u8  (4 = f32, 8 = f64 tensors)
//! config  u32 length + UTF-8 JSON (caller-defined run configuration)
//! seed    u64 master seed
//! step    u64 next training step
//! count   u32 parameter count
//! params  count * { name: u32 len + UTF-8, ndim: u8, dims: u32 each,
//!                   data: product(dims) elements }
//! opt     u8 flag; when 1: optimizer config JSON (u32 len + bytes),
//!         step u64, current_lr f64, skipped u64, then first and second
//!         moment tensors (data only, shapes follow the parameters)
//! ```
//!
//! The RNG "state" is the (seed, step) pair: every random draw in training is
//! derived from those, so a resumed run replays the exact uninterrupted
//! stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::elem::Elem;
use super::graph::ParamStore;
use super::optim::{OptimizerConfig, OptimizerState};
use super::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"RDCKPT";
const VERSION: u32 = 1;

pub struct Checkpoint<E: Elem> {
    pub config_json: String,
    pub master_seed: u64,
    pub step: u64,
    pub store: ParamStore<E>,
    pub optimizer: Option<OptimizerState<E>>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_data<E: Elem>(w: &mut impl Write, t: &Tensor<E>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * E::BYTE_WIDTH as usize);
    for v in t.data() {
        match E::BYTE_WIDTH {
            4 => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            _ => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

fn read_data<E: Elem>(r: &mut impl Read, len: usize) -> Result<Vec<E>> {
    let width = E::BYTE_WIDTH as usize;
    let mut buf = vec![0u8; len * width];
    r.read_exact(&mut buf)?;
    let mut out = Vec::with_capacity(len);
    for chunk in buf.chunks_exact(width) {
        let v = match width {
            4 => f64::from(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]])),
            _ => f64::from_le_bytes([
                chunk[0], chunk[1], chunk[2], chunk[3], chunk[4], chunk[5], chunk[6], chunk[7],
            ]),
        };
        out.push(E::from_f64(v));
    }
    Ok(out)
}

pub fn save<E: Elem>(path: &Path, ckpt: &Checkpoint<E>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    w.write_all(&[E::BYTE_WIDTH])?;
    write_str(&mut w, &ckpt.config_json)?;
    write_u64(&mut w, ckpt.master_seed)?;
    write_u64(&mut w, ckpt.step)?;
    write_u32(&mut w, ckpt.store.len() as u32)?;
    for (_, name, tensor) in ckpt.store.iter() {
        write_str(&mut w, name)?;
        w.write_all(&[tensor.dims().len() as u8])?;
        for d in tensor.dims() {
            write_u32(&mut w, *d as u32)?;
        }
        write_data(&mut w, tensor)?;
    }
    match &ckpt.optimizer {
        Some(opt) => {
            w.write_all(&[1u8])?;
            write_str(&mut w, &serde_json::to_string(&opt.config)?)?;
            write_u64(&mut w, opt.step)?;
            w.write_all(&opt.current_lr.to_le_bytes())?;
            write_u64(&mut w, opt.skipped_steps)?;
            for t in &opt.m {
                write_data(&mut w, t)?;
            }
            for t in &opt.v {
                write_data(&mut w, t)?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load<E: Elem>(path: &Path) -> Result<Checkpoint<E>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint file: {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} but this build reads version {VERSION}"
        )));
    }
    let mut width = [0u8; 1];
    r.read_exact(&mut width)?;
    if width[0] != E::BYTE_WIDTH {
        return Err(Error::Format(format!(
            "checkpoint holds {}-byte elements but {}-byte were requested",
            width[0],
            E::BYTE_WIDTH
        )));
    }
    let config_json = read_string(&mut r)?;
    let master_seed = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            dims.push(read_u32(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let data = read_data::<E>(&mut r, len)?;
        shapes.push(dims.clone());
        store.register(&name, Tensor::from_vec(&dims, data)?);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = if flag[0] == 1 {
        let config: OptimizerConfig = serde_json::from_str(&read_string(&mut r)?)?;
        let opt_step = read_u64(&mut r)?;
        let current_lr = read_f64(&mut r)?;
        let skipped = read_u64(&mut r)?;
        let mut m = Vec::with_capacity(count);
        for dims in &shapes {
            let len: usize = dims.iter().product();
            m.push(Tensor::from_vec(dims, read_data::<E>(&mut r, len)?)?);
        }
        let mut v = Vec::with_capacity(count);
        for dims in &shapes {
            let len: usize = dims.iter().product();
            v.push(Tensor::from_vec(dims, read_data::<E>(&mut r, len)?)?);
        }
        Some(OptimizerState {
            config,
            step: opt_step,
            current_lr,
            skipped_steps: skipped,
            m,
            v,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        config_json,
        master_seed,
        step,
        store,
        optimizer,
    })
}
