//! Versioned binary checkpoints: network weights, raw augmentation widths,
//! mode and copy counts. Little-endian with a leading magic string and a
//! trailing CRC, like the dataset format.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::data::{crc32, ByteReader, ByteWriter, DataError};
use crate::lie::GeneratorBasis;
use crate::model::{AugerinoModel, Mode};
use crate::network::{Head, Network, NetworkKind, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl From<DataError> for CheckpointError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Truncated => CheckpointError::Truncated,
            other => CheckpointError::Corrupt(other.to_string()),
        }
    }
}

const MAGIC: &[u8; 4] = b"AUGC";
const FORMAT_VERSION: u32 = 1;

fn mode_id(m: Mode) -> u32 {
    match m {
        Mode::InvariantClassify => 0,
        Mode::Regress => 1,
        Mode::Equivariant => 2,
    }
}

fn kind_id(k: NetworkKind) -> u32 {
    match k {
        NetworkKind::CnnSmall => 0,
        NetworkKind::Mlp => 1,
        NetworkKind::CnnSeg => 2,
    }
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor) {
    w.u64(t.shape.len() as u64);
    for &s in &t.shape {
        w.u64(s as u64);
    }
    for &v in &t.data {
        w.f64(v);
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor, CheckpointError> {
    let rank = r.u64()? as usize;
    if rank > 8 {
        return Err(CheckpointError::Corrupt(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn encode(model: &AugerinoModel) -> Vec<u8> {
    let mut w = ByteWriter { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(mode_id(model.mode));
    w.u32(model.n_copies_train as u32);
    w.u32(model.n_copies_test as u32);
    w.f64(model.lambda);
    let spec = &model.network.spec;
    w.u32(kind_id(spec.kind));
    w.u64(spec.in_shape.0 as u64);
    w.u64(spec.in_shape.1 as u64);
    w.u64(spec.in_shape.2 as u64);
    w.u64(spec.widths.len() as u64);
    for &x in &spec.widths {
        w.u64(x as u64);
    }
    w.u64(spec.out_dim as u64);
    w.u32(match spec.head {
        Head::LogProb => 0,
        Head::Linear => 1,
    });
    w.u32(if model.basis.dim == 3 { 0 } else { 1 });
    w.u64(model.network.params.len() as u64);
    for p in &model.network.params {
        write_tensor(&mut w, p);
    }
    write_tensor(&mut w, &model.theta_raw);
    match &model.color_theta_raw {
        Some(c) => {
            w.u32(1);
            write_tensor(&mut w, c);
        }
        None => w.u32(0),
    }
    let crc = crc32(&w.buf[4..]);
    w.u32(crc);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<AugerinoModel, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32(&bytes[4..bytes.len() - 4]) != stored {
        return Err(CheckpointError::Checksum);
    }
    let mut r = ByteReader {
        buf: &bytes[..bytes.len() - 4],
        pos: 4,
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mode = match r.u32()? {
        0 => Mode::InvariantClassify,
        1 => Mode::Regress,
        2 => Mode::Equivariant,
        m => return Err(CheckpointError::Corrupt(format!("unknown mode {m}"))),
    };
    let n_copies_train = r.u32()? as usize;
    let n_copies_test = r.u32()? as usize;
    let lambda = r.f64()?;
    let kind = match r.u32()? {
        0 => NetworkKind::CnnSmall,
        1 => NetworkKind::Mlp,
        2 => NetworkKind::CnnSeg,
        k => return Err(CheckpointError::Corrupt(format!("unknown network kind {k}"))),
    };
    let in_shape = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
    let n_widths = r.u64()? as usize;
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(r.u64()? as usize);
    }
    let out_dim = r.u64()? as usize;
    let head = match r.u32()? {
        0 => Head::LogProb,
        1 => Head::Linear,
        h => return Err(CheckpointError::Corrupt(format!("unknown head {h}"))),
    };
    let basis = match r.u32()? {
        0 => GeneratorBasis::affine2d(),
        1 => GeneratorBasis::affine3d(),
        b => return Err(CheckpointError::Corrupt(format!("unknown basis {b}"))),
    };
    let n_params = r.u64()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_tensor(&mut r)?.param());
    }
    let theta_raw = read_tensor(&mut r)?.param();
    let color_theta_raw = match r.u32()? {
        0 => None,
        1 => Some(read_tensor(&mut r)?.param()),
        c => return Err(CheckpointError::Corrupt(format!("bad color flag {c}"))),
    };
    if r.pos != r.buf.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(AugerinoModel {
        network: Network {
            spec: NetworkSpec {
                kind,
                in_shape,
                widths,
                out_dim,
                head,
            },
            params,
        },
        theta_raw,
        basis,
        color_theta_raw,
        mode,
        n_copies_train,
        n_copies_test,
        lambda,
    })
}

pub fn save(model: &AugerinoModel, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AugerinoModel, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
