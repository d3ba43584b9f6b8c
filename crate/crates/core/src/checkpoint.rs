//! Binary parameter checkpoints.
//!
//! Layout: the magic `MOWCKPT1`, then tensors until end of file, each as
//! name length (u32 LE), UTF-8 name, rank (u32), dims (u32 each) and the
//! little-endian f64 values. Backbone tensors are named `theta/<name>`,
//! weight-net tensors `phi/<name>`.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::data::ByteReader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MOWCKPT1";
const THETA: &str = "theta/";
const PHI: &str = "phi/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub theta: ParamSet,
    /// Absent for the cross-entropy baseline.
    pub phi: Option<ParamSet>,
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch}.bin")
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_group(out: &mut Vec<u8>, prefix: &str, params: &ParamSet) -> Result<()> {
    for (name, t) in params.iter() {
        let full = format!("{prefix}{name}");
        put_u32(out, full.len())?;
        out.extend_from_slice(full.as_bytes());
        put_u32(out, t.rank())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    put_group(&mut out, THETA, &ckpt.theta)?;
    if let Some(phi) = &ckpt.phi {
        put_group(&mut out, PHI, phi)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint file (bad magic)"));
    }
    let mut theta = ParamSet::new();
    let mut phi = ParamSet::new();
    while !r.at_end() {
        let start = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(start + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return Err(Error::format(start, format!("tensor {name} has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let at = r.offset();
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, format!("tensor {name} has a zero dimension")));
            }
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(at, format!("tensor {name} is too large")))?;
            shape.push(d);
        }
        let raw = r.take(
            numel.checked_mul(8).ok_or_else(|| Error::format(r.offset(), "tensor too large"))?,
            "tensor values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        let (group, short) = if let Some(s) = name.strip_prefix(THETA) {
            (&mut theta, s)
        } else if let Some(s) = name.strip_prefix(PHI) {
            (&mut phi, s)
        } else {
            return Err(Error::format(start, format!("tensor {name} belongs to no known group")));
        };
        group
            .insert(short, tensor)
            .map_err(|_| Error::format(start, format!("duplicate tensor {name}")))?;
    }
    if theta.is_empty() {
        return Err(Error::format(r.offset(), "checkpoint holds no backbone tensors"));
    }
    Ok(Checkpoint {
        theta,
        phi: if phi.is_empty() { None } else { Some(phi) },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?).map_err(|e| e.with_context(&path.display().to_string()))
}
