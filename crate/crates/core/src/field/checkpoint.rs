//! Versioned binary checkpoint container.
//!
//! All integers and floats are little-endian. Floats are stored as `f32`.
//!
//! | field              | type                                   |
//! |--------------------|----------------------------------------|
//! | magic              | 8 bytes, `IN2NCKPT`                    |
//! | version            | u32 (= 1)                              |
//! | pe_position_freqs  | u32                                    |
//! | pe_direction_freqs | u32                                    |
//! | hidden_layers      | u32                                    |
//! | hidden_width       | u32                                    |
//! | init_seed          | u64                                    |
//! | layer_count        | u32                                    |
//! | layers             | layer_count × (inputs u32, outputs u32, weight_offset u64, bias_offset u64) |
//! | param_count        | u64                                    |
//! | params             | param_count × f32                      |
//! | iteration          | u64                                    |
//! | has_optimizer      | u8                                     |
//! | (if 1) adam_step   | u64                                    |
//! | (if 1) first mom.  | param_count × f32                      |
//! | (if 1) second mom. | param_count × f32                      |
//! | has_rng            | u8                                     |
//! | (if 1) seed        | 32 bytes                               |
//! | (if 1) stream      | u64                                    |
//! | (if 1) word_pos    | u128                                   |
//!
//! The layer table is redundant with the config and is verified on load.

use std::path::Path;

use super::{FieldConfig, RadianceFieldParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IN2NCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: RadianceFieldParams,
    pub iteration: u64,
    pub optimizer: Option<OptimizerSnapshot>,
    pub rng: Option<RngSnapshot>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let cfg = p.config();
        let mut out = Vec::with_capacity(64 + p.len() * 12);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, cfg.pe_position_freqs as u32);
        put_u32(&mut out, cfg.pe_direction_freqs as u32);
        put_u32(&mut out, cfg.hidden_layers as u32);
        put_u32(&mut out, cfg.hidden_width as u32);
        out.extend_from_slice(&cfg.init_seed.to_le_bytes());
        let layers = p.layout().layers();
        put_u32(&mut out, layers.len() as u32);
        for l in &layers {
            put_u32(&mut out, l.inputs as u32);
            put_u32(&mut out, l.outputs as u32);
            out.extend_from_slice(&(l.weight_offset as u64).to_le_bytes());
            out.extend_from_slice(&(l.bias_offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        put_f32s(&mut out, &p.values);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                put_f32s(&mut out, &opt.first_moment);
                put_f32s(&mut out, &opt.second_moment);
            }
            None => out.push(0),
        }
        match &self.rng {
            Some(rng) => {
                out.push(1);
                out.extend_from_slice(&rng.seed);
                out.extend_from_slice(&rng.stream.to_le_bytes());
                out.extend_from_slice(&rng.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(malformed(&format!("unsupported version {version}")));
        }
        let config = FieldConfig {
            pe_position_freqs: r.u32()? as usize,
            pe_direction_freqs: r.u32()? as usize,
            hidden_layers: r.u32()? as usize,
            hidden_width: r.u32()? as usize,
            init_seed: r.u64()?,
        };
        config.validate().map_err(|e| malformed(&e.to_string()))?;
        let expected = super::FieldLayout::for_config(&config).layers();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(malformed("layer count disagrees with config"));
        }
        for l in &expected {
            let stored = (
                r.u32()? as usize,
                r.u32()? as usize,
                r.u64()? as usize,
                r.u64()? as usize,
            );
            if stored != (l.inputs, l.outputs, l.weight_offset, l.bias_offset) {
                return Err(malformed("layer table disagrees with config"));
            }
        }
        let n = r.u64()? as usize;
        let values = r.f32s(n)?;
        let params = RadianceFieldParams::from_values(config, values)
            .map_err(|e| malformed(&e.to_string()))?;
        let iteration = r.u64()?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => Some(OptimizerSnapshot {
                step: r.u64()?,
                first_moment: r.f32s(n)?,
                second_moment: r.f32s(n)?,
            }),
            f => return Err(malformed(&format!("bad optimizer flag {f}"))),
        };
        let rng = match r.u8()? {
            0 => None,
            1 => Some(RngSnapshot {
                seed: r.take(32)?.try_into().expect("32 bytes"),
                stream: r.u64()?,
                word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
            }),
            f => return Err(malformed(&format!("bad rng flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(Self {
            params,
            iteration,
            optimizer,
            rng,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    // Write-then-rename so readers never observe a partial file.
    let tmp = path.with_extension("ckpt.partial");
    std::fs::write(&tmp, checkpoint.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}

fn malformed(msg: &str) -> Error {
    Error::MalformedCheckpoint(msg.to_string())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| malformed("overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}
