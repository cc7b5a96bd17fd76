//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "GFEFCKPT" | u32 version | u32 len + config TOML (UTF-8)
//! u64 seed | u64 series_length | u64 num_classes
//! 12 x f64 expert mean | 12 x f64 expert std
//! u32 param count, then per param:
//!   u32 len + name | u32 rank | rank x u64 dims | numel x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::error::{GfefError, Result};
use crate::features::NUM_EXPERT_FEATURES;
use crate::model::{Gfef, Layout, Standardizer};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GFEFCKPT";
pub const FORMAT_VERSION: u32 = 1;

const MAX_STRING: usize = 1 << 24;

pub fn write_checkpoint<W: Write>(model: &Gfef, w: &mut W) -> Result<()> {
    let wrap = |e: std::io::Error| GfefError::Checkpoint(e.to_string());
    w.write_all(MAGIC).map_err(wrap)?;
    w.write_u32::<LE>(FORMAT_VERSION).map_err(wrap)?;
    write_str(w, &model.config.to_toml_string()).map_err(wrap)?;
    w.write_u64::<LE>(model.seed).map_err(wrap)?;
    w.write_u64::<LE>(model.series_length() as u64).map_err(wrap)?;
    w.write_u64::<LE>(model.num_classes() as u64).map_err(wrap)?;
    for v in model.standardizer.mean.iter().chain(&model.standardizer.std) {
        w.write_f64::<LE>(*v).map_err(wrap)?;
    }
    let p = &model.params;
    w.write_u32::<LE>(p.len() as u32).map_err(wrap)?;
    for (name, t) in p.names().iter().zip(p.tensors()) {
        write_str(w, name).map_err(wrap)?;
        w.write_u32::<LE>(t.rank() as u32).map_err(wrap)?;
        for &d in t.shape() {
            w.write_u64::<LE>(d as u64).map_err(wrap)?;
        }
        for &v in t.data() {
            w.write_f32::<LE>(v).map_err(wrap)?;
        }
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LE>().map_err(truncated)? as usize;
    if n > MAX_STRING {
        return Err(GfefError::Checkpoint(format!("string length {n} is implausible")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| GfefError::Checkpoint("string is not UTF-8".into()))
}

fn truncated(e: std::io::Error) -> GfefError {
    GfefError::Checkpoint(format!("truncated or unreadable: {e}"))
}

/// Reads a checkpoint and checks every parameter against the layout its
/// config implies.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Gfef> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(GfefError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LE>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(GfefError::Checkpoint(format!("unsupported format version {version}")));
    }
    let config = RunConfig::from_toml_str(&read_str(r)?)?;
    let seed = r.read_u64::<LE>().map_err(truncated)?;
    let t = r.read_u64::<LE>().map_err(truncated)? as usize;
    let c = r.read_u64::<LE>().map_err(truncated)? as usize;
    let mut stats = [0.0; 2 * NUM_EXPERT_FEATURES];
    for v in stats.iter_mut() {
        *v = r.read_f64::<LE>().map_err(truncated)?;
    }
    let standardizer = Standardizer {
        mean: stats[..NUM_EXPERT_FEATURES].try_into().unwrap(),
        std: stats[NUM_EXPERT_FEATURES..].try_into().unwrap(),
    };
    let layout = Layout::new(&config, t, c)?;
    let expected = layout.init_params::<f32>(0);
    let count = r.read_u32::<LE>().map_err(truncated)? as usize;
    if count != expected.len() {
        return Err(GfefError::Checkpoint(format!(
            "expected {} parameters for this config, found {count}",
            expected.len()
        )));
    }
    let mut params = ParamSet::new();
    for (want_name, want) in expected.names().iter().zip(expected.tensors()) {
        let name = read_str(r)?;
        if &name != want_name {
            return Err(GfefError::Checkpoint(format!("expected parameter {want_name}, found {name}")));
        }
        let rank = r.read_u32::<LE>().map_err(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.read_u64::<LE>().map_err(truncated)? as usize);
        }
        if shape != want.shape() {
            return Err(GfefError::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {shape:?}",
                want.shape()
            )));
        }
        let mut data = vec![0f32; want.numel()];
        r.read_f32_into::<LE>(&mut data).map_err(truncated)?;
        params.insert(name, Tensor::new(shape, data));
    }
    Ok(Gfef {
        config,
        layout,
        params,
        standardizer,
        seed,
    })
}

pub fn save(model: &Gfef, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| GfefError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| GfefError::io(path, e))
}

pub fn load(path: &Path) -> Result<Gfef> {
    let f = File::open(path).map_err(|e| GfefError::io(path, e))?;
    read_checkpoint(&mut BufReader::new(f))
}
