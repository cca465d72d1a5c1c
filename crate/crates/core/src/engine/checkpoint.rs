//! Resumable training checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  b"FRCLCKPT"
//! version u32      currently 1
//! len     u64      length of the JSON metadata that follows
//! meta    len bytes  {round, segments: [{name, shape}], server: {...}}
//! global  f64 x total   parameter values in segment order
//! m       f64 x total   server momentum buffer, if meta says it exists
//! v       f64 x total   server second-moment buffer, likewise
//! ```
//!
//! The segment list makes the file self-describing: loading rebuilds the
//! parameter layout without needing the architecture config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{ServerOptKind, ServerOptState};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamLayout};

const MAGIC: &[u8; 8] = b"FRCLCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SegmentMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ServerMeta {
    kind: ServerOptKind,
    beta_momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_size: f64,
    has_momentum: bool,
    has_second_moment: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    round: usize,
    segments: Vec<SegmentMeta>,
    server: ServerMeta,
}

fn write_values(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_values(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf).map_err(|_| Error::DataFormat {
        path: path.display().to_string(),
        offset: 0,
        detail: format!("checkpoint truncated: expected {count} more values"),
    })?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save_checkpoint(
    path: &Path,
    round: usize,
    global: &ModelParams,
    server: &ServerOptState,
) -> Result<()> {
    let meta = CheckpointMeta {
        round,
        segments: global
            .layout()
            .segments()
            .iter()
            .map(|s| SegmentMeta { name: s.name.clone(), shape: s.shape.clone() })
            .collect(),
        server: ServerMeta {
            kind: server.kind,
            beta_momentum: server.beta_momentum,
            beta1: server.beta1,
            beta2: server.beta2,
            eps: server.eps,
            step_size: server.step_size,
            has_momentum: server.momentum.is_some(),
            has_second_moment: server.second_moment.is_some(),
        },
    };
    let json = serde_json::to_vec(&meta)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    write_values(&mut w, global.values())?;
    if let Some(m) = &server.momentum {
        write_values(&mut w, m.values())?;
    }
    if let Some(v) = &server.second_moment {
        write_values(&mut w, v.values())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(usize, ModelParams, ServerOptState)> {
    let bad = |offset: u64, detail: String| Error::DataFormat {
        path: path.display().to_string(),
        offset,
        detail,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(0, "not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(8, format!("unsupported checkpoint version {version}")));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let json_len = u64::from_le_bytes(len8) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;

    let layout = Arc::new(ParamLayout::new(
        meta.segments.into_iter().map(|s| (s.name, s.shape)).collect(),
    ));
    let total = layout.total_len();
    let global = ModelParams::from_values(Arc::clone(&layout), read_values(&mut r, total, path)?)?;
    let momentum = if meta.server.has_momentum {
        Some(ModelParams::from_values(Arc::clone(&layout), read_values(&mut r, total, path)?)?)
    } else {
        None
    };
    let second_moment = if meta.server.has_second_moment {
        Some(ModelParams::from_values(Arc::clone(&layout), read_values(&mut r, total, path)?)?)
    } else {
        None
    };
    let server = ServerOptState {
        kind: meta.server.kind,
        beta_momentum: meta.server.beta_momentum,
        beta1: meta.server.beta1,
        beta2: meta.server.beta2,
        eps: meta.server.eps,
        step_size: meta.server.step_size,
        momentum,
        second_moment,
    };
    Ok((meta.round, global, server))
}
