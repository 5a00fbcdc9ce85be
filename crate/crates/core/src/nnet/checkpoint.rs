//! Self-describing array container used for model checkpoints and fitted
//! baseline models.
//!
//! Layout: the magic line `OBJDIST-CONTAINER 1`, one line of JSON header
//! `{"kind": .., "meta": .., "arrays": [{"name": .., "shape": [..]}, ..]}`,
//! then the values of every array in header order as little-endian `f64`.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, NnetError, ParamSet, Tensor};

pub const MAGIC: &str = "OBJDIST-CONTAINER 1";
pub const MODEL_KIND: &str = "distance-model";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a container file (bad magic line)")]
    BadMagic,
    #[error("container header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("container data ends early")]
    Truncated,
    #[error("trailing bytes after container data")]
    TrailingData,
    #[error("expected a {expected:?} container, found {found:?}")]
    WrongKind { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] NnetError),
}

#[derive(Debug, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: ParamSet,
}

pub fn write_container<W: Write>(
    mut out: W,
    kind: &str,
    meta: &serde_json::Value,
    arrays: &ParamSet,
) -> io::Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta: meta.clone(),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArraySpec {
                name: name.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    writeln!(out, "{MAGIC}")?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, t) in arrays.iter() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()
}

pub fn read_container<R: Read>(source: R) -> Result<Container, CheckpointError> {
    let mut r = BufReader::new(source);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line)?;
    let mut arrays = ParamSet::new();
    for spec in header.arrays {
        let mut t = Tensor::zeros(&spec.shape);
        let mut buf = vec![0u8; t.len() * 8];
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
            _ => CheckpointError::Io(e),
        })?;
        for (v, chunk) in t.data.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        arrays.push(spec.name, t);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(CheckpointError::TrailingData);
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        arrays,
    })
}

pub fn save_container(
    path: &Path,
    kind: &str,
    meta: &serde_json::Value,
    arrays: &ParamSet,
) -> Result<(), CheckpointError> {
    let file = fs::File::create(path)?;
    write_container(io::BufWriter::new(file), kind, meta, arrays)?;
    Ok(())
}

pub fn load_container(path: &Path, expected_kind: &str) -> Result<Container, CheckpointError> {
    let c = read_container(fs::File::open(path)?)?;
    if c.kind != expected_kind {
        return Err(CheckpointError::WrongKind {
            expected: expected_kind.to_string(),
            found: c.kind,
        });
    }
    Ok(c)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
}

pub fn write_model<W: Write>(out: W, model: &Model) -> io::Result<()> {
    let meta = serde_json::to_value(ModelMeta {
        config: model.config().clone(),
    })?;
    write_container(out, MODEL_KIND, &meta, model.params())
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    let file = fs::File::create(path)?;
    write_model(io::BufWriter::new(file), model)?;
    Ok(())
}

pub fn model_from_container(c: Container) -> Result<Model, CheckpointError> {
    if c.kind != MODEL_KIND {
        return Err(CheckpointError::WrongKind {
            expected: MODEL_KIND.to_string(),
            found: c.kind,
        });
    }
    let meta: ModelMeta = serde_json::from_value(c.meta)?;
    Ok(Model::from_params(meta.config, c.arrays)?)
}

pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    model_from_container(read_container(fs::File::open(path)?)?)
}
