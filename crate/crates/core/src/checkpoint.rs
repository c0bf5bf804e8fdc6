//! JSON parameter dumps shared by the variational network and the
//! downstream classifier.
//!
//! Layout: a `layer_shapes` header of `(in, out)` pairs, then flat `mu`
//! (and `rho` for variational nets) arrays. Layer `l` occupies `in * out`
//! row-major weights followed by `out` biases. Floats are written in their
//! shortest round-trip decimal form, so save/load is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bnn::Activation;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Variational,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub layer_shapes: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    pub mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    /// Model-specific extras (e.g. the classifier's uncertainty inputs).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    #[serde(flatten)]
    checkpoint: Checkpoint,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &Envelope { format_version: FORMAT_VERSION, checkpoint: self.clone() })?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let env: Envelope = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if env.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(env.format_version));
        }
        Ok(env.checkpoint)
    }
}
