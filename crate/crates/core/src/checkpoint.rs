//! Text checkpoints for [`VmfClassifier`].
//!
//! A checkpoint is a single JSON document. Every real is written as a C99 hex
//! float so that save/load reproduces the classifier bit-for-bit:
//!
//! ```text
//! {
//!   "format": "vmfcal-checkpoint",
//!   "version": 1,
//!   "dim": 3,
//!   "num_classes": 2,
//!   "prior": ["0x1p-1", "0x1p-1"],
//!   "classes": [
//!     { "kappa": "0x1p+4", "mu": ["0x1p+0", "0x0p+0", "0x0p+0"] },
//!     ...
//!   ]
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmfError};
use crate::hexfloat;
use crate::vmf::{VmfClassifier, VmfParams};

pub const FORMAT_TAG: &str = "vmfcal-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClassRecord {
    #[serde(with = "hexfloat::serde_f64")]
    kappa: f64,
    #[serde(with = "hexfloat::serde_vec")]
    mu: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    dim: usize,
    num_classes: usize,
    #[serde(with = "hexfloat::serde_vec")]
    prior: Vec<f64>,
    classes: Vec<ClassRecord>,
}

pub fn to_string(clf: &VmfClassifier) -> String {
    let doc = Document {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        dim: clf.dim(),
        num_classes: clf.num_classes(),
        prior: clf.prior().to_vec(),
        classes: clf
            .classes()
            .iter()
            .map(|c| ClassRecord {
                kappa: c.kappa(),
                mu: c.mu().to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serialisation");
    s.push('\n');
    s
}

pub fn from_str(text: &str) -> Result<VmfClassifier> {
    let doc: Document =
        serde_json::from_str(text).map_err(|e| VmfError::parse("checkpoint", e.to_string()))?;
    if doc.format != FORMAT_TAG || doc.version != FORMAT_VERSION {
        return Err(VmfError::parse(
            "checkpoint",
            format!("unsupported format {:?} version {}", doc.format, doc.version),
        ));
    }
    if doc.classes.len() != doc.num_classes {
        return Err(VmfError::parse(
            "checkpoint",
            format!(
                "num_classes is {} but {} classes are listed",
                doc.num_classes,
                doc.classes.len()
            ),
        ));
    }
    let classes = doc
        .classes
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if c.mu.len() != doc.dim {
                return Err(VmfError::parse(
                    "checkpoint",
                    format!("class {i} orientation has length {}, expected {}", c.mu.len(), doc.dim),
                ));
            }
            VmfParams::new(c.kappa, c.mu)
        })
        .collect::<Result<Vec<_>>>()?;
    VmfClassifier::new(classes, doc.prior)
}

pub fn save(clf: &VmfClassifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_string(clf)).map_err(|e| VmfError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<VmfClassifier> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| VmfError::io(path, e))?;
    from_str(&text)
}
