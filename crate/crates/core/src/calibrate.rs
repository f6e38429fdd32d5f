//! Post-training compactness calibration.
//!
//! Each class's average directed overlap `o_i` is min-max rescaled onto the
//! range of the learned compactness values, then interpolated geometrically
//! with the learned value:
//!
//! ```text
//! ô_i = (o_i - o_min) / (o_max - o_min) * (k_max - k_min) + k_min
//! k̂_i = k_i^alpha * ô_i^(1 - alpha)
//! ```
//!
//! Classes that overlap heavily with the rest therefore gain compactness.
//! Linear, tau-normalised and causal classifier weights are mapped to
//! `(kappa, mu)` pairs, calibrated the same way and rebuilt.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmfError};
use crate::linalg::norm;
use crate::overlap::overlap_matrix;
use crate::vmf::{uniform_prior, VmfClassifier, VmfParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Vmf,
    Linear,
    TauNorm,
    Causal,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Vmf => "vmf",
            ClassifierKind::Linear => "linear",
            ClassifierKind::TauNorm => "tau_norm",
            ClassifierKind::Causal => "causal",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = VmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vmf" => Ok(ClassifierKind::Vmf),
            "linear" => Ok(ClassifierKind::Linear),
            "tau_norm" => Ok(ClassifierKind::TauNorm),
            "causal" => Ok(ClassifierKind::Causal),
            other => Err(VmfError::parse("classifier kind", format!("unknown kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Weight on the learned compactness; 1 leaves the classifier unchanged.
    pub alpha: f64,
    pub source_kind: ClassifierKind,
    /// Exponent of the tau-normalised classifier (`kappa = ||w||^(1 - tau)`).
    pub tau: f64,
    /// Offset of the causal classifier (`kappa = ||w|| / (||w|| + gamma)`).
    pub gamma: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            alpha: 1.0,
            source_kind: ClassifierKind::Vmf,
            tau: 0.7,
            gamma: 1.0 / 32.0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(VmfError::domain(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        match self.source_kind {
            ClassifierKind::TauNorm if !(0.0..1.0).contains(&self.tau) => Err(VmfError::domain(
                format!("tau must lie in [0, 1), got {}", self.tau),
            )),
            ClassifierKind::Causal if !(self.gamma.is_finite() && self.gamma > 0.0) => Err(
                VmfError::domain(format!("gamma must be positive, got {}", self.gamma)),
            ),
            _ => Ok(()),
        }
    }
}

/// The interpolation grid 0.0, 0.1, ..., 1.0.
pub fn alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// A `C x d` matrix of classifier weight rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(VmfError::domain(format!(
                "{} weights do not form rows of width {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VmfError::domain("weight matrix has non-finite entries"));
        }
        Ok(WeightMatrix { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(VmfError::domain("weight rows have differing lengths"));
        }
        WeightMatrix::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Class scores `<w_i, x>` (no bias).
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.rows().map(|w| crate::linalg::dot(w, x)).collect()
    }
}

/// Weights of one of the supported classifier families.
#[derive(Debug, Clone, PartialEq)]
pub enum GenericClassifierWeights {
    Vmf(VmfClassifier),
    Matrix {
        kind: ClassifierKind,
        weights: WeightMatrix,
    },
}

impl GenericClassifierWeights {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            GenericClassifierWeights::Vmf(_) => ClassifierKind::Vmf,
            GenericClassifierWeights::Matrix { kind, .. } => *kind,
        }
    }

    pub fn matrix(kind: ClassifierKind, weights: WeightMatrix) -> Result<Self> {
        if kind == ClassifierKind::Vmf {
            return Err(VmfError::domain("vmf weights are not a plain matrix"));
        }
        Ok(GenericClassifierWeights::Matrix { kind, weights })
    }
}

/// `kappa` from a weight-row norm for the given family.
pub fn kappa_from_norm(kind: ClassifierKind, n: f64, cfg: &CalibrationConfig) -> f64 {
    match kind {
        ClassifierKind::Vmf | ClassifierKind::Linear => n,
        ClassifierKind::TauNorm => n.powf(1.0 - cfg.tau),
        ClassifierKind::Causal => n / (n + cfg.gamma),
    }
}

/// Inverse of [`kappa_from_norm`].
pub fn norm_from_kappa(kind: ClassifierKind, kappa: f64, cfg: &CalibrationConfig) -> Result<f64> {
    match kind {
        ClassifierKind::Vmf | ClassifierKind::Linear => Ok(kappa),
        ClassifierKind::TauNorm => Ok(kappa.powf(1.0 / (1.0 - cfg.tau))),
        ClassifierKind::Causal => {
            if !(kappa > 0.0 && kappa < 1.0) {
                return Err(VmfError::domain(format!(
                    "causal compactness must lie in (0, 1) to be inverted, got {kappa}"
                )));
            }
            Ok(cfg.gamma * kappa / (1.0 - kappa))
        }
    }
}

/// Expresses the weights as a vMF classifier with a uniform prior.
pub fn to_vmf(gw: &GenericClassifierWeights, cfg: &CalibrationConfig) -> Result<VmfClassifier> {
    cfg.validate()?;
    match gw {
        GenericClassifierWeights::Vmf(clf) => Ok(clf.clone()),
        GenericClassifierWeights::Matrix { kind, weights } => {
            let classes = weights
                .rows()
                .enumerate()
                .map(|(i, w)| {
                    let n = norm(w);
                    if n == 0.0 {
                        return Err(VmfError::domain(format!("weight row {i} has zero norm")));
                    }
                    let mu = w.iter().map(|v| v / n).collect();
                    VmfParams::new(kappa_from_norm(*kind, n, cfg), mu)
                        .map_err(|e| VmfError::domain(format!("class {i}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let c = classes.len();
            VmfClassifier::new(classes, uniform_prior(c))
        }
    }
}

/// Result of the min-max rescaling. When every overlap (or every kappa) is equal
/// the rescaling is undefined and `values` falls back to the kappas themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedOverlaps {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

pub fn normalize_overlaps(o: &[f64], kappas: &[f64]) -> Result<NormalizedOverlaps> {
    if o.len() != kappas.len() {
        return Err(VmfError::domain("overlap and kappa vectors differ in length"));
    }
    if o.len() < 2 {
        return Err(VmfError::domain("normalisation needs at least 2 classes"));
    }
    let (o_min, o_max) = min_max(o);
    let (k_min, k_max) = min_max(kappas);
    if o_max == o_min || k_max == k_min {
        return Ok(NormalizedOverlaps {
            values: kappas.to_vec(),
            degenerate: true,
        });
    }
    let values = o
        .iter()
        .map(|&oi| {
            if oi == o_max {
                k_max
            } else {
                (oi - o_min) / (o_max - o_min) * (k_max - k_min) + k_min
            }
        })
        .collect();
    Ok(NormalizedOverlaps {
        values,
        degenerate: false,
    })
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// `k̂_i = k_i^alpha * ô_i^(1 - alpha)` applied elementwise.
pub fn interpolate_kappas(kappas: &[f64], normalized: &[f64], alpha: f64) -> Result<Vec<f64>> {
    kappas
        .iter()
        .zip(normalized)
        .enumerate()
        .map(|(i, (&k, &o))| {
            if o.is_nan() || o <= 0.0 {
                return Err(VmfError::domain(format!(
                    "normalised overlap of class {i} is {o}; geometric interpolation needs > 0"
                )));
            }
            Ok(k.powf(alpha) * o.powf(1.0 - alpha))
        })
        .collect()
}

/// The calibrated compactness values for a classifier.
pub fn calibrated_kappas(clf: &VmfClassifier, alpha: f64) -> Result<Vec<f64>> {
    let overlaps = overlap_matrix(clf)?;
    let kappas = clf.kappas();
    let norm = normalize_overlaps(overlaps.row_avg(), &kappas)?;
    if norm.degenerate {
        log::warn!("overlap normalisation is degenerate; calibration falls back to identity");
        return Ok(kappas);
    }
    interpolate_kappas(&kappas, &norm.values, alpha)
}

/// Calibrated classifier: orientations unchanged, compactness reset, prior
/// replaced by `test_prior` (uniform when `None`).
pub fn calibrate(
    clf: &VmfClassifier,
    cfg: &CalibrationConfig,
    test_prior: Option<&[f64]>,
) -> Result<VmfClassifier> {
    cfg.validate()?;
    let kappas = calibrated_kappas(clf, cfg.alpha)?;
    let prior = match test_prior {
        Some(p) => p.to_vec(),
        None => uniform_prior(clf.num_classes()),
    };
    clf.with_kappas(&kappas)?.with_prior(prior)
}

/// Converts to `(kappa, mu)`, calibrates and rebuilds weights of the same family.
/// Rebuilt rows are `||w_i|| mu_i` with the norm recovered from the calibrated
/// compactness through the family's inverse map.
pub fn calibrate_generic(
    gw: &GenericClassifierWeights,
    cfg: &CalibrationConfig,
    test_prior: Option<&[f64]>,
) -> Result<GenericClassifierWeights> {
    if gw.kind() != cfg.source_kind {
        return Err(VmfError::domain(format!(
            "configuration is for {} weights but {} weights were given",
            cfg.source_kind,
            gw.kind()
        )));
    }
    let vmf = to_vmf(gw, cfg)?;
    let calibrated = calibrate(&vmf, cfg, test_prior)?;
    match gw {
        GenericClassifierWeights::Vmf(_) => Ok(GenericClassifierWeights::Vmf(calibrated)),
        GenericClassifierWeights::Matrix { kind, weights } => {
            let mut data = Vec::with_capacity(weights.num_rows() * weights.dim());
            for (i, class) in calibrated.classes().iter().enumerate() {
                let n = norm_from_kappa(*kind, class.kappa(), cfg)
                    .map_err(|e| VmfError::domain(format!("class {i}: {e}")))?;
                data.extend(class.mu().iter().map(|m| n * m));
            }
            Ok(GenericClassifierWeights::Matrix {
                kind: *kind,
                weights: WeightMatrix::new(weights.dim(), data)?,
            })
        }
    }
}

/// Writes a weight matrix as CSV: a `# kind=...,tau=...,gamma=...` header line,
/// then one comma-separated row per class.
pub fn write_weights_csv(
    mut w: impl Write,
    kind: ClassifierKind,
    weights: &WeightMatrix,
    cfg: &CalibrationConfig,
) -> std::io::Result<()> {
    match kind {
        ClassifierKind::TauNorm => writeln!(w, "# kind={kind},tau={}", cfg.tau)?,
        ClassifierKind::Causal => writeln!(w, "# kind={kind},gamma={}", cfg.gamma)?,
        _ => writeln!(w, "# kind={kind}")?,
    }
    for row in weights.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Parsed weight file: the family, any hyper-parameters named in the header and
/// the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub kind: ClassifierKind,
    pub tau: Option<f64>,
    pub gamma: Option<f64>,
    pub weights: WeightMatrix,
}

pub fn read_weights_csv(r: impl BufRead) -> Result<WeightFile> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| VmfError::parse("weight file", "empty file"))?
        .map_err(|e| VmfError::parse("weight file", e.to_string()))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| VmfError::parse("weight file", "line 1: expected '# kind=...' header"))?;
    let mut kind = None;
    let mut tau = None;
    let mut gamma = None;
    for field in header.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        let (key, value) = field.split_once('=').ok_or_else(|| {
            VmfError::parse("weight file", format!("line 1: malformed field {field:?}"))
        })?;
        let number = || {
            value
                .parse::<f64>()
                .map_err(|_| VmfError::parse("weight file", format!("line 1: bad number in {field:?}")))
        };
        match key.trim() {
            "kind" => kind = Some(value.trim().parse::<ClassifierKind>()?),
            "tau" => tau = Some(number()?),
            "gamma" => gamma = Some(number()?),
            other => {
                return Err(VmfError::parse(
                    "weight file",
                    format!("line 1: unknown header field {other:?}"),
                ))
            }
        }
    }
    let kind = kind.ok_or_else(|| VmfError::parse("weight file", "line 1: missing kind"))?;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| VmfError::parse("weight file", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| VmfError::parse("weight file", format!("line {}: {e}", n + 2)))?;
        rows.push(row);
    }
    Ok(WeightFile {
        kind,
        tau,
        gamma,
        weights: WeightMatrix::from_rows(&rows)?,
    })
}
