//! The vMF classifier: per-class (kappa, mu) parameters, sphere projection,
//! log-density and the prior-weighted posterior with its cross-entropy loss.

use std::borrow::Cow;

use crate::error::{Result, VmfError};
use crate::linalg::{dot, norm, normalized};
use crate::specfn;

/// Tolerance on `||mu|| = 1` for stored orientations.
pub const MU_NORM_TOL: f64 = 1e-9;
/// Inputs within this distance of the unit sphere are silently re-projected.
pub const INPUT_NORM_TOL: f64 = 1e-6;
/// Tolerance on `sum(prior) = 1`.
pub const PRIOR_SUM_TOL: f64 = 1e-9;

/// `x / ||x||`; zero and non-finite inputs are rejected.
pub fn project_to_sphere(x: &[f64]) -> Result<Vec<f64>> {
    normalized(x)
}

/// Accepts a vector that is unit-norm up to [`INPUT_NORM_TOL`], re-projecting it
/// when it has drifted.
pub fn ensure_unit(x: &[f64]) -> Result<Cow<'_, [f64]>> {
    let n = norm(x);
    if !n.is_finite() || (n - 1.0).abs() > INPUT_NORM_TOL {
        return Err(VmfError::domain(format!(
            "expected a unit vector, got norm {n}"
        )));
    }
    if n == 1.0 {
        return Ok(Cow::Borrowed(x));
    }
    let y: Vec<f64> = x.iter().map(|v| v / n).collect();
    debug_assert!((norm(&y) - 1.0).abs() < 1e-12);
    Ok(Cow::Owned(y))
}

/// One class of the mixture: compactness `kappa` and unit orientation `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    kappa: f64,
    mu: Vec<f64>,
}

impl VmfParams {
    /// `mu` must already be unit-norm within [`MU_NORM_TOL`].
    pub fn new(kappa: f64, mu: Vec<f64>) -> Result<Self> {
        check_kappa(kappa)?;
        if mu.len() < 2 {
            return Err(VmfError::domain("orientation needs at least 2 dimensions"));
        }
        let n = norm(&mu);
        if !n.is_finite() || (n - 1.0).abs() > MU_NORM_TOL {
            return Err(VmfError::domain(format!(
                "orientation must be unit-norm, got norm {n}"
            )));
        }
        Ok(VmfParams { kappa, mu })
    }

    /// Builds parameters from an arbitrary non-zero direction.
    pub fn from_direction(kappa: f64, direction: &[f64]) -> Result<Self> {
        VmfParams::new(kappa, normalized(direction)?)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn log_norm_const(&self) -> Result<f64> {
        specfn::log_norm_const(self.dim(), self.kappa)
    }

    pub fn mean_resultant(&self) -> Result<f64> {
        specfn::bessel_ratio(self.dim(), self.kappa)
    }

    /// `log C_d(kappa) + kappa * <x, mu>` for a unit vector `x`.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(VmfError::domain(format!(
                "input has dimension {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let x = ensure_unit(x)?;
        Ok(self.log_norm_const()? + self.kappa * dot(&x, &self.mu))
    }

    pub(crate) fn set_kappa(&mut self, kappa: f64) {
        debug_assert!(kappa > 0.0 && kappa.is_finite());
        self.kappa = kappa;
    }

    pub(crate) fn set_mu(&mut self, mu: Vec<f64>) {
        debug_assert!((norm(&mu) - 1.0).abs() < MU_NORM_TOL);
        self.mu = mu;
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !kappa.is_finite() || kappa <= 0.0 {
        return Err(VmfError::domain(format!(
            "kappa must be positive and finite, got {kappa}"
        )));
    }
    Ok(())
}

fn check_prior(prior: &[f64], classes: usize) -> Result<()> {
    if prior.len() != classes {
        return Err(VmfError::domain(format!(
            "prior has {} entries for {classes} classes",
            prior.len()
        )));
    }
    if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(VmfError::domain("prior entries must be finite and >= 0"));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > PRIOR_SUM_TOL {
        return Err(VmfError::domain(format!("prior sums to {sum}, expected 1")));
    }
    Ok(())
}

pub fn uniform_prior(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

/// Empirical class frequencies `n_i / N`.
pub fn prior_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(VmfError::domain("class counts are all zero"));
    }
    Ok(counts
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect())
}

/// A `C`-class mixture of vMF distributions with a class prior. Class order is
/// label order.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfClassifier {
    dim: usize,
    classes: Vec<VmfParams>,
    prior: Vec<f64>,
}

impl VmfClassifier {
    pub fn new(classes: Vec<VmfParams>, prior: Vec<f64>) -> Result<Self> {
        let first = classes
            .first()
            .ok_or_else(|| VmfError::domain("classifier needs at least one class"))?;
        let dim = first.dim();
        if let Some(i) = classes.iter().position(|c| c.dim() != dim) {
            return Err(VmfError::domain(format!(
                "class {i} has dimension {}, expected {dim}",
                classes[i].dim()
            )));
        }
        check_prior(&prior, classes.len())?;
        Ok(VmfClassifier {
            dim,
            classes,
            prior,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[VmfParams] {
        &self.classes
    }

    pub fn class(&self, i: usize) -> &VmfParams {
        &self.classes[i]
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn kappas(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.kappa).collect()
    }

    /// Same classes, different prior.
    pub fn with_prior(&self, prior: Vec<f64>) -> Result<Self> {
        check_prior(&prior, self.num_classes())?;
        Ok(VmfClassifier {
            prior,
            ..self.clone()
        })
    }

    /// Same orientations and prior, replaced compactness values.
    pub fn with_kappas(&self, kappas: &[f64]) -> Result<Self> {
        if kappas.len() != self.num_classes() {
            return Err(VmfError::domain("kappa vector length does not match classes"));
        }
        let mut out = self.clone();
        for (c, &k) in out.classes.iter_mut().zip(kappas) {
            check_kappa(k)?;
            c.kappa = k;
        }
        Ok(out)
    }

    pub(crate) fn classes_mut(&mut self) -> &mut [VmfParams] {
        &mut self.classes
    }

    /// Precomputes the per-class normalisers so many samples can be scored cheaply.
    pub fn scorer(&self) -> Result<Scorer<'_>> {
        let log_norm = self
            .classes
            .iter()
            .map(VmfParams::log_norm_const)
            .collect::<Result<Vec<_>>>()?;
        let log_prior = self.prior.iter().map(|p| p.ln()).collect();
        Ok(Scorer {
            clf: self,
            log_prior,
            log_norm,
        })
    }

    pub fn posterior(&self, x_tilde: &[f64]) -> Result<Vec<f64>> {
        self.scorer()?.posterior(x_tilde)
    }

    /// Mean cross-entropy `-log p_{y}` over the batch.
    pub fn performance_loss(&self, batch: &FeatureBatch) -> Result<f64> {
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(VmfError::domain("performance loss of an empty batch"));
        }
        let scorer = self.scorer()?;
        let mut total = 0.0;
        for l in 0..batch.len() {
            let x = batch.projected(l);
            total -= scorer.log_posterior(&x)?[batch.label(l)];
        }
        Ok(total / batch.len() as f64)
    }

    pub(crate) fn check_batch(&self, batch: &FeatureBatch) -> Result<()> {
        if batch.dim() != self.dim {
            return Err(VmfError::domain(format!(
                "batch dimension {} does not match classifier dimension {}",
                batch.dim(),
                self.dim
            )));
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.num_classes()) {
            return Err(VmfError::domain(format!(
                "label {y} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// A classifier with cached `log prior` and `log C_d(kappa_i)` terms.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    clf: &'a VmfClassifier,
    log_prior: Vec<f64>,
    log_norm: Vec<f64>,
}

impl Scorer<'_> {
    /// `log prior_i + log C_d(kappa_i) + kappa_i <x, mu_i>`.
    pub fn logits(&self, x_tilde: &[f64]) -> Result<Vec<f64>> {
        if x_tilde.len() != self.clf.dim {
            return Err(VmfError::domain(format!(
                "input has dimension {}, expected {}",
                x_tilde.len(),
                self.clf.dim
            )));
        }
        let x = ensure_unit(x_tilde)?;
        Ok(self
            .clf
            .classes
            .iter()
            .zip(&self.log_prior)
            .zip(&self.log_norm)
            .map(|((c, lp), ln)| lp + ln + c.kappa * dot(&x, &c.mu))
            .collect())
    }

    pub fn log_posterior(&self, x_tilde: &[f64]) -> Result<Vec<f64>> {
        let logits = self.logits(x_tilde)?;
        let lse = crate::linalg::log_sum_exp(&logits);
        if !lse.is_finite() {
            return Err(VmfError::domain(
                "posterior undefined: no class carries prior mass",
            ));
        }
        Ok(logits.into_iter().map(|v| v - lse).collect())
    }

    pub fn posterior(&self, x_tilde: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .log_posterior(x_tilde)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Index of the largest logit (first on ties).
    pub fn predict(&self, x_tilde: &[f64]) -> Result<usize> {
        let logits = self.logits(x_tilde)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Raw feature vectors (row-major, `len x dim`) with their integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureBatch {
    /// Rejects zero-norm or non-finite feature rows.
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(VmfError::domain("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(VmfError::domain(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        for (l, row) in features.chunks_exact(dim).enumerate() {
            let n = norm(row);
            if !n.is_finite() || n == 0.0 {
                return Err(VmfError::domain(format!(
                    "feature row {l} has norm {n}; zero or non-finite rows are rejected"
                )));
            }
        }
        Ok(FeatureBatch {
            dim,
            features,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(VmfError::domain("feature rows have differing lengths"));
        }
        FeatureBatch::new(dim, rows.concat(), labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.features[l * self.dim..(l + 1) * self.dim]
    }

    pub fn label(&self, l: usize) -> usize {
        self.labels[l]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn projected(&self, l: usize) -> Vec<f64> {
        let row = self.row(l);
        let n = norm(row);
        row.iter().map(|v| v / n).collect()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureBatch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &l in indices {
            features.extend_from_slice(self.row(l));
            labels.push(self.labels[l]);
        }
        FeatureBatch {
            dim: self.dim,
            features,
            labels,
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                counts[y] += 1;
            }
        }
        counts
    }
}
