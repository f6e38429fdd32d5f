//! Training objective: cross-entropy on the vMF posterior plus the two
//! overlap-based regularisers, all with closed-form gradients.
//!
//! * `L_icd`: mean directed overlap between classifier classes.
//! * `L_cfc`: mean `1 - o(class -> batch feature direction)` over the classes
//!   present in the batch, with the feature-side compactness tied to the class.
//!
//! Orientation gradients are returned in ambient coordinates. Feature
//! gradients are with respect to the raw (unprojected) feature rows.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmfError};
use crate::linalg::{axpy, dot, norm};
use crate::overlap::{overlap_from_kl, pair_partials, ClassStats};
use crate::vmf::{FeatureBatch, VmfClassifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub enable_icd: bool,
    pub enable_cfc: bool,
    /// Sum sphere-projected rather than raw features when estimating a class's
    /// batch direction. Off by default.
    pub cfc_projected_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.2,
            enable_icd: true,
            enable_cfc: true,
            cfc_projected_features: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(VmfError::domain(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Only the cross-entropy term.
    pub fn perf_only() -> Self {
        LossConfig {
            lambda: 0.0,
            enable_icd: false,
            enable_cfc: false,
            cfc_projected_features: false,
        }
    }
}

/// Gradient over every class's `kappa` and `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    dim: usize,
    pub kappa: Vec<f64>,
    /// Row-major `C x d`.
    pub mu: Vec<f64>,
}

impl ClassifierGrads {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ClassifierGrads {
            dim,
            kappa: vec![0.0; classes],
            mu: vec![0.0; classes * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.kappa.len()
    }

    pub fn mu_row(&self, i: usize) -> &[f64] {
        &self.mu[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mu_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.mu[i * self.dim..(i + 1) * self.dim]
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &ClassifierGrads) {
        axpy(s, &other.kappa, &mut self.kappa);
        axpy(s, &other.mu, &mut self.mu);
    }

    pub fn is_finite(&self) -> bool {
        self.kappa.iter().chain(&self.mu).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub classifier: ClassifierGrads,
    /// Row-major `N x d`, one row per batch sample.
    pub features: Vec<f64>,
}

/// Loss terms for one mini-batch. `icd` and `cfc` are always evaluated for
/// reporting; they enter `total` and `grads` only when enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub perf: f64,
    pub icd: f64,
    pub cfc: f64,
    pub total: f64,
    pub grads: LossGrads,
}

pub fn icd_loss(clf: &VmfClassifier) -> Result<f64> {
    Ok(crate::overlap::overlap_matrix(clf)?.mean())
}

/// `L_icd` and its gradient, accumulated over every ordered pair `(i, j)`.
pub fn icd_loss_with_grads(clf: &VmfClassifier) -> Result<(f64, ClassifierGrads)> {
    let c = clf.num_classes();
    if c < 2 {
        return Err(VmfError::domain("inter-class loss needs at least 2 classes"));
    }
    let stats = ClassStats::for_classifier(clf)?;
    let weight = 1.0 / (c * (c - 1)) as f64;
    let mut grads = ClassifierGrads::zeros(c, clf.dim());
    let mut loss = 0.0;
    for i in 0..c {
        let mu_i = clf.class(i).mu();
        for j in 0..c {
            if i == j {
                continue;
            }
            let mu_j = clf.class(j).mu();
            let p = pair_partials(&stats[i], &stats[j], dot(mu_i, mu_j));
            loss += weight * p.overlap;
            grads.kappa[i] += weight * p.d_kappa_i;
            grads.kappa[j] += weight * p.d_kappa_j;
            axpy(weight * p.d_cos, mu_j, grads.mu_row_mut(i));
            axpy(weight * p.d_cos, mu_i, grads.mu_row_mut(j));
        }
    }
    Ok((loss, grads))
}

/// Normalised sum of the raw features labelled `class_id`. `Ok(None)` when the
/// class does not occur in the batch.
pub fn feature_direction(batch: &FeatureBatch, class_id: usize) -> Result<Option<Vec<f64>>> {
    Ok(class_resultant(batch, class_id, false)
        .map(|s| direction_of(&s, class_id))
        .transpose()?
        .map(|(dir, _)| dir))
}

fn class_resultant(batch: &FeatureBatch, class_id: usize, projected: bool) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; batch.dim()];
    let mut seen = false;
    for l in (0..batch.len()).filter(|&l| batch.label(l) == class_id) {
        seen = true;
        if projected {
            let row = batch.row(l);
            axpy(1.0 / norm(row), row, &mut sum);
        } else {
            axpy(1.0, batch.row(l), &mut sum);
        }
    }
    seen.then_some(sum)
}

fn direction_of(sum: &[f64], class_id: usize) -> Result<(Vec<f64>, f64)> {
    let n = norm(sum);
    if n == 0.0 || !n.is_finite() {
        return Err(VmfError::domain(format!(
            "features of class {class_id} sum to a degenerate vector (norm {n})"
        )));
    }
    Ok((sum.iter().map(|v| v / n).collect(), n))
}

pub fn cfc_loss(clf: &VmfClassifier, batch: &FeatureBatch) -> Result<f64> {
    Ok(cfc_loss_with_grads(clf, batch, false)?.0)
}

/// `L_cfc` with gradients for the classifier and for every raw feature row.
///
/// With the feature compactness tied to `kappa_i` the divergence reduces to
/// `KL = A(k) k (1 - <mu_i, m_i>)`, `m_i` the batch direction of class `i`.
pub fn cfc_loss_with_grads(
    clf: &VmfClassifier,
    batch: &FeatureBatch,
    projected: bool,
) -> Result<(f64, ClassifierGrads, Vec<f64>)> {
    clf.check_batch(batch)?;
    if batch.is_empty() {
        return Err(VmfError::domain("consistency loss of an empty batch"));
    }
    let d = clf.dim();
    let c = clf.num_classes();
    let mut grads = ClassifierGrads::zeros(c, d);
    let mut feat = vec![0.0; batch.len() * d];

    let mut present = Vec::new();
    for i in 0..c {
        if let Some(sum) = class_resultant(batch, i, projected) {
            present.push((i, sum));
        }
    }
    let weight = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    for (i, sum) in present {
        let (m, sum_norm) = direction_of(&sum, i)?;
        let class = clf.class(i);
        let k = class.kappa();
        let stats = ClassStats::new(d, k)?;
        let cos = dot(class.mu(), &m);
        let kl = stats.ratio * k * (1.0 - cos);
        let o = overlap_from_kl(kl);
        loss += weight * (1.0 - o);

        // d(1 - o) = o^2 dKL
        let scale = weight * o * o;
        grads.kappa[i] += scale * (stats.ratio + k * stats.ratio_deriv) * (1.0 - cos);
        let dkl_dcos = -stats.ratio * k;
        axpy(scale * dkl_dcos, &m, grads.mu_row_mut(i));

        // dKL/dsum = dkl_dcos * (I - m m^T) mu_i / ||sum||
        let g_sum: Vec<f64> = class
            .mu()
            .iter()
            .zip(&m)
            .map(|(u, mm)| scale * dkl_dcos * (u - cos * mm) / sum_norm)
            .collect();
        for l in (0..batch.len()).filter(|&l| batch.label(l) == i) {
            let row = batch.row(l);
            let out = &mut feat[l * d..(l + 1) * d];
            if projected {
                project_through_normalisation(&g_sum, row, out);
            } else {
                axpy(1.0, &g_sum, out);
            }
        }
    }
    Ok((loss, grads, feat))
}

/// `out += (I - x̃ x̃^T) g / ||x||`, the chain rule through `x -> x / ||x||`.
fn project_through_normalisation(g: &[f64], x: &[f64], out: &mut [f64]) {
    let n = norm(x);
    let along = dot(g, x) / (n * n);
    for ((o, gi), xi) in out.iter_mut().zip(g).zip(x) {
        *o += (gi - along * xi) / n;
    }
}

/// Gradient of `log p_label(x̃)` with respect to every `kappa_j` and `mu_j`.
pub fn logpost_grads(
    clf: &VmfClassifier,
    x_tilde: &[f64],
    label: usize,
) -> Result<ClassifierGrads> {
    if label >= clf.num_classes() {
        return Err(VmfError::domain(format!("label {label} out of range")));
    }
    let stats = ClassStats::for_classifier(clf)?;
    let scorer = clf.scorer()?;
    let post = scorer.posterior(x_tilde)?;
    let x = crate::vmf::ensure_unit(x_tilde)?;
    let mut grads = ClassifierGrads::zeros(clf.num_classes(), clf.dim());
    accumulate_logpost(clf, &stats, &post, &x, label, 1.0, &mut grads);
    Ok(grads)
}

/// `grads += scale * d log p_label / d(kappa, mu)`.
fn accumulate_logpost(
    clf: &VmfClassifier,
    stats: &[ClassStats],
    post: &[f64],
    x: &[f64],
    label: usize,
    scale: f64,
    grads: &mut ClassifierGrads,
) {
    for (j, class) in clf.classes().iter().enumerate() {
        let indicator = if j == label { 1.0 } else { 0.0 };
        let coef = indicator - post[j];
        let cos = dot(x, class.mu());
        grads.kappa[j] += scale * coef * (cos - stats[j].ratio);
        axpy(scale * coef * class.kappa(), x, grads.mu_row_mut(j));
    }
}

/// `L_perf` with classifier and raw-feature gradients.
pub fn perf_loss_with_grads(
    clf: &VmfClassifier,
    batch: &FeatureBatch,
) -> Result<(f64, ClassifierGrads, Vec<f64>)> {
    clf.check_batch(batch)?;
    if batch.is_empty() {
        return Err(VmfError::domain("performance loss of an empty batch"));
    }
    let d = clf.dim();
    let n = batch.len();
    let stats = ClassStats::for_classifier(clf)?;
    let scorer = clf.scorer()?;
    let mut grads = ClassifierGrads::zeros(clf.num_classes(), d);
    let mut feat = vec![0.0; n * d];
    let mut loss = 0.0;
    let w = 1.0 / n as f64;
    for l in 0..n {
        let y = batch.label(l);
        let x = batch.projected(l);
        let log_post = scorer.log_posterior(&x)?;
        let post: Vec<f64> = log_post.iter().map(|v| v.exp()).collect();
        loss -= w * log_post[y];
        accumulate_logpost(clf, &stats, &post, &x, y, -w, &mut grads);

        // d log p_y / d x̃ = kappa_y mu_y - sum_j p_j kappa_j mu_j
        let mut g = vec![0.0; d];
        for (j, class) in clf.classes().iter().enumerate() {
            let coef = if j == y { 1.0 } else { 0.0 } - post[j];
            axpy(-w * coef * class.kappa(), class.mu(), &mut g);
        }
        project_through_normalisation(&g, batch.row(l), &mut feat[l * d..(l + 1) * d]);
    }
    Ok((loss, grads, feat))
}

/// `total = perf + lambda * (icd + cfc)` over the enabled regularisers.
pub fn total_loss(
    clf: &VmfClassifier,
    batch: &FeatureBatch,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let (perf, mut cgrads, mut fgrads) = perf_loss_with_grads(clf, batch)?;
    let mut total = perf;

    let icd = if clf.num_classes() >= 2 {
        let (icd, g) = icd_loss_with_grads(clf)?;
        if cfg.enable_icd {
            total += cfg.lambda * icd;
            cgrads.add_scaled(cfg.lambda, &g);
        }
        icd
    } else if cfg.enable_icd {
        return Err(VmfError::domain("inter-class loss needs at least 2 classes"));
    } else {
        0.0
    };

    let (cfc, g, fg) = cfc_loss_with_grads(clf, batch, cfg.cfc_projected_features)?;
    if cfg.enable_cfc {
        total += cfg.lambda * cfc;
        cgrads.add_scaled(cfg.lambda, &g);
        axpy(cfg.lambda, &fg, &mut fgrads);
    }

    Ok(LossReport {
        perf,
        icd,
        cfc,
        total,
        grads: LossGrads {
            classifier: cgrads,
            features: fgrads,
        },
    })
}
