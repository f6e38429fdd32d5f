//! Mini-batch SGD with momentum over the classifier (and optionally a linear
//! feature map).
//!
//! Orientation steps use the tangent-projected gradient and are renormalised
//! back onto the sphere. Compactness steps are clipped and clamped at a floor.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmfError};
use crate::linalg::{dot, norm, normalized, tangent_project};
use crate::losses::{total_loss, ClassifierGrads, LossConfig};
use crate::overlap::overlap_matrix;
use crate::synth::{sample_uniform_sphere, Group, SynthDataset};
use crate::vmf::{prior_from_counts, uniform_prior, FeatureBatch, VmfClassifier, VmfParams, MU_NORM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub kappa_init: f64,
    /// Multiplier on `lr` for the compactness parameters, whose gradients are
    /// bounded by 1 per sample while orientation gradients scale with `kappa`.
    pub kappa_lr_scale: f64,
    pub kappa_floor: f64,
    /// Per-step bound on `|dL/dkappa_i|`; infinity disables clipping.
    pub kappa_grad_clip: f64,
    /// Keep every `kappa_i` at `kappa_init`.
    pub freeze_kappa: bool,
    /// Learn a linear map applied to the raw features before the classifier.
    pub train_feature_map: bool,
    /// Output width of the feature map; defaults to the input width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_map_dim: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            kappa_init: 16.0,
            kappa_lr_scale: 16.0,
            kappa_floor: 1e-3,
            kappa_grad_clip: 10.0,
            freeze_kappa: false,
            train_feature_map: false,
            feature_map_dim: None,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(VmfError::domain("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(VmfError::domain(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(VmfError::domain(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.kappa_floor.is_finite() && self.kappa_floor > 0.0) {
            return Err(VmfError::domain("kappa_floor must be positive"));
        }
        if !(self.kappa_init.is_finite() && self.kappa_init >= self.kappa_floor) {
            return Err(VmfError::domain("kappa_init must be finite and >= kappa_floor"));
        }
        if !(self.kappa_lr_scale.is_finite() && self.kappa_lr_scale > 0.0) {
            return Err(VmfError::domain("kappa_lr_scale must be positive"));
        }
        if self.kappa_grad_clip.is_nan() || self.kappa_grad_clip <= 0.0 {
            return Err(VmfError::domain("kappa_grad_clip must be positive"));
        }
        if self.feature_map_dim == Some(0) || self.feature_map_dim == Some(1) {
            return Err(VmfError::domain("feature_map_dim must be at least 2"));
        }
        self.loss.validate()
    }

    /// Learning rate for step `t` of `total` steps.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// `C` classes, unit orientations uniform on the sphere, equal compactness.
pub fn init_classifier(
    classes: usize,
    dim: usize,
    kappa_init: f64,
    prior: Vec<f64>,
    seed: u64,
) -> Result<VmfClassifier> {
    if classes == 0 || dim < 2 {
        return Err(VmfError::domain(format!(
            "need at least 1 class and dimension >= 2, got C={classes}, d={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..classes)
        .map(|_| VmfParams::new(kappa_init, sample_uniform_sphere(&mut rng, dim)))
        .collect::<Result<Vec<_>>>()?;
    VmfClassifier::new(params, prior)
}

/// Row-major `d_in x d_out` matrix; a feature row `x` maps to `x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub d_in: usize,
    pub d_out: usize,
    pub weights: Vec<f64>,
}

impl FeatureMap {
    /// Rectangular identity.
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        let mut weights = vec![0.0; d_in * d_out];
        for k in 0..d_in.min(d_out) {
            weights[k * d_out + k] = 1.0;
        }
        FeatureMap { d_in, d_out, weights }
    }

    pub fn apply(&self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        if batch.dim() != self.d_in {
            return Err(VmfError::domain(format!(
                "feature map expects width {}, got {}",
                self.d_in,
                batch.dim()
            )));
        }
        let mut out = vec![0.0; batch.len() * self.d_out];
        for l in 0..batch.len() {
            let dst = &mut out[l * self.d_out..(l + 1) * self.d_out];
            for (a, &x) in batch.row(l).iter().enumerate() {
                crate::linalg::axpy(x, &self.weights[a * self.d_out..(a + 1) * self.d_out], dst);
            }
        }
        FeatureBatch::new(self.d_out, out, batch.labels().to_vec())
    }

    /// `dL/dW = sum_l x_l^T g_l` for mapped-feature gradients `g`.
    fn weight_grad(&self, batch: &FeatureBatch, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.weights.len()];
        for l in 0..batch.len() {
            let gl = &g[l * self.d_out..(l + 1) * self.d_out];
            for (a, &x) in batch.row(l).iter().enumerate() {
                crate::linalg::axpy(x, gl, &mut out[a * self.d_out..(a + 1) * self.d_out]);
            }
        }
        out
    }
}

/// Accuracy summary. Group entries are `None` when the group has no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub mean_per_class: f64,
}

impl EvalMetrics {
    pub fn group(&self, g: Group) -> Option<f64> {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

/// Argmax-posterior accuracy under the classifier's own prior.
pub fn evaluate(clf: &VmfClassifier, batch: &FeatureBatch, groups: &[Group]) -> Result<EvalMetrics> {
    let c = clf.num_classes();
    if groups.len() != c {
        return Err(VmfError::domain(format!(
            "{} group labels for {c} classes",
            groups.len()
        )));
    }
    if batch.is_empty() {
        return Err(VmfError::domain("cannot evaluate an empty batch"));
    }
    let scorer = clf.scorer()?;
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for l in 0..batch.len() {
        let y = batch.label(l);
        if y >= c {
            return Err(VmfError::domain(format!("label {y} out of range at row {l}")));
        }
        totals[y] += 1;
        if scorer.predict(&batch.projected(l))? == y {
            hits[y] += 1;
        }
    }
    let ratio = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
    let group_acc = |g: Group| {
        let (h, t) = (0..c)
            .filter(|&i| groups[i] == g)
            .fold((0, 0), |(h, t), i| (h + hits[i], t + totals[i]));
        ratio(h, t)
    };
    let per_class: Vec<f64> = (0..c).filter_map(|i| ratio(hits[i], totals[i])).collect();
    Ok(EvalMetrics {
        overall: hits.iter().sum::<usize>() as f64 / batch.len() as f64,
        many: group_acc(Group::Many),
        medium: group_acc(Group::Medium),
        few: group_acc(Group::Few),
        mean_per_class: per_class.iter().sum::<f64>() / per_class.len() as f64,
    })
}

/// `confusion[true][predicted]`.
pub fn confusion_matrix(clf: &VmfClassifier, batch: &FeatureBatch) -> Result<Vec<Vec<usize>>> {
    let c = clf.num_classes();
    let scorer = clf.scorer()?;
    let mut m = vec![vec![0; c]; c];
    for l in 0..batch.len() {
        let y = batch.label(l);
        if y >= c {
            return Err(VmfError::domain(format!("label {y} out of range at row {l}")));
        }
        m[y][scorer.predict(&batch.projected(l))?] += 1;
    }
    Ok(m)
}

/// One per-epoch record. Losses are sample-weighted means over the epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub perf: f64,
    pub icd: f64,
    pub cfc: f64,
    pub total: f64,
    pub train: EvalMetrics,
    pub test: EvalMetrics,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub mean_row_overlap: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,perf,icd,cfc,total,train_all,train_many,train_medium,train_few,test_all,test_many,test_medium,test_few,test_mean_per_class,kappa_min,kappa_max,mean_row_overlap";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.perf,
            self.icd,
            self.cfc,
            self.total,
            self.train.overall,
            opt(self.train.many),
            opt(self.train.medium),
            opt(self.train.few),
            self.test.overall,
            opt(self.test.many),
            opt(self.test.medium),
            opt(self.test.few),
            self.test.mean_per_class,
            self.kappa_min,
            self.kappa_max,
            self.mean_row_overlap
        )
        .expect("writing to a String");
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub clf: VmfClassifier,
    pub feature_map: Option<FeatureMap>,
    pub step: usize,
    velocity_kappa: Vec<f64>,
    velocity_mu: Vec<f64>,
    velocity_map: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(clf: VmfClassifier, feature_map: Option<FeatureMap>) -> Self {
        let (c, d) = (clf.num_classes(), clf.dim());
        let m = feature_map.as_ref().map_or(0, |f| f.weights.len());
        TrainState {
            clf,
            feature_map,
            step: 0,
            velocity_kappa: vec![0.0; c],
            velocity_mu: vec![0.0; c * d],
            velocity_map: vec![0.0; m],
            metrics: Vec::new(),
        }
    }

    /// Features as seen by the classifier.
    pub fn map_batch(&self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        match &self.feature_map {
            Some(f) => f.apply(batch),
            None => Ok(batch.clone()),
        }
    }

    /// Unit orientations and `kappa >= floor`.
    pub fn check_invariants(&self, kappa_floor: f64) -> Result<()> {
        for (i, class) in self.clf.classes().iter().enumerate() {
            let n = norm(class.mu());
            if (n - 1.0).abs() > MU_NORM_TOL || class.kappa() < kappa_floor {
                return Err(VmfError::numerical(
                    "trainer invariant",
                    format!(
                        "class {i} after step {}: |mu| = {n}, kappa = {}",
                        self.step,
                        class.kappa()
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn non_finite_dump(state: &TrainState, grads: &ClassifierGrads, feat: &[f64]) -> VmfError {
    let mut detail = format!("non-finite gradient at step {}", state.step);
    for i in 0..grads.num_classes() {
        if !grads.kappa[i].is_finite() || grads.mu_row(i).iter().any(|v| !v.is_finite()) {
            let class = state.clf.class(i);
            let _ = write!(
                detail,
                "; class {i}: kappa={} |mu|={} dkappa={} |dmu|={}",
                class.kappa(),
                norm(class.mu()),
                grads.kappa[i],
                norm(grads.mu_row(i))
            );
        }
    }
    if let Some(l) = feat.iter().position(|v| !v.is_finite()) {
        let _ = write!(detail, "; feature gradient entry {l} is {}", feat[l]);
    }
    VmfError::numerical("sgd step", detail)
}

/// Applies one momentum step given the raw loss gradients.
fn apply_update(
    state: &mut TrainState,
    grads: &ClassifierGrads,
    map_grad: Option<&[f64]>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let d = state.clf.dim();
    let m = cfg.momentum;
    for (i, class) in state.clf.classes_mut().iter_mut().enumerate() {
        if !cfg.freeze_kappa {
            let g = grads.kappa[i].clamp(-cfg.kappa_grad_clip, cfg.kappa_grad_clip);
            let v = &mut state.velocity_kappa[i];
            *v = m * *v + g;
            if *v != 0.0 {
                class.set_kappa((class.kappa() - cfg.kappa_lr_scale * lr * *v).max(cfg.kappa_floor));
            }
        }
        let g = tangent_project(grads.mu_row(i), class.mu());
        let v = &mut state.velocity_mu[i * d..(i + 1) * d];
        for (vk, gk) in v.iter_mut().zip(&g) {
            *vk = m * *vk + gk;
        }
        if v.iter().any(|x| *x != 0.0) {
            let moved: Vec<f64> = class.mu().iter().zip(v.iter()).map(|(u, vk)| u - lr * vk).collect();
            let mu = normalized(&moved).map_err(|e| {
                VmfError::numerical("sgd step", format!("class {i} orientation collapsed: {e}"))
            })?;
            class.set_mu(mu);
        }
    }
    if let (Some(map), Some(g)) = (state.feature_map.as_mut(), map_grad) {
        for ((w, v), gk) in map.weights.iter_mut().zip(&mut state.velocity_map).zip(g) {
            *v = m * *v + gk;
            *w -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Per-step loss values returned by [`sgd_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub perf: f64,
    pub icd: f64,
    pub cfc: f64,
    pub total: f64,
}

/// One optimiser step on `batch` (raw features) with learning rate `lr`.
pub fn sgd_step(state: &mut TrainState, batch: &FeatureBatch, lr: f64, cfg: &TrainConfig) -> Result<StepLosses> {
    let mapped = state.map_batch(batch)?;
    let report = total_loss(&state.clf, &mapped, &cfg.loss)?;
    let grads = &report.grads;
    if !grads.classifier.is_finite() || grads.features.iter().any(|v| !v.is_finite()) {
        return Err(non_finite_dump(state, &grads.classifier, &grads.features));
    }
    let map_grad = match (&state.feature_map, cfg.train_feature_map) {
        (Some(f), true) => Some(f.weight_grad(batch, &grads.features)),
        _ => None,
    };
    apply_update(state, &grads.classifier, map_grad.as_deref(), lr, cfg)?;
    if cfg!(debug_assertions) {
        state.check_invariants(cfg.kappa_floor)?;
    }
    Ok(StepLosses {
        perf: report.perf,
        icd: report.icd,
        cfc: report.cfc,
        total: report.total,
    })
}

/// Classifier used for test metrics: the training prior replaced by a uniform one.
pub fn inference_classifier(clf: &VmfClassifier) -> Result<VmfClassifier> {
    clf.with_prior(uniform_prior(clf.num_classes()))
}

/// Fresh state for `dataset` under `cfg`: prior from the training counts.
pub fn init_state(dataset: &SynthDataset, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let d_in = dataset.dim();
    let d = cfg.feature_map_dim.unwrap_or(d_in);
    let prior = prior_from_counts(&dataset.counts)?;
    let clf = init_classifier(dataset.num_classes(), d, cfg.kappa_init, prior, cfg.seed)?;
    let map = (cfg.train_feature_map || d != d_in).then(|| FeatureMap::identity(d_in, d));
    Ok(TrainState::new(clf, map))
}

pub fn train(dataset: &SynthDataset, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, cfg, |_, _| Ok(()))
}

/// Trains, calling `on_epoch` after each epoch's metrics are recorded.
pub fn train_with(
    dataset: &SynthDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<()>,
) -> Result<TrainState> {
    let mut state = init_state(dataset, cfg)?;
    let n = dataset.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cfg.lr_at(state.step, total_steps);
            let batch = dataset.train.select(chunk);
            let s = sgd_step(&mut state, &batch, lr, cfg)?;
            let w = chunk.len() as f64 / n as f64;
            for (acc, v) in sums.iter_mut().zip([s.perf, s.icd, s.cfc, s.total]) {
                *acc += w * v;
            }
        }
        state.check_invariants(cfg.kappa_floor)?;

        let train_batch = state.map_batch(&dataset.train)?;
        let test_batch = state.map_batch(&dataset.test)?;
        let kappas = state.clf.kappas();
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            perf: sums[0],
            icd: sums[1],
            cfc: sums[2],
            total: sums[3],
            train: evaluate(&state.clf, &train_batch, &dataset.groups)?,
            test: evaluate(&inference_classifier(&state.clf)?, &test_batch, &dataset.groups)?,
            kappa_min: kappas.iter().copied().fold(f64::INFINITY, f64::min),
            kappa_max: kappas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_row_overlap: if state.clf.num_classes() >= 2 {
                overlap_matrix(&state.clf)?.mean()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {}: perf {:.4} icd {:.4} cfc {:.4} test acc {:.4}",
            metrics.epoch,
            metrics.perf,
            metrics.icd,
            metrics.cfc,
            metrics.test.overall
        );
        state.metrics.push(metrics.clone());
        on_epoch(&state, &metrics)?;
    }
    Ok(state)
}

/// Mean pairwise `|<mu_i, mu_j>|` over `i < j`, a spread diagnostic.
pub fn mean_abs_cosine(clf: &VmfClassifier) -> f64 {
    let c = clf.num_classes();
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..c {
        for j in i + 1..c {
            s += dot(clf.class(i).mu(), clf.class(j).mu()).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
