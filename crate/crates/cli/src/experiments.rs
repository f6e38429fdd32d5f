//! Experiment drivers shared by the commands and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vmfcal::calibrate::{alpha_grid, calibrate, CalibrationConfig};
use vmfcal::hexfloat;
use vmfcal::losses::LossConfig;
use vmfcal::overlap::{overlap_matrix, pair_surface, OverlapMatrix};
use vmfcal::stats::spearman;
use vmfcal::synth::{make_dataset, Group, GroupThresholds, SynthDataset, SynthSpec};
use vmfcal::trainer::{evaluate, train, EvalMetrics, FeatureMap, TrainConfig, TrainState};
use vmfcal::vmf::VmfClassifier;

use crate::config::{ExperimentConfig, SurfaceOptions};
use crate::error::{CliError, Result};

pub const FEATURE_MAP_FILE: &str = "feature_map.json";

/// Runs `n` independent jobs on `parallel` threads. Results keep job order, so
/// the output does not depend on the thread count.
pub fn run_jobs<T: Send>(
    parallel: usize,
    n: usize,
    job: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if parallel <= 1 {
        return (0..n).map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {parallel} threads: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&job).collect())
}

pub fn dataset_for(cfg: &ExperimentConfig) -> Result<SynthDataset> {
    match &cfg.paths.dataset {
        Some(dir) => Ok(SynthDataset::load(dir)?),
        None => Ok(make_dataset(&cfg.data)?),
    }
}

/// A trained vMF classifier and the feature map it was trained behind.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub clf: VmfClassifier,
    pub feature_map: Option<FeatureMap>,
}

impl Model {
    pub fn from_state(state: &TrainState) -> Self {
        Model {
            clf: state.clf.clone(),
            feature_map: state.feature_map.clone(),
        }
    }

    /// Loads a checkpoint and, when present next to it, its feature map.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let clf = vmfcal::checkpoint::load(checkpoint)?;
        let map_path = checkpoint.with_file_name(FEATURE_MAP_FILE);
        let feature_map = if map_path.exists() {
            Some(load_feature_map(&map_path)?)
        } else {
            None
        };
        Ok(Model { clf, feature_map })
    }

    pub fn test_batch(&self, ds: &SynthDataset) -> Result<vmfcal::vmf::FeatureBatch> {
        Ok(match &self.feature_map {
            Some(f) => f.apply(&ds.test)?,
            None => ds.test.clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MapDocument {
    d_in: usize,
    d_out: usize,
    #[serde(with = "hexfloat::serde_vec")]
    weights: Vec<f64>,
}

pub fn feature_map_json(map: &FeatureMap) -> String {
    let doc = MapDocument {
        d_in: map.d_in,
        d_out: map.d_out,
        weights: map.weights.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("feature map serialises") + "\n"
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let doc: MapDocument = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if doc.weights.len() != doc.d_in * doc.d_out {
        return Err(CliError::config(format!(
            "{}: expected {} weights, found {}",
            path.display(),
            doc.d_in * doc.d_out,
            doc.weights.len()
        )));
    }
    Ok(FeatureMap {
        d_in: doc.d_in,
        d_out: doc.d_out,
        weights: doc.weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRow {
    pub alpha: f64,
    pub metrics: EvalMetrics,
}

/// Test metrics of the calibrated model at every alpha of the grid.
pub fn alpha_sweep(
    model: &Model,
    ds: &SynthDataset,
    base: &CalibrationConfig,
    parallel: usize,
) -> Result<Vec<AlphaRow>> {
    let test = model.test_batch(ds)?;
    let grid = alpha_grid();
    run_jobs(parallel, grid.len(), |k| {
        let cfg = CalibrationConfig {
            alpha: grid[k],
            ..base.clone()
        };
        let clf = calibrate(&model.clf, &cfg, None)?;
        Ok(AlphaRow {
            alpha: grid[k],
            metrics: evaluate(&clf, &test, &ds.groups)?,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub loss: LossConfig,
    pub metrics: EvalMetrics,
}

pub const ABLATION_LAMBDAS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

/// `none` once, then `icd`, `cfc` and `both` at every lambda of the grid.
pub fn ablation_variants(base: &LossConfig) -> Vec<(&'static str, LossConfig)> {
    let mut v = vec![("none", LossConfig::perf_only())];
    for (name, icd, cfc) in [("icd", true, false), ("cfc", false, true), ("both", true, true)] {
        for &lambda in &ABLATION_LAMBDAS {
            v.push((
                name,
                LossConfig {
                    lambda,
                    enable_icd: icd,
                    enable_cfc: cfc,
                    ..base.clone()
                },
            ));
        }
    }
    v
}

/// Trains one model per ablation variant with identical data and seed.
pub fn ablate_loss(ds: &SynthDataset, base: &TrainConfig, parallel: usize) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(&base.loss);
    run_jobs(parallel, variants.len(), |k| {
        let (variant, loss) = variants[k].clone();
        let cfg = TrainConfig {
            loss: loss.clone(),
            ..base.clone()
        };
        let model = Model::from_state(&train(ds, &cfg)?);
        let clf = vmfcal::trainer::inference_classifier(&model.clf)?;
        Ok(AblationRow {
            variant,
            loss,
            metrics: evaluate(&clf, &model.test_batch(ds)?, &ds.groups)?,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceCell {
    pub kappa_i: f64,
    pub cos: f64,
    pub overlap: f64,
    pub d_kappa_i: f64,
    pub d_cos: f64,
}

/// Compactness values of the surface grid: `points` steps from `kappa_min`,
/// spaced so that the upper end is excluded and `kappa_j` can fall on a node.
pub fn surface_kappas(o: &SurfaceOptions) -> Vec<f64> {
    let n = o.points as f64;
    (0..o.points)
        .map(|k| o.kappa_min + (o.kappa_max - o.kappa_min) * k as f64 / n)
        .collect()
}

/// Cosines of the surface grid, both ends included.
pub fn surface_cosines(o: &SurfaceOptions) -> Vec<f64> {
    let n = (o.points - 1) as f64;
    (0..o.points).map(|k| -1.0 + 2.0 * k as f64 / n).collect()
}

/// Overlap surface in row-major order, compactness outer.
pub fn surface_grid(o: &SurfaceOptions) -> Result<Vec<SurfaceCell>> {
    let cosines = surface_cosines(o);
    let mut cells = Vec::with_capacity(o.points * o.points);
    for kappa_i in surface_kappas(o) {
        for &cos in &cosines {
            let p = pair_surface(o.dim, kappa_i, o.kappa_j, cos)?;
            cells.push(SurfaceCell {
                kappa_i,
                cos,
                overlap: p.overlap,
                d_kappa_i: p.d_kappa_i,
                d_cos: p.d_cos,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub count: Option<usize>,
    pub group: Option<Group>,
    pub kappa: f64,
    pub row_overlap: f64,
}

pub fn class_diagnostics(
    clf: &VmfClassifier,
    counts: Option<&[usize]>,
    thresholds: &GroupThresholds,
) -> Result<(Vec<ClassRow>, OverlapMatrix)> {
    if let Some(c) = counts {
        if c.len() != clf.num_classes() {
            return Err(CliError::config(format!(
                "dataset has {} classes but the checkpoint has {}",
                c.len(),
                clf.num_classes()
            )));
        }
    }
    let m = overlap_matrix(clf)?;
    let rows = (0..clf.num_classes())
        .map(|i| ClassRow {
            class: i,
            count: counts.map(|c| c[i]),
            group: counts.map(|c| thresholds.group_of(c[i])),
            kappa: clf.class(i).kappa(),
            row_overlap: m.row_avg()[i],
        })
        .collect();
    Ok((rows, m))
}

/// Per-seed outcome of the mechanism study.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Test metrics with the overlap losses on.
    pub regularized: EvalMetrics,
    /// Test metrics of the cross-entropy-only baseline.
    pub baseline: EvalMetrics,
    /// Alpha sweep of the regularized model.
    pub sweep: Vec<AlphaRow>,
    pub spearman_count_kappa: f64,
    pub spearman_count_overlap: f64,
}

/// Seed averages of [`SeedOutcome`].
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismSummary {
    pub outcomes: Vec<SeedOutcome>,
    pub few_regularized: f64,
    pub few_baseline: f64,
    pub alphas: Vec<f64>,
    pub sweep_all: Vec<f64>,
    pub sweep_few: Vec<f64>,
    pub spearman_count_kappa: f64,
    pub spearman_count_overlap: f64,
}

impl MechanismSummary {
    fn alpha_one(&self) -> usize {
        self.alphas.len() - 1
    }

    /// Best alpha by mean Few accuracy among those whose mean overall accuracy
    /// is within `max_drop` of the uncalibrated model.
    pub fn best_alpha(&self, max_drop: f64) -> usize {
        let base_all = self.sweep_all[self.alpha_one()];
        let mut best = self.alpha_one();
        for k in 0..self.alphas.len() {
            if self.sweep_all[k] >= base_all - max_drop && self.sweep_few[k] > self.sweep_few[best] {
                best = k;
            }
        }
        best
    }
}

fn few(m: &EvalMetrics) -> Result<f64> {
    m.few
        .ok_or_else(|| CliError::config("the dataset has no Few-group classes"))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Trains the regularized model and a cross-entropy baseline on one dataset per
/// seed, sweeps alpha on the regularized model and correlates class size with
/// the learned compactness and overlap.
pub fn mechanism_study(
    spec: &SynthSpec,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    parallel: usize,
) -> Result<MechanismSummary> {
    if seeds.is_empty() {
        return Err(CliError::config("mechanism study needs at least one seed"));
    }
    let outcomes = run_jobs(parallel, seeds.len(), |k| {
        let seed = seeds[k];
        let ds = make_dataset(&SynthSpec {
            seed,
            ..spec.clone()
        })?;
        let reg_cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let base_cfg = TrainConfig {
            loss: LossConfig::perf_only(),
            ..reg_cfg.clone()
        };
        let reg = Model::from_state(&train(&ds, &reg_cfg)?);
        let base = Model::from_state(&train(&ds, &base_cfg)?);
        let metrics = |m: &Model| -> Result<EvalMetrics> {
            let clf = vmfcal::trainer::inference_classifier(&m.clf)?;
            Ok(evaluate(&clf, &m.test_batch(&ds)?, &ds.groups)?)
        };
        let counts: Vec<f64> = ds.counts.iter().map(|&n| n as f64).collect();
        let overlaps = overlap_matrix(&reg.clf)?;
        Ok(SeedOutcome {
            seed,
            regularized: metrics(&reg)?,
            baseline: metrics(&base)?,
            sweep: alpha_sweep(&reg, &ds, &CalibrationConfig::default(), 1)?,
            spearman_count_kappa: spearman(&counts, &reg.clf.kappas()),
            spearman_count_overlap: spearman(&counts, overlaps.row_avg()),
        })
    })?;
    let alphas = alpha_grid();
    let mut few_reg = Vec::new();
    let mut few_base = Vec::new();
    for o in &outcomes {
        few_reg.push(few(&o.regularized)?);
        few_base.push(few(&o.baseline)?);
    }
    let mut sweep_all = Vec::new();
    let mut sweep_few = Vec::new();
    for k in 0..alphas.len() {
        sweep_all.push(mean(outcomes.iter().map(|o| o.sweep[k].metrics.overall)));
        let mut f = Vec::new();
        for o in &outcomes {
            f.push(few(&o.sweep[k].metrics)?);
        }
        sweep_few.push(mean(f.into_iter()));
    }
    Ok(MechanismSummary {
        few_regularized: mean(few_reg.into_iter()),
        few_baseline: mean(few_base.into_iter()),
        spearman_count_kappa: mean(outcomes.iter().map(|o| o.spearman_count_kappa)),
        spearman_count_overlap: mean(outcomes.iter().map(|o| o.spearman_count_overlap)),
        outcomes,
        alphas,
        sweep_all,
        sweep_few,
    })
}

/// Path of the intermediate checkpoint written after `epoch`.
pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:04}.json")
}

pub fn require(path: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| CliError::config(format!("{what} is required (set paths.{what} or pass --{flag})")))
}
