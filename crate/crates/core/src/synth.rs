//! vMF sampling and a synthetic long-tailed dataset generator.
//!
//! Randomness comes from ChaCha8 keyed by the 64-bit seed. Each class owns a
//! set of ChaCha streams (see [`class_stream`]) so that adding classes never
//! changes the draws of existing ones.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmfError};
use crate::hexfloat;
use crate::linalg::{dot, normalized};
use crate::overlap::kl_vmf;
use crate::vmf::{FeatureBatch, VmfParams};

/// Rejection rounds allowed per draw before giving up.
pub const MAX_REJECTIONS: usize = 1000;

/// Draws one unit vector on `S^{d-1}` uniformly.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalized(&v) {
            return u;
        }
    }
}

/// Wood's rejection sampler. Draws `w = <x, mu>` from its marginal by an
/// envelope built on a Beta((d-1)/2, (d-1)/2) proposal, then attaches a
/// uniform tangent direction.
#[derive(Debug, Clone)]
pub struct VmfSampler {
    kappa: f64,
    mu: Vec<f64>,
    b: f64,
    x0: f64,
    c: f64,
    beta: Beta<f64>,
}

impl VmfSampler {
    pub fn new(params: &VmfParams) -> Result<Self> {
        let d = params.dim();
        if d < 2 {
            return Err(VmfError::domain("sampling needs dimension >= 2"));
        }
        let k = params.kappa();
        let m = (d - 1) as f64;
        // (-2k + sqrt(4k^2 + m^2)) / m, rewritten to avoid cancellation.
        let b = m / (2.0 * k + (4.0 * k * k + m * m).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = k * x0 + m * (-x0 * x0).ln_1p();
        let beta = Beta::new(m / 2.0, m / 2.0)
            .map_err(|e| VmfError::domain(format!("beta proposal: {e}")))?;
        Ok(VmfSampler {
            kappa: k,
            mu: params.mu().to_vec(),
            b,
            x0,
            c,
            beta,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.mu.len();
        let m = (d - 1) as f64;
        for _ in 0..MAX_REJECTIONS {
            let z = self.beta.sample(rng);
            let denom = 1.0 - (1.0 - self.b) * z;
            let w = (1.0 - (1.0 + self.b) * z) / denom;
            let u: f64 = rng.random();
            if self.kappa * w + m * (-self.x0 * w).ln_1p() - self.c >= u.ln() {
                // 1 - w computed directly keeps precision when w is near 1.
                let one_minus_w = 2.0 * self.b * z / denom;
                let radial = (one_minus_w * (2.0 - one_minus_w)).max(0.0).sqrt();
                let v = self.tangent(rng);
                return Ok(self
                    .mu
                    .iter()
                    .zip(&v)
                    .map(|(mu, t)| w * mu + radial * t)
                    .collect());
            }
        }
        Err(VmfError::numerical(
            "vmf sampler",
            format!(
                "no acceptance within {MAX_REJECTIONS} rounds (kappa {}, d {d})",
                self.kappa
            ),
        ))
    }

    fn tangent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let g: Vec<f64> = (0..self.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
            let along = dot(&g, &self.mu);
            let t: Vec<f64> = g.iter().zip(&self.mu).map(|(gi, mi)| gi - along * mi).collect();
            if let Ok(u) = normalized(&t) {
                return u;
            }
        }
    }
}

/// `n` draws as a row-major `n x d` matrix.
pub fn sample_vmf_with<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(VmfError::domain("sample count must be at least 1"));
    }
    let sampler = VmfSampler::new(params)?;
    let mut out = Vec::with_capacity(n * params.dim());
    for _ in 0..n {
        out.extend(sampler.sample(rng)?);
    }
    Ok(out)
}

pub fn sample_vmf(params: &VmfParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    sample_vmf_with(params, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Monte-Carlo estimate of `KL(p_i || p_j)` with its standard error.
pub fn monte_carlo_kl(pi: &VmfParams, pj: &VmfParams, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(VmfError::domain("Monte-Carlo KL needs at least 2 draws"));
    }
    let d = pi.dim();
    let xs = sample_vmf(pi, n, seed)?;
    let (ci, cj) = (pi.log_norm_const()?, pj.log_norm_const()?);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, x) in xs.chunks_exact(d).enumerate() {
        let v = ci - cj + pi.kappa() * dot(pi.mu(), x) - pj.kappa() * dot(pj.mu(), x);
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

/// Closed form and Monte-Carlo estimate side by side, for the bridge check.
pub fn kl_bridge(pi: &VmfParams, pj: &VmfParams, n: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let exact = kl_vmf(pi, pj)?;
    let (mc, se) = monte_carlo_kl(pi, pj, n, seed)?;
    Ok((exact, mc, se))
}

/// Pareto-shaped class counts, non-increasing, `n_1 = n_max`.
///
/// With `x_i = 1 + (i - 1) / (C - 1) * (ratio^(1/(power+1)) - 1)` the count is
/// `n_i = max(1, round(n_max * x_i^-(power+1)))`, i.e. samples follow a Pareto
/// density of shape `power` evaluated on an evenly spaced grid whose end point
/// yields `n_C = n_max / ratio`.
pub fn pareto_counts(classes: usize, n_max: usize, power: f64, ratio: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(VmfError::domain("need at least 2 classes"));
    }
    if n_max < classes {
        return Err(VmfError::domain(format!(
            "max_per_class {n_max} is smaller than the number of classes {classes}"
        )));
    }
    if !(power.is_finite() && power > 0.0) {
        return Err(VmfError::domain(format!("pareto power must be positive, got {power}")));
    }
    if !(ratio.is_finite() && ratio >= 1.0) {
        return Err(VmfError::domain(format!("imbalance ratio must be >= 1, got {ratio}")));
    }
    let shape = power + 1.0;
    let x_end = ratio.powf(1.0 / shape);
    Ok((0..classes)
        .map(|i| {
            let x = 1.0 + i as f64 / (classes - 1) as f64 * (x_end - 1.0);
            ((n_max as f64 * x.powf(-shape)).round() as usize).max(1)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];

    pub fn name(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupThresholds {
    /// Classes with at least this many training samples are `Many`.
    pub many_min: usize,
    /// Classes with at most this many training samples are `Few`.
    pub few_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        GroupThresholds {
            many_min: 100,
            few_max: 20,
        }
    }
}

impl GroupThresholds {
    pub fn group_of(&self, count: usize) -> Group {
        if count >= self.many_min {
            Group::Many
        } else if count <= self.few_max {
            Group::Few
        } else {
            Group::Medium
        }
    }

    pub fn assign(&self, counts: &[usize]) -> Vec<Group> {
        counts.iter().map(|&n| self.group_of(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassKappa {
    Shared(f64),
    PerClass(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub max_per_class: usize,
    pub pareto_power: f64,
    /// Head-to-tail count ratio `n_1 / n_C` before rounding.
    pub imbalance_ratio: f64,
    pub class_kappa: ClassKappa,
    pub test_per_class: usize,
    /// Log-space standard deviation of the per-sample feature magnitude.
    pub magnitude_sigma: f64,
    pub seed: u64,
    pub group_thresholds: GroupThresholds,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 50,
            dim: 32,
            max_per_class: 500,
            pareto_power: 6.0,
            imbalance_ratio: 100.0,
            class_kappa: ClassKappa::Shared(32.0),
            test_per_class: 40,
            magnitude_sigma: 0.5,
            seed: 0,
            group_thresholds: GroupThresholds::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(VmfError::domain("dim must be at least 2"));
        }
        if self.test_per_class == 0 {
            return Err(VmfError::domain("test_per_class must be at least 1"));
        }
        if !(self.magnitude_sigma.is_finite() && self.magnitude_sigma >= 0.0) {
            return Err(VmfError::domain("magnitude_sigma must be finite and >= 0"));
        }
        if self.group_thresholds.few_max >= self.group_thresholds.many_min {
            return Err(VmfError::domain("group_thresholds.few_max must be below many_min"));
        }
        self.kappas()?;
        pareto_counts(
            self.num_classes,
            self.max_per_class,
            self.pareto_power,
            self.imbalance_ratio,
        )?;
        Ok(())
    }

    pub fn kappas(&self) -> Result<Vec<f64>> {
        let ks = match &self.class_kappa {
            ClassKappa::Shared(k) => vec![*k; self.num_classes],
            ClassKappa::PerClass(v) if v.len() == self.num_classes => v.clone(),
            ClassKappa::PerClass(v) => {
                return Err(VmfError::domain(format!(
                    "class_kappa lists {} values for {} classes",
                    v.len(),
                    self.num_classes
                )))
            }
        };
        if let Some(k) = ks.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(VmfError::domain(format!("class_kappa must be positive, got {k}")));
        }
        Ok(ks)
    }

    pub fn counts(&self) -> Result<Vec<usize>> {
        pareto_counts(
            self.num_classes,
            self.max_per_class,
            self.pareto_power,
            self.imbalance_ratio,
        )
    }
}

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Direction = 0,
    Train = 1,
    Test = 2,
}

/// Stream id of class `i` for one purpose: `4 i + purpose`.
fn class_stream(seed: u64, class: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4 * class as u64 + purpose as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: FeatureBatch,
    /// Balanced: `test_per_class` samples of every class.
    pub test: FeatureBatch,
    pub true_params: Vec<VmfParams>,
    pub counts: Vec<usize>,
    pub groups: Vec<Group>,
}

fn scaled_draws(
    sampler: &VmfSampler,
    n: usize,
    magnitude: &LogNormal<f64>,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) -> Result<()> {
    for _ in 0..n {
        let x = sampler.sample(rng)?;
        let r = magnitude.sample(rng);
        out.extend(x.iter().map(|v| v * r));
    }
    Ok(())
}

pub fn make_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let counts = spec.counts()?;
    let kappas = spec.kappas()?;
    let d = spec.dim;
    let magnitude = LogNormal::new(0.0, spec.magnitude_sigma)
        .map_err(|e| VmfError::domain(format!("magnitude distribution: {e}")))?;

    let mut train_x = Vec::with_capacity(counts.iter().sum::<usize>() * d);
    let mut train_y = Vec::new();
    let mut test_x = Vec::with_capacity(spec.num_classes * spec.test_per_class * d);
    let mut test_y = Vec::new();
    let mut true_params = Vec::with_capacity(spec.num_classes);
    for (i, (&n, &k)) in counts.iter().zip(&kappas).enumerate() {
        let mu = sample_uniform_sphere(&mut class_stream(spec.seed, i, Purpose::Direction), d);
        let params = VmfParams::new(k, mu)?;
        let sampler = VmfSampler::new(&params)?;
        scaled_draws(
            &sampler,
            n,
            &magnitude,
            &mut class_stream(spec.seed, i, Purpose::Train),
            &mut train_x,
        )?;
        train_y.extend(std::iter::repeat_n(i, n));
        scaled_draws(
            &sampler,
            spec.test_per_class,
            &magnitude,
            &mut class_stream(spec.seed, i, Purpose::Test),
            &mut test_x,
        )?;
        test_y.extend(std::iter::repeat_n(i, spec.test_per_class));
        true_params.push(params);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        train: FeatureBatch::new(d, train_x, train_y)?,
        test: FeatureBatch::new(d, test_x, test_y)?,
        true_params,
        groups: spec.group_thresholds.assign(&counts),
        counts,
    })
}

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const META_FILE: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
struct TrueClass {
    #[serde(with = "hexfloat::serde_f64")]
    kappa: f64,
    #[serde(with = "hexfloat::serde_vec")]
    mu: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    spec: SynthSpec,
    counts: Vec<usize>,
    groups: Vec<Group>,
    train_rows: usize,
    test_rows: usize,
    true_params: Vec<TrueClass>,
}

/// Writes `label,x0,...,x{d-1}` rows with shortest round-trip formatting.
pub fn write_batch_csv(batch: &FeatureBatch, w: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    let header: Vec<String> = (0..batch.dim()).map(|k| format!("x{k}")).collect();
    writeln!(w, "label,{}", header.join(","))?;
    for l in 0..batch.len() {
        write!(w, "{}", batch.label(l))?;
        for v in batch.row(l) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn read_batch_csv(r: impl BufRead, what: &str) -> Result<FeatureBatch> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| VmfError::parse(what, "empty file"))?
        .map_err(|e| VmfError::parse(what, e.to_string()))?;
    let dim = header.split(',').count().saturating_sub(1);
    if !header.starts_with("label,") || dim == 0 {
        return Err(VmfError::parse(what, "line 1: expected header label,x0,..."));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line.map_err(|e| VmfError::parse(what, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .ok_or_else(|| VmfError::parse(what, format!("line {line_no}: bad label")))?;
        let before = features.len();
        for f in fields {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| VmfError::parse(what, format!("line {line_no}: {e}")))?,
            );
        }
        if features.len() - before != dim {
            return Err(VmfError::parse(
                what,
                format!("line {line_no}: expected {dim} features"),
            ));
        }
        labels.push(label);
    }
    FeatureBatch::new(dim, features, labels)
}

impl SynthDataset {
    /// Writes `train.csv`, `test.csv` and the `dataset.json` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| VmfError::io(dir, e))?;
        for (name, batch) in [(TRAIN_FILE, &self.train), (TEST_FILE, &self.test)] {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(|e| VmfError::io(&path, e))?;
            write_batch_csv(batch, file).map_err(|e| VmfError::io(&path, e))?;
        }
        let meta = Metadata {
            spec: self.spec.clone(),
            counts: self.counts.clone(),
            groups: self.groups.clone(),
            train_rows: self.train.len(),
            test_rows: self.test.len(),
            true_params: self
                .true_params
                .iter()
                .map(|p| TrueClass {
                    kappa: p.kappa(),
                    mu: p.mu().to_vec(),
                })
                .collect(),
        };
        let path = dir.join(META_FILE);
        let mut text = serde_json::to_string_pretty(&meta).expect("metadata serialisation");
        text.push('\n');
        fs::write(&path, text).map_err(|e| VmfError::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| VmfError::io(&path, e))?;
        let meta: Metadata =
            serde_json::from_str(&text).map_err(|e| VmfError::parse("dataset metadata", e.to_string()))?;
        let read = |name: &str| -> Result<FeatureBatch> {
            let path = dir.join(name);
            let file = fs::File::open(&path).map_err(|e| VmfError::io(&path, e))?;
            read_batch_csv(BufReader::new(file), name)
        };
        let train = read(TRAIN_FILE)?;
        let test = read(TEST_FILE)?;
        let c = meta.counts.len();
        if train.len() != meta.train_rows
            || test.len() != meta.test_rows
            || meta.groups.len() != c
            || meta.true_params.len() != c
            || train.class_counts(c) != meta.counts
            || train.labels().iter().chain(test.labels()).any(|&y| y >= c)
        {
            return Err(VmfError::parse(
                "dataset metadata",
                "CSV contents disagree with the sidecar counts",
            ));
        }
        let true_params = meta
            .true_params
            .into_iter()
            .map(|t| VmfParams::new(t.kappa, t.mu))
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthDataset {
            spec: meta.spec,
            train,
            test,
            true_params,
            counts: meta.counts,
            groups: meta.groups,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}
