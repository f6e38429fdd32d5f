//! Runtime oracle suite: closed forms, finite differences, Monte-Carlo and
//! moment checks over the numerical core. Each check reports pass/fail with
//! its worst observed deviation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, interpolate_kappas, normalize_overlaps, CalibrationConfig};
use crate::error::Result;
use crate::linalg::{axpy, dot, normalized, tangent_project};
use crate::losses::{logpost_grads, total_loss, LossConfig};
use crate::overlap::{kl_vmf, overlap_coeff, overlap_grads, overlap_matrix, pair_surface};
use crate::specfn::{bessel_ratio, log_norm_const};
use crate::synth::{monte_carlo_kl, sample_uniform_sphere, sample_vmf};
use crate::vmf::{uniform_prior, FeatureBatch, VmfClassifier, VmfParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub mc_samples: usize,
    /// Random parameter pairs per dimension for the Monte-Carlo KL check.
    pub mc_pairs: usize,
    /// Random configurations per dimension for the finite-difference checks.
    pub fd_configs: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            mc_samples: 200_000,
            mc_pairs: 10,
            fd_configs: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_all(cfg: &VerifyConfig) -> Result<VerifyReport> {
    Ok(VerifyReport {
        checks: vec![
            closed_forms_d3()?,
            bessel_recurrence()?,
            self_divergence(cfg)?,
            kl_monte_carlo(cfg)?,
            moments(cfg)?,
            overlap_derivatives(cfg)?,
            logpost_derivatives(cfg)?,
            loss_gradients(cfg)?,
            calibration_algebra(cfg)?,
        ],
    })
}

/// Log-spaced grid on `[lo, hi]` with `n` points.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `coth(k) - 1/k`, with its Taylor series where the difference cancels.
pub fn ratio_d3(k: f64) -> f64 {
    if k < 1e-2 {
        let k2 = k * k;
        k / 3.0 - k * k2 / 45.0 + 2.0 * k * k2 * k2 / 945.0
    } else {
        1.0 / k.tanh() - 1.0 / k
    }
}

/// `log(k / (4 pi sinh k))` without overflow.
pub fn log_norm_d3(k: f64) -> f64 {
    // sinh k = e^k (1 - e^{-2k}) / 2
    k.ln() - (2.0 * std::f64::consts::PI).ln() - k - (-(-2.0 * k).exp_m1()).ln()
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

fn closed_forms_d3() -> Result<CheckResult> {
    let mut worst_a = 0.0f64;
    let mut worst_c = 0.0f64;
    for k in log_grid(1e-3, 1e4, 57) {
        worst_a = worst_a.max(rel_err(bessel_ratio(3, k)?, ratio_d3(k), 1e-300));
        worst_c = worst_c.max((log_norm_const(3, k)? - log_norm_d3(k)).abs());
    }
    Ok(check(
        "d3_closed_forms",
        worst_a <= 1e-10 && worst_c <= 1e-8,
        format!("max rel err A {worst_a:.3e}, max abs err log C {worst_c:.3e}"),
    ))
}

/// `1/A_{d}(k) - A_{d+2}(k) = d/k`, from `I_{v-1} - I_{v+1} = (2v/k) I_v`.
fn bessel_recurrence() -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for d in [2usize, 3, 8, 64, 512] {
        for k in log_grid(1e-2, 1e3, 31) {
            let lhs = 1.0 / bessel_ratio(d, k)? - bessel_ratio(d + 2, k)?;
            let rhs = d as f64 / k;
            worst = worst.max(rel_err(lhs, rhs, 1.0));
        }
    }
    Ok(check("bessel_recurrence", worst <= 1e-8, format!("max rel err {worst:.3e}")))
}

fn random_params(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Result<VmfParams> {
    VmfParams::new(rng.random_range(lo..hi), sample_uniform_sphere(rng, d))
}

fn self_divergence(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for d in [3usize, 8, 64, 512] {
        for _ in 0..20 {
            let p = random_params(&mut rng, d, 0.01, 200.0)?;
            worst = worst.max(kl_vmf(&p, &p)?.abs());
            worst = worst.max((overlap_coeff(&p, &p)? - 1.0).abs());
        }
    }
    Ok(check("self_divergence", worst <= 1e-10, format!("max |KL(p,p)|, |o(p,p) - 1| = {worst:.3e}")))
}

fn kl_monte_carlo(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for d in [3usize, 8] {
        for _ in 0..cfg.mc_pairs {
            let pi = random_params(&mut rng, d, 0.5, 20.0)?;
            let pj = random_params(&mut rng, d, 0.5, 20.0)?;
            let exact = kl_vmf(&pi, &pj)?;
            let (mc, se) = monte_carlo_kl(&pi, &pj, cfg.mc_samples, rng.random())?;
            worst = worst.max((exact - mc).abs() / se);
            pairs += 1;
        }
    }
    Ok(check(
        "kl_monte_carlo",
        worst <= 3.0,
        format!("{pairs} pairs, {} draws each, max |z| = {worst:.3}", cfg.mc_samples),
    ))
}

fn moments(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let n = cfg.mc_samples.min(100_000);
    let mut worst = 0.0f64;
    for (d, k) in [(3usize, 4.0), (8, 1.0), (32, 32.0), (64, 300.0)] {
        let p = VmfParams::new(k, sample_uniform_sphere(&mut rng, d))?;
        let xs = sample_vmf(&p, n, rng.random())?;
        let mut mean = vec![0.0; d];
        for x in xs.chunks_exact(d) {
            axpy(1.0 / n as f64, x, &mut mean);
        }
        let a = bessel_ratio(d, k)?;
        for (m, u) in mean.iter().zip(p.mu()) {
            worst = worst.max((m - a * u).abs() * (n as f64).sqrt());
        }
    }
    Ok(check(
        "sample_moments",
        worst <= 4.0,
        format!("max sqrt(n) |mean - A mu| = {worst:.3} over n = {n}"),
    ))
}

/// Unit tangent vector at `u`.
fn random_tangent(rng: &mut ChaCha8Rng, u: &[f64]) -> Vec<f64> {
    loop {
        let g = sample_uniform_sphere(rng, u.len());
        if let Ok(t) = normalized(&tangent_project(&g, u)) {
            return t;
        }
    }
}

/// `normalize(u + h t)`.
fn moved(u: &[f64], t: &[f64], h: f64) -> Vec<f64> {
    let mut v = u.to_vec();
    axpy(h, t, &mut v);
    normalized(&v).expect("small step off a unit vector")
}

/// Five-point central difference of `f` at `x`.
fn central(x: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let near = f(x + h)? - f(x - h)?;
    let far = f(x + 2.0 * h)? - f(x - 2.0 * h)?;
    Ok((8.0 * near - far) / (12.0 * h))
}

/// Derivative of `f` along the great circle through `u` with tangent `t`.
/// `normalize(u + s t)` moves arc length `atan(s)`, so the curve is sampled by
/// arc length directly.
fn sphere_fd(u: &[f64], t: &[f64], h: f64, mut f: impl FnMut(Vec<f64>) -> Result<f64>) -> Result<f64> {
    central(0.0, h, |s| f(moved(u, t, s.tan())))
}

const FD_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

fn overlap_derivatives(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut worst = 0.0f64;
    let mut negative_dcos = 0;
    let mut points = 0;
    for d in [3usize, 16, 64] {
        for _ in 0..cfg.fd_configs {
            let pi = random_params(&mut rng, d, 0.5, 40.0)?;
            let pj = random_params(&mut rng, d, 0.5, 40.0)?;
            let g = overlap_grads(&pi, &pj)?;
            let (ki, kj) = (pi.kappa(), pj.kappa());

            let fd = central(ki, 1e-3 * ki, |k| overlap_coeff(&VmfParams::new(k, pi.mu().to_vec())?, &pj))?;
            worst = worst.max(rel_err(g.d_kappa_i, fd, FD_FLOOR));
            let fd = central(kj, 1e-3 * kj, |k| overlap_coeff(&pi, &VmfParams::new(k, pj.mu().to_vec())?))?;
            worst = worst.max(rel_err(g.d_kappa_j, fd, FD_FLOOR));

            let t = random_tangent(&mut rng, pi.mu());
            let fd = sphere_fd(pi.mu(), &t, 1e-3, |mu| overlap_coeff(&VmfParams::new(ki, mu)?, &pj))?;
            worst = worst.max(rel_err(dot(&g.d_mu_i, &t), fd, FD_FLOOR));
            let t = random_tangent(&mut rng, pj.mu());
            let fd = sphere_fd(pj.mu(), &t, 1e-3, |mu| overlap_coeff(&pi, &VmfParams::new(kj, mu)?))?;
            worst = worst.max(rel_err(dot(&g.d_mu_j, &t), fd, FD_FLOOR));

            let cos = dot(pi.mu(), pj.mu());
            if pair_surface(d, ki, kj, cos)?.d_cos < 0.0 {
                negative_dcos += 1;
            }
            points += 1;
        }
    }
    Ok(check(
        "overlap_derivatives",
        worst <= FD_TOL && negative_dcos == 0,
        format!("{points} configurations, max rel err {worst:.3e}, negative d/dcos at {negative_dcos} points"),
    ))
}

fn logpost_derivatives(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let mut worst = 0.0f64;
    let mut points = 0;
    for d in [3usize, 16, 64] {
        for _ in 0..cfg.fd_configs {
            let c = rng.random_range(2..6);
            let classes = (0..c)
                .map(|_| random_params(&mut rng, d, 0.5, 30.0))
                .collect::<Result<Vec<_>>>()?;
            let clf = VmfClassifier::new(classes, uniform_prior(c))?;
            let x = sample_uniform_sphere(&mut rng, d);
            let label = rng.random_range(0..c);
            let grads = logpost_grads(&clf, &x, label)?;
            let logp = |clf: &VmfClassifier| -> Result<f64> { Ok(clf.scorer()?.log_posterior(&x)?[label]) };
            // the labelled class and one other class cover both table columns
            let other = (label + 1) % c;
            for j in [label, other] {
                let k = clf.class(j).kappa();
                let fd = central(k, 1e-3 * k, |v| {
                    let mut ks = clf.kappas();
                    ks[j] = v;
                    logp(&clf.with_kappas(&ks)?)
                })?;
                worst = worst.max(rel_err(grads.kappa[j], fd, FD_FLOOR));

                let mu = clf.class(j).mu().to_vec();
                let t = random_tangent(&mut rng, &mu);
                let fd = sphere_fd(&mu, &t, 1e-3, |m| {
                    let mut classes = clf.classes().to_vec();
                    classes[j] = VmfParams::new(k, m)?;
                    logp(&VmfClassifier::new(classes, clf.prior().to_vec())?)
                })?;
                worst = worst.max(rel_err(dot(grads.mu_row(j), &t), fd, FD_FLOOR));
            }
            points += 1;
        }
    }
    Ok(check(
        "log_posterior_derivatives",
        worst <= FD_TOL,
        format!("{points} configurations, max rel err {worst:.3e}"),
    ))
}

fn loss_gradients(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(5));
    let mut worst = 0.0f64;
    let configs = (cfg.fd_configs / 10).max(3);
    let loss_cfg = LossConfig::default();
    for d in [3usize, 16] {
        for _ in 0..configs {
            let c = rng.random_range(2..5);
            let classes = (0..c)
                .map(|_| random_params(&mut rng, d, 1.0, 20.0))
                .collect::<Result<Vec<_>>>()?;
            let clf = VmfClassifier::new(classes, uniform_prior(c))?;
            let n = rng.random_range(2..8);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| sample_uniform_sphere(&mut rng, d).iter().map(|v| 2.0 * v).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let batch = FeatureBatch::from_rows(&rows, labels.clone())?;
            let report = total_loss(&clf, &batch, &loss_cfg)?;
            let total = |clf: &VmfClassifier, batch: &FeatureBatch| -> Result<f64> {
                Ok(total_loss(clf, batch, &loss_cfg)?.total)
            };
            for j in 0..c {
                let k = clf.class(j).kappa();
                let fd = central(k, 1e-3 * k, |v| {
                    let mut ks = clf.kappas();
                    ks[j] = v;
                    total(&clf.with_kappas(&ks)?, &batch)
                })?;
                worst = worst.max(rel_err(report.grads.classifier.kappa[j], fd, FD_FLOOR));
                let mu = clf.class(j).mu().to_vec();
                let t = random_tangent(&mut rng, &mu);
                let fd = sphere_fd(&mu, &t, 1e-3, |m| {
                    let mut classes = clf.classes().to_vec();
                    classes[j] = VmfParams::new(k, m)?;
                    total(&VmfClassifier::new(classes, clf.prior().to_vec())?, &batch)
                })?;
                worst = worst.max(rel_err(dot(report.grads.classifier.mu_row(j), &t), fd, FD_FLOOR));
            }
            let l = rng.random_range(0..n);
            let a = rng.random_range(0..d);
            let fd = central(rows[l][a], 1e-4, |v| {
                let mut r = rows.clone();
                r[l][a] = v;
                total(&clf, &FeatureBatch::from_rows(&r, labels.clone())?)
            })?;
            worst = worst.max(rel_err(report.grads.features[l * d + a], fd, FD_FLOOR));
        }
    }
    Ok(check("loss_gradients", worst <= FD_TOL, format!("max rel err {worst:.3e}")))
}

fn calibration_algebra(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(6));
    let c = 12;
    let classes = (0..c)
        .map(|_| random_params(&mut rng, 16, 2.0, 40.0))
        .collect::<Result<Vec<_>>>()?;
    let clf = VmfClassifier::new(classes, uniform_prior(c))?;
    let k = clf.kappas();
    let o = overlap_matrix(&clf)?;
    let ohat = normalize_overlaps(o.row_avg(), &k)?;
    let at = |alpha: f64| -> Result<Vec<f64>> {
        Ok(calibrate(&clf, &CalibrationConfig { alpha, ..Default::default() }, None)?.kappas())
    };
    let mut worst = 0.0f64;
    for (a, b) in at(1.0)?.iter().zip(&k) {
        worst = worst.max((a - b).abs());
    }
    for (a, b) in at(0.0)?.iter().zip(&ohat.values) {
        worst = worst.max((a - b).abs());
    }
    for step in 1..10 {
        let alpha = step as f64 / 10.0;
        let direct = interpolate_kappas(&k, &ohat.values, alpha)?;
        for ((kh, k0), oh) in direct.iter().zip(&k).zip(&ohat.values) {
            worst = worst.max((kh.ln() - (alpha * k0.ln() + (1.0 - alpha) * oh.ln())).abs());
        }
    }
    let lo = ohat.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ohat.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k_lo = k.iter().copied().fold(f64::INFINITY, f64::min);
    let k_hi = k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let extremes = lo == k_lo && hi == k_hi;
    Ok(check(
        "calibration_algebra",
        worst <= 1e-12 && extremes && !ohat.degenerate,
        format!("max deviation {worst:.3e}, extremes mapped exactly: {extremes}"),
    ))
}
