//! Closed-form KL divergence between vMF distributions and the distribution
//! overlap coefficient `o = 1 / (1 + KL)` built on it.
//!
//! The overlap is directed: `o(i -> j)` uses `KL(p_i || p_j)`, so the matrix
//! stores both directions.

use std::io::Write;

use crate::error::{Result, VmfError};
use crate::linalg::dot;
use crate::specfn;
use crate::vmf::{VmfClassifier, VmfParams};

/// Above this `max(kappa) / min(kappa)` a warning is logged: the overlap surface
/// gets badly conditioned when compactness values differ by orders of magnitude.
pub const KAPPA_SPREAD_WARNING: f64 = 100.0;

/// Per-class quantities reused by every pair involving the class.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ClassStats {
    pub kappa: f64,
    pub log_norm: f64,
    pub ratio: f64,
    pub ratio_deriv: f64,
}

impl ClassStats {
    pub(crate) fn new(d: usize, kappa: f64) -> Result<Self> {
        let ratio = specfn::bessel_ratio(d, kappa)?;
        Ok(ClassStats {
            kappa,
            log_norm: specfn::log_norm_const(d, kappa)?,
            ratio,
            ratio_deriv: 1.0 - ratio * ratio - (d as f64 - 1.0) * ratio / kappa,
        })
    }

    pub(crate) fn for_classifier(clf: &VmfClassifier) -> Result<Vec<Self>> {
        clf.classes()
            .iter()
            .map(|c| ClassStats::new(clf.dim(), c.kappa()))
            .collect()
    }
}

/// `KL(p_i || p_j) = log C(k_i) - log C(k_j) + A(k_i) (k_i - k_j cos)`.
#[inline]
pub(crate) fn pair_kl(si: &ClassStats, sj: &ClassStats, cos: f64) -> f64 {
    si.log_norm - sj.log_norm + si.ratio * (si.kappa - sj.kappa * cos)
}

#[inline]
pub(crate) fn overlap_from_kl(kl: f64) -> f64 {
    // KL is non-negative analytically; rounding can leave it at -1e-16.
    1.0 / (1.0 + kl.max(0.0))
}

/// Scalar partials of `o(i -> j)` given `cos = <mu_i, mu_j>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPartials {
    pub overlap: f64,
    pub d_kappa_i: f64,
    pub d_kappa_j: f64,
    /// Partial with respect to the cosine `<mu_i, mu_j>`; never negative.
    pub d_cos: f64,
}

#[inline]
pub(crate) fn pair_partials(si: &ClassStats, sj: &ClassStats, cos: f64) -> PairPartials {
    let o = overlap_from_kl(pair_kl(si, sj, cos));
    let o2 = o * o;
    PairPartials {
        overlap: o,
        d_kappa_i: o2 * si.ratio_deriv * (sj.kappa * cos - si.kappa),
        d_kappa_j: o2 * (si.ratio * cos - sj.ratio),
        d_cos: o2 * sj.kappa * si.ratio,
    }
}

/// Overlap and its partials as a function of `(kappa_i, kappa_j, cos)` only.
pub fn pair_surface(d: usize, kappa_i: f64, kappa_j: f64, cos: f64) -> Result<PairPartials> {
    if !(-1.0..=1.0).contains(&cos) {
        return Err(VmfError::domain(format!("cosine {cos} outside [-1, 1]")));
    }
    let si = ClassStats::new(d, kappa_i)?;
    let sj = ClassStats::new(d, kappa_j)?;
    Ok(pair_partials(&si, &sj, cos))
}

fn check_pair(pi: &VmfParams, pj: &VmfParams) -> Result<()> {
    if pi.dim() != pj.dim() {
        return Err(VmfError::domain(format!(
            "dimension mismatch: {} vs {}",
            pi.dim(),
            pj.dim()
        )));
    }
    Ok(())
}

pub fn kl_vmf(pi: &VmfParams, pj: &VmfParams) -> Result<f64> {
    check_pair(pi, pj)?;
    let si = ClassStats::new(pi.dim(), pi.kappa())?;
    let sj = ClassStats::new(pj.dim(), pj.kappa())?;
    Ok(pair_kl(&si, &sj, dot(pi.mu(), pj.mu())))
}

pub fn overlap_coeff(pi: &VmfParams, pj: &VmfParams) -> Result<f64> {
    Ok(overlap_from_kl(kl_vmf(pi, pj)?))
}

/// Gradient of `o(i -> j)` with respect to both compactness values and both
/// orientations. Orientation gradients are ambient; project onto the tangent
/// space of the sphere before stepping.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapGrads {
    pub overlap: f64,
    pub d_kappa_i: f64,
    pub d_kappa_j: f64,
    pub d_mu_i: Vec<f64>,
    pub d_mu_j: Vec<f64>,
}

pub fn overlap_grads(pi: &VmfParams, pj: &VmfParams) -> Result<OverlapGrads> {
    check_pair(pi, pj)?;
    let si = ClassStats::new(pi.dim(), pi.kappa())?;
    let sj = ClassStats::new(pj.dim(), pj.kappa())?;
    let p = pair_partials(&si, &sj, dot(pi.mu(), pj.mu()));
    Ok(OverlapGrads {
        overlap: p.overlap,
        d_kappa_i: p.d_kappa_i,
        d_kappa_j: p.d_kappa_j,
        d_mu_i: pj.mu().iter().map(|v| p.d_cos * v).collect(),
        d_mu_j: pi.mu().iter().map(|v| p.d_cos * v).collect(),
    })
}

/// Directed pairwise overlaps of a classifier plus per-class row averages.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    num_classes: usize,
    values: Vec<f64>,
    row_avg: Vec<f64>,
}

impl OverlapMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `o(i -> j)`; the diagonal is exactly 1.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.num_classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// `o_i`: mean of the off-diagonal entries of row `i`.
    pub fn row_avg(&self) -> &[f64] {
        &self.row_avg
    }

    /// Mean of the row averages.
    pub fn mean(&self) -> f64 {
        self.row_avg.iter().sum::<f64>() / self.num_classes as f64
    }

    /// `row,col,value` for every entry, diagonal included.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "row,col,value")?;
        for i in 0..self.num_classes {
            for j in 0..self.num_classes {
                writeln!(w, "{i},{j},{}", self.get(i, j))?;
            }
        }
        Ok(())
    }

    pub fn write_row_avg_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "class,row_avg")?;
        for (i, o) in self.row_avg.iter().enumerate() {
            writeln!(w, "{i},{o}")?;
        }
        Ok(())
    }
}

pub fn overlap_matrix(clf: &VmfClassifier) -> Result<OverlapMatrix> {
    let c = clf.num_classes();
    if c < 2 {
        return Err(VmfError::domain("overlap matrix needs at least 2 classes"));
    }
    warn_on_kappa_spread(clf);
    let stats = ClassStats::for_classifier(clf)?;
    let mut values = vec![0.0; c * c];
    let mut row_avg = vec![0.0; c];
    for i in 0..c {
        let mut sum = 0.0;
        for j in 0..c {
            let v = if i == j {
                1.0
            } else {
                let cos = dot(clf.class(i).mu(), clf.class(j).mu());
                let o = overlap_from_kl(pair_kl(&stats[i], &stats[j], cos));
                sum += o;
                o
            };
            values[i * c + j] = v;
        }
        row_avg[i] = sum / (c - 1) as f64;
    }
    Ok(OverlapMatrix {
        num_classes: c,
        values,
        row_avg,
    })
}

fn warn_on_kappa_spread(clf: &VmfClassifier) {
    let kappas = clf.kappas();
    let max = kappas.iter().cloned().fold(f64::MIN, f64::max);
    let min = kappas.iter().cloned().fold(f64::MAX, f64::min);
    if max / min > KAPPA_SPREAD_WARNING {
        log::warn!(
            "compactness spread max/min = {:.1} exceeds {KAPPA_SPREAD_WARNING}; \
             overlap gradients may be poorly scaled",
            max / min
        );
    }
}
