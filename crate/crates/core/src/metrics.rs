//! Distributional distances between generated and reference samples:
//! exact empirical W₁ and W₂², and biased-estimator MMD with a Gaussian or a
//! mixture-of-Gaussians kernel.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ot::{cost_matrix, distance_matrix, exact_plan, uniform_weights};
use crate::points::{sq_dist, Points};

/// Bandwidth multipliers of the mixture kernel, applied to the inverse median
/// pairwise squared distance.
pub const MIXTURE_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Kernel {
    /// `exp(−γ‖x − y‖²)`
    Gaussian { gamma: f64 },
    /// Unweighted average of Gaussian kernels.
    Mixture { gammas: Vec<f64> },
}

impl Kernel {
    fn validate(&self) -> Result<()> {
        let ok = |g: f64| g > 0.0 && g.is_finite();
        match self {
            Kernel::Gaussian { gamma } if ok(*gamma) => Ok(()),
            Kernel::Mixture { gammas } if !gammas.is_empty() && gammas.iter().all(|&g| ok(g)) => {
                Ok(())
            }
            _ => Err(invalid("kernel bandwidths must be positive and finite")),
        }
    }

    #[inline]
    fn eval_sq(&self, d2: f64) -> f64 {
        match self {
            Kernel::Gaussian { gamma } => (-gamma * d2).exp(),
            Kernel::Mixture { gammas } => {
                gammas.iter().map(|g| (-g * d2).exp()).sum::<f64>() / gammas.len() as f64
            }
        }
    }
}

fn check_pair(x: &Points, y: &Points) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(invalid("metric inputs must be non-empty"));
    }
    if x.dim() != y.dim() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Exact empirical Wasserstein cost with uniform weights: `p = 1` gives W₁
/// under Euclidean cost, `p = 2` gives W₂² (not rooted).
pub fn wasserstein(x: &Points, y: &Points, p: u32) -> Result<f64> {
    check_pair(x, y)?;
    let cost = match p {
        1 => distance_matrix(x, y)?,
        2 => cost_matrix(x, y)?,
        other => return Err(invalid(format!("unsupported Wasserstein order {other}"))),
    };
    let plan = exact_plan(
        &cost,
        &uniform_weights(x.rows()),
        &uniform_weights(y.rows()),
    )?;
    Ok(plan.cost(&cost))
}

fn mean_kernel(a: &Points, b: &Points, k: &Kernel) -> f64 {
    let mut s = 0.0;
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            s += k.eval_sq(sq_dist(ra, rb));
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// Biased (V-statistic) estimate `E k(X,X') + E k(Y,Y') − 2 E k(X,Y)`.
pub fn mmd(x: &Points, y: &Points, kernel: &Kernel) -> Result<f64> {
    check_pair(x, y)?;
    kernel.validate()?;
    Ok(mean_kernel(x, x, kernel) + mean_kernel(y, y, kernel) - 2.0 * mean_kernel(x, y, kernel))
}

/// Median pairwise squared distance of the pooled sample.
pub fn median_sq_distance(x: &Points, y: &Points) -> f64 {
    let pooled: Vec<&[f64]> = x.iter_rows().chain(y.iter_rows()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

/// Inverse-median-heuristic Gaussian and mixture kernels for the pair.
pub fn default_kernels(x: &Points, y: &Points) -> (Kernel, Kernel) {
    let med = median_sq_distance(x, y);
    let base = if med > 0.0 && med.is_finite() {
        1.0 / med
    } else {
        1.0
    };
    (
        Kernel::Gaussian { gamma: base },
        Kernel::Mixture {
            gammas: MIXTURE_SCALES.iter().map(|s| s * base).collect(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub w1: f64,
    pub w2_sq: f64,
    /// MMD values clamped at zero.
    pub mmd_gaussian: f64,
    pub mmd_mixture: f64,
    pub mmd_gaussian_raw: f64,
    pub mmd_mixture_raw: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub gaussian_kernel: Kernel,
    pub mixture_kernel: Kernel,
}

/// All four metrics. Kernels default to the median heuristic on the pooled
/// sample.
pub fn evaluate(
    generated: &Points,
    reference: &Points,
    kernels: Option<(Kernel, Kernel)>,
) -> Result<MetricReport> {
    check_pair(generated, reference)?;
    let (gk, mk) = kernels.unwrap_or_else(|| default_kernels(generated, reference));
    let g = mmd(generated, reference, &gk)?;
    let m = mmd(generated, reference, &mk)?;
    Ok(MetricReport {
        w1: wasserstein(generated, reference, 1)?,
        w2_sq: wasserstein(generated, reference, 2)?,
        mmd_gaussian: g.max(0.0),
        mmd_mixture: m.max(0.0),
        mmd_gaussian_raw: g,
        mmd_mixture_raw: m,
        n_generated: generated.rows(),
        n_reference: reference.rows(),
        gaussian_kernel: gk,
        mixture_kernel: mk,
    })
}
