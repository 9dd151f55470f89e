//! Depth-aware classification losses: entropy-regularized optimal transport
//! between depth distributions with a closed-form 1-D Wasserstein oracle,
//! plus cross-entropy and L1 baselines and the combined multi-stage loss.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hypothesis::DepthHypothesisSet;
use crate::par;
use crate::regularizer::ProbabilityVolume;

/// A discrete distribution over strictly increasing depth-bin positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    pub bins: Vec<f64>,
    pub mass: Vec<f64>,
}

impl DepthDistribution {
    pub fn new(bins: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        if bins.len() != mass.len() || bins.is_empty() {
            return Err(Error::usage(
                "bins and mass must be non-empty and equal length",
            ));
        }
        if bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::usage("bins must be strictly increasing"));
        }
        if mass.iter().any(|&m| !m.is_finite() || m < 0.0) {
            return Err(Error::usage("mass must be non-negative and finite"));
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!("mass sums to {sum}, expected 1")));
        }
        Ok(Self { bins, mass })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.bins[self.len() - 1] - self.bins[0]
    }

    fn same_bins(&self, other: &Self) -> bool {
        self.bins.len() == other.bins.len()
            && self
                .bins
                .iter()
                .zip(&other.bins)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Ground-truth distribution for a scalar depth: mass split linearly between
/// the two enclosing bins, or one-hot at the nearest boundary bin when the
/// depth falls outside the bin range.
pub fn gt_distribution(gt_depth: f64, bins: &[f64]) -> Result<DepthDistribution> {
    if !gt_depth.is_finite() {
        return Err(Error::usage("ground-truth depth is not finite"));
    }
    if bins.is_empty() || bins.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::usage("bins must be strictly increasing"));
    }
    let d = bins.len();
    let mut mass = vec![0.0; d];
    if gt_depth <= bins[0] {
        mass[0] = 1.0;
    } else if gt_depth >= bins[d - 1] {
        mass[d - 1] = 1.0;
    } else {
        let j = bins.partition_point(|&b| b <= gt_depth) - 1;
        if bins[j] == gt_depth {
            mass[j] = 1.0;
        } else {
            let t = (gt_depth - bins[j]) / (bins[j + 1] - bins[j]);
            mass[j] = 1.0 - t;
            mass[j + 1] = t;
        }
    }
    DepthDistribution::new(bins.to_vec(), mass)
}

/// Exact 1-D Wasserstein-1 distance for ground cost `|x - y|`:
/// the CDF difference integrated over the bin gaps.
pub fn w1_closed_form(p: &DepthDistribution, q: &DepthDistribution) -> Result<f64> {
    if !p.same_bins(q) {
        return Err(Error::usage("distributions live on different bins"));
    }
    let d = p.len();
    let mut cdf_p = 0.0;
    let mut cdf_q = 0.0;
    let mut total = 0.0;
    for j in 0..d - 1 {
        cdf_p += p.mass[j];
        cdf_q += q.mass[j];
        total += (cdf_p - cdf_q).abs() * (p.bins[j + 1] - p.bins[j]);
    }
    Ok(total)
}

/// Result of one entropic optimal-transport solve.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// Transport cost of the entropic plan, `sum γ |x - y|`, excluding the
    /// entropy term.
    pub distance: f64,
    /// Plan with row marginals `P` and column marginals `Q`.
    pub plan: Array2<f64>,
    /// Dual potential for `P` (row side).
    pub dual_p: Vec<f64>,
    /// Dual potential for `Q` (column side).
    pub dual_q: Vec<f64>,
    /// Full entropic objective `<γ,C> + ε Σ γ (ln γ - 1)`; its gradient in
    /// `P` is `dual_p` up to an additive constant.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-domain Sinkhorn with geometric epsilon annealing (factor 0.5, floored
/// at the target epsilon). Iterations stop when both marginal violations
/// drop to `tol` in L1 or the total budget `max_iters` is exhausted;
/// non-convergence is reported through the flag, not as an error.
pub fn sinkhorn_w1(
    p: &DepthDistribution,
    q: &DepthDistribution,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    if epsilon <= 0.0 {
        return Err(Error::config("sinkhorn epsilon must be positive"));
    }
    if !p.same_bins(q) {
        return Err(Error::usage("distributions live on different bins"));
    }
    // Annealing schedule down to the target epsilon.
    let span = p.span();
    let mut schedule = Vec::new();
    let mut e = span * 0.5;
    while e > epsilon {
        schedule.push(e);
        e *= 0.5;
    }
    schedule.push(epsilon);
    solve(p, q, &schedule, max_iters, tol)
}

/// Single-epsilon cold-start solve without annealing. The distance converges
/// the same way, but the dual potentials avoid the frozen near-gauge
/// residue an annealing warm start can leave between weakly coupled bins,
/// which matters when the duals are used as gradients.
pub fn sinkhorn_w1_direct(
    p: &DepthDistribution,
    q: &DepthDistribution,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    if epsilon <= 0.0 {
        return Err(Error::config("sinkhorn epsilon must be positive"));
    }
    if !p.same_bins(q) {
        return Err(Error::usage("distributions live on different bins"));
    }
    solve(p, q, &[epsilon], max_iters, tol)
}

fn solve(
    p: &DepthDistribution,
    q: &DepthDistribution,
    schedule: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    let d = p.len();
    let epsilon = *schedule.last().expect("non-empty schedule");
    let cost = |i: usize, j: usize| (p.bins[i] - p.bins[j]).abs();

    let ln_p: Vec<f64> = p.mass.iter().map(|&m| m.ln()).collect();
    let ln_q: Vec<f64> = q.mass.iter().map(|&m| m.ln()).collect();
    let mut f = vec![0.0f64; d];
    let mut g = vec![0.0f64; d];
    let mut iterations = 0usize;
    let mut converged = false;

    let marginal_err = |f: &[f64], g: &[f64], eps: f64| -> f64 {
        let mut row_err = 0.0;
        let mut col_sums = vec![0.0f64; d];
        for (i, &fi) in f.iter().enumerate() {
            if p.mass[i] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (j, &gj) in g.iter().enumerate() {
                if q.mass[j] == 0.0 {
                    continue;
                }
                let v = ((fi + gj - cost(i, j)) / eps).exp();
                row += v;
                col_sums[j] += v;
            }
            row_err += (row - p.mass[i]).abs();
        }
        let col_err: f64 = (0..d).map(|j| (col_sums[j] - q.mass[j]).abs()).sum();
        row_err.max(col_err)
    };

    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage == schedule.len() - 1;
        // Intermediate stages warm-start the next one and always run to a
        // tight fixed tolerance; only the final stage uses the caller's.
        let stage_tol = if last { tol } else { 1e-6 };
        let budget = if last {
            max_iters.saturating_sub(iterations)
        } else {
            50.min(max_iters.saturating_sub(iterations))
        };
        for it in 0..budget {
            for i in 0..d {
                f[i] = if p.mass[i] == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    eps * (ln_p[i] - log_sum_exp((0..d).map(|j| (g[j] - cost(i, j)) / eps)))
                };
            }
            for j in 0..d {
                g[j] = if q.mass[j] == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    eps * (ln_q[j] - log_sum_exp((0..d).map(|i| (f[i] - cost(i, j)) / eps)))
                };
            }
            iterations += 1;
            // The marginal check costs as much as an iteration; probe it
            // periodically. A non-positive tolerance can never be met, so
            // the budget just runs out.
            if stage_tol > 0.0
                && (it % 4 == 3 || it == budget - 1)
                && marginal_err(&f, &g, eps) <= stage_tol
            {
                if last {
                    converged = true;
                }
                break;
            }
        }
        if last && !converged && tol > 0.0 {
            converged = marginal_err(&f, &g, eps) <= tol;
        }
    }

    let mut plan = Array2::zeros((d, d));
    let mut distance = 0.0;
    let mut objective = 0.0;
    for i in 0..d {
        for j in 0..d {
            let log_gamma = (f[i] + g[j] - cost(i, j)) / epsilon;
            if log_gamma == f64::NEG_INFINITY {
                continue;
            }
            let gamma = log_gamma.exp();
            plan[(i, j)] = gamma;
            distance += gamma * cost(i, j);
            objective += gamma * cost(i, j) + epsilon * gamma * (log_gamma - 1.0);
        }
    }
    Ok(SinkhornResult {
        distance,
        plan,
        dual_p: f,
        dual_q: g,
        objective,
        converged,
        iterations,
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Gradient of the entropic transport objective with respect to the logits
/// of `P = softmax(logits)`, via the dual potential (centered to zero mean)
/// chained through the softmax Jacobian.
pub fn ot_loss_gradient(
    logits: &[f64],
    q: &DepthDistribution,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, bool)> {
    if logits.len() != q.len() {
        return Err(Error::usage("logit count must match bin count"));
    }
    let p = DepthDistribution::new(q.bins.clone(), softmax(logits))?;
    let solve = sinkhorn_w1_direct(&p, q, epsilon, max_iters, tol)?;
    let d = logits.len();
    let mean: f64 = solve.dual_p.iter().sum::<f64>() / d as f64;
    let centered: Vec<f64> = solve.dual_p.iter().map(|&f| f - mean).collect();
    let inner: f64 = p.mass.iter().zip(&centered).map(|(&pi, &fi)| pi * fi).sum();
    let grad = (0..d).map(|k| p.mass[k] * (centered[k] - inner)).collect();
    Ok((grad, solve.converged))
}

/// Cross entropy `-sum Q_j ln(max(P_j, 1e-12))`; `P` is the prediction,
/// `Q` the target.
pub fn cross_entropy_loss(p: &DepthDistribution, q: &DepthDistribution) -> Result<f64> {
    if !p.same_bins(q) {
        return Err(Error::usage("distributions live on different bins"));
    }
    Ok(p.mass
        .iter()
        .zip(&q.mass)
        .map(|(&pj, &qj)| -qj * pj.max(1e-12).ln())
        .sum())
}

pub fn l1_depth_loss(pred_depth: f64, gt_depth: f64) -> f64 {
    (pred_depth - gt_depth).abs()
}

/// Solver settings for the per-pixel transport term of [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct OtParams {
    /// Epsilon as a fraction of the per-pixel bin span.
    pub epsilon_frac: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for OtParams {
    fn default() -> Self {
        Self {
            epsilon_frac: 0.05,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

/// Per-stage inputs to [`total_loss`]. The monocular depth map contributes
/// only when present.
pub struct StageLossInput<'a> {
    pub probs: &'a ProbabilityVolume,
    pub hyps: &'a DepthHypothesisSet,
    pub gt_depth: &'a Array2<f64>,
    pub valid: &'a Array2<bool>,
    pub mono_depth: Option<&'a Array2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub value: f64,
    /// Set when no valid pixel contributed.
    pub empty_valid_set: bool,
}

/// Default weight of the monocular L1 term.
pub const DEFAULT_LAMBDA: f64 = 3e-4;

/// Sum over stages and valid pixels of the transport distance between the
/// predicted distribution and the ground-truth distribution, plus
/// `lambda * |mono - gt|` where a monocular depth map is supplied.
///
/// Pixels with non-finite ground truth are treated as invalid. Per-row
/// partial sums are reduced in fixed row-major order, so the result is
/// independent of the worker count.
pub fn total_loss(stages: &[StageLossInput<'_>], lambda: f64, ot: &OtParams) -> Result<TotalLoss> {
    let mut value = 0.0;
    let mut any_valid = false;
    for input in stages {
        let (h, w, d) = input.probs.probs.dim();
        if input.hyps.values.dim() != (h, w, d)
            || input.gt_depth.dim() != (h, w)
            || input.valid.dim() != (h, w)
        {
            return Err(Error::usage("stage loss shapes disagree"));
        }
        if let Some(mono) = input.mono_depth {
            if mono.dim() != (h, w) {
                return Err(Error::usage("mono depth shape disagrees"));
            }
        }
        let rows: Vec<Result<(f64, bool)>> = par::map_indexed(h, |y| {
            let mut row_sum = 0.0;
            let mut row_any = false;
            for x in 0..w {
                let gt = input.gt_depth[(y, x)];
                if !input.valid[(y, x)] || !gt.is_finite() {
                    continue;
                }
                let bins: Vec<f64> = input.hyps.at(y, x).to_vec();
                let mass: Vec<f64> = input.probs.probs.slice(ndarray::s![y, x, ..]).to_vec();
                let p = DepthDistribution::new(bins.clone(), normalize(mass))?;
                let q = gt_distribution(gt, &bins)?;
                let eps = (ot.epsilon_frac * p.span()).max(1e-12);
                let solve = sinkhorn_w1(&p, &q, eps, ot.max_iters, ot.tol)?;
                row_sum += solve.distance;
                if let Some(mono) = input.mono_depth {
                    row_sum += lambda * l1_depth_loss(mono[(y, x)], gt);
                }
                row_any = true;
            }
            Ok((row_sum, row_any))
        });
        for row in rows {
            let (s, any) = row?;
            value += s;
            any_valid |= any;
        }
    }
    Ok(TotalLoss {
        value,
        empty_valid_set: !any_valid,
    })
}

/// Clean up tiny negative noise and renormalize exactly to the simplex.
fn normalize(mut mass: Vec<f64>) -> Vec<f64> {
    for m in &mut mass {
        if *m < 0.0 {
            *m = 0.0;
        }
    }
    let sum: f64 = mass.iter().sum();
    if sum > 0.0 {
        for m in &mut mass {
            *m /= sum;
        }
    }
    mass
}
