//! Cross-attention along epipolar lines and group-wise correlation, fused
//! across source views into a cost volume; plus the variance baseline.
//!
//! All operations are per-pixel and pure. Invalid depth bins carry exact
//! zeros in the keys and are masked out of the softmax rather than scored
//! at zero logit, so zero-padded features receive no spurious weight.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Sampled key features for one pixel and one source view: a `C x D` matrix
/// of per-bin features plus the per-bin validity mask. Invalid bins hold
/// exact zeros.
#[derive(Debug, Clone)]
pub struct EpipolarKeys {
    pub features: Array2<f64>,
    pub valid: Vec<bool>,
}

impl EpipolarKeys {
    pub fn new(mut features: Array2<f64>, valid: Vec<bool>) -> Result<Self> {
        let (_, d) = features.dim();
        if valid.len() != d {
            return Err(Error::usage("validity mask length must match bin count"));
        }
        for (j, &ok) in valid.iter().enumerate() {
            if !ok {
                features.column_mut(j).fill(0.0);
            }
        }
        Ok(Self { features, valid })
    }

    pub fn depth_count(&self) -> usize {
        self.features.dim().1
    }
}

/// Fused matching costs for a whole stage: `(H, W, G, D)` values plus the
/// per-bin flags marking bins no view could score.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub values: Array4<f64>,
    /// `(H, W, D)`; true where every view was invalid at that bin.
    pub flagged: Array3<bool>,
    pub groups: usize,
    pub depth_count: usize,
}

impl CostVolume {
    pub fn new(values: Array4<f64>, flagged: Array3<bool>) -> Result<Self> {
        let (h, w, g, d) = values.dim();
        if flagged.dim() != (h, w, d) {
            return Err(Error::usage("cost volume flag shape mismatch"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("cost volume contains non-finite values"));
        }
        Ok(Self {
            values,
            flagged,
            groups: g,
            depth_count: d,
        })
    }
}

/// Attention weights over depth bins: softmax of the scaled dot product
/// `keys^T query / (t_e sqrt(C))`, masked to the valid bins and
/// renormalized.
///
/// Returns the weight vector and an all-invalid flag; when every bin is
/// invalid the weights are uniform and the flag is set.
pub fn attention_weights(
    query: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
    valid: &[bool],
    t_e: f64,
) -> Result<(Array1<f64>, bool)> {
    let (c, d) = keys.dim();
    if t_e <= 0.0 {
        return Err(Error::config("attention temperature must be positive"));
    }
    if c == 0 || query.len() != c || valid.len() != d {
        return Err(Error::usage("attention query/keys/mask shapes disagree"));
    }
    let scale = 1.0 / (t_e * (c as f64).sqrt());
    let mut logits = vec![f64::NEG_INFINITY; d];
    let mut max_logit = f64::NEG_INFINITY;
    for j in 0..d {
        if valid[j] {
            let mut dot = 0.0;
            for i in 0..c {
                dot += keys[(i, j)] * query[i];
            }
            let l = dot * scale;
            logits[j] = l;
            if l > max_logit {
                max_logit = l;
            }
        }
    }
    if max_logit == f64::NEG_INFINITY {
        return Ok((Array1::from_elem(d, 1.0 / d as f64), true));
    }
    let mut weights = Array1::zeros(d);
    let mut sum = 0.0;
    for j in 0..d {
        if valid[j] {
            let w = (logits[j] - max_logit).exp();
            weights[j] = w;
            sum += w;
        }
    }
    weights.mapv_inplace(|w| w / sum);
    Ok((weights, false))
}

/// Group-wise correlation values: `s[g][d] = <v_g_d, p_g> / G` over
/// contiguous channel groups. Invalid bins yield zero columns.
pub fn group_correlation(
    query: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
    valid: &[bool],
    groups: usize,
) -> Result<Array2<f64>> {
    let (c, d) = keys.dim();
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "group count {groups} must divide channel count {c}"
        )));
    }
    if query.len() != c || valid.len() != d {
        return Err(Error::usage("correlation query/keys/mask shapes disagree"));
    }
    let group_size = c / groups;
    let inv_g = 1.0 / groups as f64;
    let mut out = Array2::zeros((groups, d));
    for j in 0..d {
        if !valid[j] {
            continue;
        }
        for g in 0..groups {
            let base = g * group_size;
            let mut dot = 0.0;
            for i in 0..group_size {
                dot += keys[(base + i, j)] * query[base + i];
            }
            out[(g, j)] = dot * inv_g;
        }
    }
    Ok(out)
}

/// Fuse per-view correlation values with per-view attention weights:
/// `c[g][d] = sum_i w_i[d] s_i[g][d] / sum_i w_i[d]`.
///
/// Bins where the total weight vanishes (all views invalid there) are zeroed
/// and flagged. Contributions are summed in the order the views are given.
pub fn fuse_views(
    values: &[Array2<f64>],
    weights: &[Array1<f64>],
) -> Result<(Array2<f64>, Vec<bool>)> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::usage("need matching, non-empty values and weights"));
    }
    let (g, d) = values[0].dim();
    for (v, w) in values.iter().zip(weights) {
        if v.dim() != (g, d) || w.len() != d {
            return Err(Error::usage("fusion shapes disagree across views"));
        }
    }
    let mut fused = Array2::zeros((g, d));
    let mut flagged = vec![false; d];
    for j in 0..d {
        let total: f64 = weights.iter().map(|w| w[j]).sum();
        if total < 1e-12 {
            flagged[j] = true;
            continue;
        }
        if values.len() == 1 {
            // Weights cancel exactly for a single view.
            for gi in 0..g {
                fused[(gi, j)] = values[0][(gi, j)];
            }
            continue;
        }
        for gi in 0..g {
            let mut acc = 0.0;
            for (v, w) in values.iter().zip(weights) {
                acc += w[j] * v[(gi, j)];
            }
            fused[(gi, j)] = acc / total;
        }
    }
    Ok((fused, flagged))
}

/// Variance fusion baseline: element-wise population variance across the
/// given volumes (the reference feature broadcast along depth plus one
/// volume per source view).
pub fn variance_fusion(volumes: &[Array2<f64>]) -> Result<Array2<f64>> {
    if volumes.len() < 2 {
        return Err(Error::usage("variance fusion needs at least 2 volumes"));
    }
    let dim = volumes[0].dim();
    for v in volumes {
        if v.dim() != dim {
            return Err(Error::usage("variance fusion shapes disagree"));
        }
    }
    let n = volumes.len() as f64;
    let mut mean = Array2::<f64>::zeros(dim);
    for v in volumes {
        mean += v;
    }
    mean.mapv_inplace(|m| m / n);
    let mut var = Array2::<f64>::zeros(dim);
    for v in volumes {
        let diff = v - &mean;
        var += &(&diff * &diff);
    }
    var.mapv_inplace(|s| s / n);
    Ok(var)
}
