//! Depth hypothesis generation: inverse-depth sampling for the first
//! cascade stage and per-pixel refinement around the previous prediction.

use ndarray::{Array3, ArrayView1};

use crate::error::{Error, Result};
use crate::pipeline::DepthMap;

/// Minimum separation between successive hypotheses, as a fraction of the
/// global depth range.
const SEPARATION_FRAC: f64 = 1e-9;

/// Per-pixel sampled depths for one cascade stage, ascending along the last
/// axis and uniform in inverse depth before clamping.
#[derive(Debug, Clone)]
pub struct DepthHypothesisSet {
    pub stage: usize,
    /// Hypotheses per pixel (D_k).
    pub count: usize,
    /// `(H, W, D)` depth values.
    pub values: Array3<f64>,
    /// Span covered per pixel, in inverse depth (1/d units).
    pub inverse_span: f64,
}

impl DepthHypothesisSet {
    /// The D hypothesized depths at one pixel.
    pub fn at(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![y, x, ..])
    }
}

/// Stage-0 hypotheses: `D` samples per pixel with equidistant inverse depths
/// from `1/d_min` to `1/d_max`, identical at every pixel.
pub fn init_inverse_depth_hypotheses(
    d_min: f64,
    d_max: f64,
    count: usize,
    height: usize,
    width: usize,
) -> Result<DepthHypothesisSet> {
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::config(format!(
            "invalid depth range [{d_min}, {d_max}]"
        )));
    }
    if count < 2 {
        return Err(Error::config("need at least 2 depth hypotheses"));
    }
    let inv_min = 1.0 / d_min;
    let inv_max = 1.0 / d_max;
    let column: Vec<f64> = (0..count)
        .map(|j| {
            let t = j as f64 / (count - 1) as f64;
            1.0 / (inv_min + t * (inv_max - inv_min))
        })
        .collect();
    let mut values = Array3::zeros((height, width, count));
    for y in 0..height {
        for x in 0..width {
            for (j, &d) in column.iter().enumerate() {
                values[(y, x, j)] = d;
            }
        }
    }
    Ok(DepthHypothesisSet {
        stage: 0,
        count,
        values,
        inverse_span: inv_min - inv_max,
    })
}

/// Inverse-depth span for the next cascade stage: the previous span divided
/// by `D_prev - 1`.
pub fn next_inverse_range(prev_inverse_span: f64, d_prev: usize) -> Result<f64> {
    if d_prev < 2 {
        return Err(Error::config("previous stage needs at least 2 hypotheses"));
    }
    if prev_inverse_span <= 0.0 {
        return Err(Error::config("inverse-depth span must be positive"));
    }
    Ok(prev_inverse_span / (d_prev - 1) as f64)
}

/// Per-pixel hypotheses for stage `stage`, centered in inverse depth at the
/// previous prediction (already upsampled to this stage's resolution).
///
/// Samples sit at inverse-depth offsets `(j - (D-1)/2) * span/D`, are clamped
/// to the global range, reordered ascending, and nudged apart by a minimal
/// separation. Pixels with an invalid previous depth fall back to stage-0
/// sampling.
pub fn refine_hypotheses(
    prev: &DepthMap,
    stage: usize,
    count: usize,
    inverse_span: f64,
    d_min: f64,
    d_max: f64,
) -> Result<DepthHypothesisSet> {
    if count < 2 {
        return Err(Error::config("need at least 2 depth hypotheses"));
    }
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::config(format!(
            "invalid depth range [{d_min}, {d_max}]"
        )));
    }
    let (height, width) = prev.depth.dim();
    let inv_lo = 1.0 / d_max;
    let inv_hi = 1.0 / d_min;
    let sep = SEPARATION_FRAC * (d_max - d_min);
    let fallback = stage0_column(d_min, d_max, count);

    let mut values = Array3::zeros((height, width, count));
    let mut buf = vec![0.0f64; count];
    for y in 0..height {
        for x in 0..width {
            let d_prev = prev.depth[(y, x)];
            if prev.valid[(y, x)] && d_prev > 0.0 && d_prev.is_finite() {
                let inv_center = 1.0 / d_prev;
                for (j, slot) in buf.iter_mut().enumerate() {
                    let offset =
                        (j as f64 - (count - 1) as f64 / 2.0) * inverse_span / count as f64;
                    // Larger inverse depth = smaller depth; clamp in inverse
                    // space, which is equivalent to clamping the depth.
                    let inv = (inv_center + offset).clamp(inv_lo, inv_hi);
                    *slot = 1.0 / inv;
                }
                buf.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
                for j in 1..count {
                    if buf[j] - buf[j - 1] < sep {
                        buf[j] = buf[j - 1] + sep;
                    }
                }
                for (j, &d) in buf.iter().enumerate() {
                    values[(y, x, j)] = d;
                }
            } else {
                for (j, &d) in fallback.iter().enumerate() {
                    values[(y, x, j)] = d;
                }
            }
        }
    }
    Ok(DepthHypothesisSet {
        stage,
        count,
        values,
        inverse_span,
    })
}

fn stage0_column(d_min: f64, d_max: f64, count: usize) -> Vec<f64> {
    let inv_min = 1.0 / d_min;
    let inv_max = 1.0 / d_max;
    (0..count)
        .map(|j| {
            let t = j as f64 / (count - 1) as f64;
            1.0 / (inv_min + t * (inv_max - inv_min))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;

    #[test]
    fn endpoints_are_range_bounds() {
        let h = init_inverse_depth_hypotheses(425.0, 935.0, 2, 1, 1).unwrap();
        assert_relative_eq!(h.values[(0, 0, 0)], 425.0);
        assert_relative_eq!(h.values[(0, 0, 1)], 935.0);
    }

    #[test]
    fn middle_sample_is_harmonic_midpoint() {
        let h = init_inverse_depth_hypotheses(425.0, 935.0, 3, 1, 1).unwrap();
        // Hand-check oracle: inverse midpoint (1/425 + 1/935)/2.
        let expected = 2.0 / (1.0 / 425.0 + 1.0 / 935.0);
        assert_relative_eq!(h.values[(0, 0, 1)], expected, epsilon = 1e-9);
        assert!((expected - 584.375).abs() < 1e-9);
    }

    #[test]
    fn inverse_spacing_is_constant() {
        let h = init_inverse_depth_hypotheses(310.0, 1250.0, 16, 2, 2).unwrap();
        let diffs: Vec<f64> = (0..15)
            .map(|j| 1.0 / h.values[(1, 1, j)] - 1.0 / h.values[(1, 1, j + 1)])
            .collect();
        for d in &diffs {
            assert_relative_eq!(*d, diffs[0], max_relative = 1e-12);
        }
    }

    #[test]
    fn init_rejects_bad_inputs() {
        assert!(init_inverse_depth_hypotheses(425.0, 935.0, 1, 1, 1).is_err());
        assert!(init_inverse_depth_hypotheses(-1.0, 935.0, 4, 1, 1).is_err());
        assert!(init_inverse_depth_hypotheses(935.0, 425.0, 4, 1, 1).is_err());
    }

    #[test]
    fn next_range_divides_by_count_minus_one() {
        let s = 1.0 / 425.0 - 1.0 / 935.0;
        assert_relative_eq!(next_inverse_range(s, 8).unwrap(), s / 7.0);
        assert_relative_eq!(next_inverse_range(s, 2).unwrap(), s);
        assert!(next_inverse_range(s, 1).is_err());
    }

    #[test]
    fn chained_ranges_compound() {
        let s = 0.0012834;
        let s1 = next_inverse_range(s, 8).unwrap();
        let s2 = next_inverse_range(s1, 8).unwrap();
        let s3 = next_inverse_range(s2, 4).unwrap();
        assert_relative_eq!(s1, s / 7.0, max_relative = 1e-12);
        assert_relative_eq!(s2, s / 49.0, max_relative = 1e-12);
        assert_relative_eq!(s3, s / 147.0, max_relative = 1e-12);
    }

    fn depth_map(h: usize, w: usize, d: f64) -> DepthMap {
        DepthMap {
            depth: Array2::from_elem((h, w), d),
            valid: Array2::from_elem((h, w), true),
            confidence: Array2::from_elem((h, w), 1.0),
        }
    }

    #[test]
    fn refine_offsets_match_centering_rule() {
        let prev = depth_map(1, 1, 600.0);
        let span = 1e-5;
        let h = refine_hypotheses(&prev, 1, 4, span, 425.0, 935.0).unwrap();
        // Hand-computed: inverse offsets {-3/2,-1/2,1/2,3/2} * span/4 around
        // 1/600, then depths sorted ascending.
        let inv = 1.0 / 600.0;
        let mut expected: Vec<f64> = [-1.5, -0.5, 0.5, 1.5]
            .iter()
            .map(|m| 1.0 / (inv + m * span / 4.0))
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for j in 0..4 {
            assert_relative_eq!(h.values[(0, 0, j)], expected[j], max_relative = 1e-12);
        }
    }

    #[test]
    fn refine_clamps_at_range_boundary() {
        let prev = depth_map(1, 1, 425.0);
        let h = refine_hypotheses(&prev, 1, 4, 1e-4, 425.0, 935.0).unwrap();
        for j in 0..4 {
            assert!(h.values[(0, 0, j)] >= 425.0);
            assert!(h.values[(0, 0, j)] <= 935.0);
        }
        // Strictly increasing even after clamping.
        for j in 1..4 {
            assert!(h.values[(0, 0, j)] > h.values[(0, 0, j - 1)]);
        }
    }

    #[test]
    fn refine_zero_span_collapses_to_center() {
        let prev = depth_map(1, 1, 612.0);
        let h = refine_hypotheses(&prev, 2, 4, 0.0, 425.0, 935.0).unwrap();
        let sep = 1e-9 * 510.0;
        for j in 0..4 {
            assert!((h.values[(0, 0, j)] - 612.0).abs() <= 4.0 * sep + 1e-9);
        }
        for j in 1..4 {
            assert!(h.values[(0, 0, j)] > h.values[(0, 0, j - 1)]);
        }
    }

    #[test]
    fn refine_falls_back_on_invalid_pixels() {
        let mut prev = depth_map(1, 2, 600.0);
        prev.valid[(0, 1)] = false;
        let h = refine_hypotheses(&prev, 1, 4, 1e-5, 425.0, 935.0).unwrap();
        let fallback = stage0_column(425.0, 935.0, 4);
        #[allow(clippy::needless_range_loop)]
        for j in 0..4 {
            assert_relative_eq!(h.values[(0, 1, j)], fallback[j]);
        }
        assert!((h.values[(0, 0, 1)] - 600.0).abs() < 20.0);
    }
}
