//! Feature maps, bilinear sampling, and the oracle feature pyramid.
//!
//! The oracle pyramid replaces the convolutional encoder with
//! area-downsampled image intensities so geometric tests do not depend on
//! feature quality.

use nalgebra::Vector2;
use ndarray::{Array3, ArrayView1};

use crate::error::{Error, Result};

/// Channel counts per pyramid scale in the default configuration, from the
/// full-resolution scale down to 1/8.
pub const PYRAMID_CHANNELS: [usize; 4] = [8, 16, 32, 64];

/// A single-scale feature map, `(H, W, C)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("feature map contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn at(&self, y: usize, x: usize) -> ArrayView1<'_, f64> {
        self.data.slice(ndarray::s![y, x, ..])
    }

    /// Bilinear sample at a continuous coordinate.
    ///
    /// Coordinates outside `[0, W-1] x [0, H-1]` yield zeros with
    /// `valid = false`; coordinates exactly on the boundary clamp.
    pub fn bilinear_sample(&self, coord: Vector2<f64>) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.channels()];
        let valid = self.bilinear_sample_into(coord, &mut out);
        (out, valid)
    }

    /// Allocation-free variant of [`Self::bilinear_sample`]; `out` must hold
    /// `C` entries. Returns the validity flag, filling zeros when invalid.
    pub fn bilinear_sample_into(&self, coord: Vector2<f64>, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.channels());
        let (h, w, _) = self.data.dim();
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        if !(coord.x >= 0.0 && coord.x <= max_x && coord.y >= 0.0 && coord.y <= max_y) {
            out.fill(0.0);
            return false;
        }
        let x0 = (coord.x.floor() as usize).min(w - 1);
        let y0 = (coord.y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = coord.x - x0 as f64;
        let fy = coord.y - y0 as f64;
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        let p00 = self.at(y0, x0);
        let p01 = self.at(y0, x1);
        let p10 = self.at(y1, x0);
        let p11 = self.at(y1, x1);
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
        }
        true
    }
}

/// Average RGB intensity of an `(H, W, 3)` image.
fn intensity(image: &Array3<f64>) -> ndarray::Array2<f64> {
    let (h, w, _) = image.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        (image[(y, x, 0)] + image[(y, x, 1)] + image[(y, x, 2)]) / 3.0
    })
}

/// Oracle-bypass pyramid: scale `k` holds the image intensity area-downsampled
/// by `2^k`, replicated across that scale's channel count.
pub fn oracle_pyramid(image: &Array3<f64>) -> Result<Vec<FeatureMap>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::usage(format!("expected 3-channel image, got {c}")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::usage(format!(
            "image dimensions {h}x{w} must be divisible by 8"
        )));
    }
    let gray = intensity(image);
    let mut maps = Vec::with_capacity(4);
    for (k, &channels) in PYRAMID_CHANNELS.iter().enumerate() {
        let f = 1usize << k;
        let (sh, sw) = (h / f, w / f);
        let mut data = Array3::zeros((sh, sw, channels));
        for y in 0..sh {
            for x in 0..sw {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += gray[(y * f + dy, x * f + dx)];
                    }
                }
                let v = acc / (f * f) as f64;
                for ch in 0..channels {
                    data[(y, x, ch)] = v;
                }
            }
        }
        maps.push(FeatureMap { data });
    }
    Ok(maps)
}
