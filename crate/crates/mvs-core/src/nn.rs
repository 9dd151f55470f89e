//! Deterministic convolution primitives for loaded-weight forward passes.
//!
//! Batch normalization is folded into per-channel `scale`/`shift` at load
//! time, so a layer computes `relu?(scale * (conv(x) + bias) + shift)`.
//! All loops are plain nested iteration: identical inputs and weights give
//! bit-identical outputs on every run and thread count.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Conv3d,
    /// Transposed 3-D convolution; `stride` applies spatially, depth is
    /// never resampled.
    TConv3d,
}

/// One convolution layer with folded batch-norm parameters.
///
/// Kernel layout is row-major `(out, in, kh, kw, kd)` with `kd = 1` for 2-D
/// layers. Weights are stored as `f32` (the on-disk format) and widened
/// during application.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub kind: LayerKind,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub kd: usize,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub relu: bool,
}

impl ConvLayer {
    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kh * self.kw * self.kd
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.len() != self.kernel_len()
            || self.bias.len() != self.out_channels
            || self.scale.len() != self.out_channels
            || self.shift.len() != self.out_channels
        {
            return Err(Error::config(format!(
                "layer {}: parameter lengths do not match declared shape",
                self.name
            )));
        }
        if self.stride == 0 {
            return Err(Error::config(format!("layer {}: zero stride", self.name)));
        }
        Ok(())
    }

    fn tap(&self, o: usize, i: usize, ky: usize, kx: usize, kz: usize) -> f64 {
        let idx = (((o * self.in_channels + i) * self.kh + ky) * self.kw + kx) * self.kd + kz;
        self.kernel[idx] as f64
    }

    fn finish(&self, o: usize, acc: f64) -> f64 {
        let v = self.scale[o] as f64 * (acc + self.bias[o] as f64) + self.shift[o] as f64;
        if self.relu {
            v.max(0.0)
        } else {
            v
        }
    }

    /// 2-D convolution over an `(H, W, C)` input with zero padding `k/2`.
    pub fn apply2d(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        if self.kind != LayerKind::Conv2d {
            return Err(Error::usage(format!("layer {} is not 2-D", self.name)));
        }
        let (h, w, c) = input.dim();
        if c != self.in_channels {
            return Err(Error::usage(format!(
                "layer {}: expected {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut out = Array3::zeros((oh, ow, self.out_channels));
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..self.out_channels {
                    let mut acc = 0.0;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for i in 0..self.in_channels {
                                acc += self.tap(o, i, ky, kx, 0)
                                    * input[(iy as usize, ix as usize, i)];
                            }
                        }
                    }
                    out[(oy, ox, o)] = self.finish(o, acc);
                }
            }
        }
        Ok(out)
    }

    /// 3-D convolution over an `(H, W, D, C)` input; the stride applies to
    /// the two spatial axes only, the depth axis is padded `kd/2` and kept.
    pub fn apply3d(&self, input: &Array4<f64>) -> Result<Array4<f64>> {
        if self.kind != LayerKind::Conv3d {
            return Err(Error::usage(format!("layer {} is not 3-D", self.name)));
        }
        let (h, w, d, c) = input.dim();
        if c != self.in_channels {
            return Err(Error::usage(format!(
                "layer {}: expected {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let (ph, pw, pd) = (self.kh / 2, self.kw / 2, self.kd / 2);
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut out = Array4::zeros((oh, ow, d, self.out_channels));
        for oy in 0..oh {
            for ox in 0..ow {
                for oz in 0..d {
                    for o in 0..self.out_channels {
                        let mut acc = 0.0;
                        for ky in 0..self.kh {
                            let iy = (oy * self.stride + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let ix = (ox * self.stride + kx) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                for kz in 0..self.kd {
                                    let iz = (oz + kz) as isize - pd as isize;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for i in 0..self.in_channels {
                                        acc += self.tap(o, i, ky, kx, kz)
                                            * input[(iy as usize, ix as usize, iz as usize, i)];
                                    }
                                }
                            }
                        }
                        out[(oy, ox, oz, o)] = self.finish(o, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transposed 3-D convolution doubling the spatial axes when
    /// `stride == 2` (padding `k/2`, output padding `stride - 1`), identity
    /// shape when `stride == 1`. Depth is never resampled.
    pub fn apply_t3d(&self, input: &Array4<f64>) -> Result<Array4<f64>> {
        if self.kind != LayerKind::TConv3d {
            return Err(Error::usage(format!(
                "layer {} is not a transposed 3-D conv",
                self.name
            )));
        }
        let (h, w, d, c) = input.dim();
        if c != self.in_channels {
            return Err(Error::usage(format!(
                "layer {}: expected {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let s = self.stride;
        let (ph, pw, pd) = (self.kh / 2, self.kw / 2, self.kd / 2);
        let (oh, ow) = (h * s, w * s);
        let mut out = Array4::zeros((oh, ow, d, self.out_channels));
        for oy in 0..oh {
            for ox in 0..ow {
                for oz in 0..d {
                    for o in 0..self.out_channels {
                        let mut acc = 0.0;
                        for ky in 0..self.kh {
                            let ny = oy as isize + ph as isize - ky as isize;
                            if ny < 0 || ny % s as isize != 0 {
                                continue;
                            }
                            let iy = (ny / s as isize) as usize;
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let nx = ox as isize + pw as isize - kx as isize;
                                if nx < 0 || nx % s as isize != 0 {
                                    continue;
                                }
                                let ix = (nx / s as isize) as usize;
                                if ix >= w {
                                    continue;
                                }
                                for kz in 0..self.kd {
                                    let nz = oz as isize + pd as isize - kz as isize;
                                    if nz < 0 || nz >= d as isize {
                                        continue;
                                    }
                                    for i in 0..self.in_channels {
                                        acc += self.tap(o, i, ky, kx, kz)
                                            * input[(iy, ix, nz as usize, i)];
                                    }
                                }
                            }
                        }
                        out[(oy, ox, oz, o)] = self.finish(o, acc);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Nearest-neighbor 2x upsampling of an `(H, W, C)` map.
pub fn upsample2x(input: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = input.dim();
    Array3::from_shape_fn((h * 2, w * 2, c), |(y, x, ch)| input[(y / 2, x / 2, ch)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity2d(channels: usize) -> ConvLayer {
        // 1x1 kernel, identity channel map.
        let mut kernel = vec![0.0f32; channels * channels];
        for c in 0..channels {
            kernel[c * channels + c] = 1.0;
        }
        ConvLayer {
            name: "id".into(),
            kind: LayerKind::Conv2d,
            stride: 1,
            in_channels: channels,
            out_channels: channels,
            kh: 1,
            kw: 1,
            kd: 1,
            kernel,
            bias: vec![0.0; channels],
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            relu: false,
        }
    }

    #[test]
    fn identity_conv_preserves_input() {
        let input = Array3::from_shape_fn((3, 4, 2), |(y, x, c)| (y * 8 + x * 2 + c) as f64);
        let out = identity2d(2).apply2d(&input).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn box_blur_hand_check() {
        let layer = ConvLayer {
            name: "box".into(),
            kind: LayerKind::Conv2d,
            stride: 1,
            in_channels: 1,
            out_channels: 1,
            kh: 3,
            kw: 3,
            kd: 1,
            kernel: vec![1.0; 9],
            bias: vec![0.0],
            scale: vec![1.0],
            shift: vec![0.0],
            relu: false,
        };
        let mut input = Array3::zeros((3, 3, 1));
        input[(1, 1, 0)] = 1.0;
        let out = layer.apply2d(&input).unwrap();
        // Impulse under an all-ones kernel spreads to every covered pixel.
        for y in 0..3 {
            for x in 0..3 {
                assert_relative_eq!(out[(y, x, 0)], 1.0);
            }
        }
    }

    #[test]
    fn strided_conv_halves_spatial_dims() {
        let layer = ConvLayer {
            name: "down".into(),
            kind: LayerKind::Conv2d,
            stride: 2,
            in_channels: 1,
            out_channels: 1,
            kh: 5,
            kw: 5,
            kd: 1,
            kernel: vec![0.0; 25],
            bias: vec![0.0],
            scale: vec![1.0],
            shift: vec![0.0],
            relu: false,
        };
        let input = Array3::zeros((8, 12, 1));
        let out = layer.apply2d(&input).unwrap();
        assert_eq!(out.dim(), (4, 6, 1));
    }

    #[test]
    fn relu_clamps_negative_outputs() {
        let mut layer = identity2d(1);
        layer.relu = true;
        let input = Array3::from_shape_vec((1, 2, 1), vec![-3.0, 2.0]).unwrap();
        let out = layer.apply2d(&input).unwrap();
        assert_relative_eq!(out[(0, 0, 0)], 0.0);
        assert_relative_eq!(out[(0, 1, 0)], 2.0);
    }

    #[test]
    fn tconv_stride2_doubles_spatial_dims() {
        let layer = ConvLayer {
            name: "up".into(),
            kind: LayerKind::TConv3d,
            stride: 2,
            in_channels: 1,
            out_channels: 1,
            kh: 3,
            kw: 3,
            kd: 1,
            kernel: vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            bias: vec![0.0],
            scale: vec![1.0],
            shift: vec![0.0],
            relu: false,
        };
        let input =
            Array4::from_shape_fn((2, 3, 2, 1), |(y, x, z, _)| (y * 100 + x * 10 + z) as f64);
        let out = layer.apply_t3d(&input).unwrap();
        assert_eq!(out.dim(), (4, 6, 2, 1));
        // Center-tap kernel scatters each input to the even output lattice.
        for y in 0..2 {
            for x in 0..3 {
                for z in 0..2 {
                    assert_relative_eq!(out[(2 * y, 2 * x, z, 0)], input[(y, x, z, 0)]);
                }
            }
        }
    }

    #[test]
    fn conv3d_depth_axis_is_padded_not_strided() {
        let layer = ConvLayer {
            name: "c3".into(),
            kind: LayerKind::Conv3d,
            stride: 2,
            in_channels: 1,
            out_channels: 1,
            kh: 3,
            kw: 3,
            kd: 3,
            kernel: vec![1.0; 27],
            bias: vec![0.0],
            scale: vec![1.0],
            shift: vec![0.0],
            relu: false,
        };
        let input = Array4::from_elem((4, 4, 5, 1), 1.0);
        let out = layer.apply3d(&input).unwrap();
        assert_eq!(out.dim(), (2, 2, 5, 1));
        // Interior voxel sees the full 3x3x3 neighborhood of ones.
        assert_relative_eq!(out[(1, 1, 2, 0)], 27.0);
    }

    #[test]
    fn upsample2x_replicates_texels() {
        let input = Array3::from_shape_vec((1, 2, 1), vec![1.0, 2.0]).unwrap();
        let out = upsample2x(&input);
        assert_eq!(out.dim(), (2, 4, 1));
        assert_relative_eq!(out[(1, 1, 0)], 1.0);
        assert_relative_eq!(out[(0, 2, 0)], 2.0);
    }
}
