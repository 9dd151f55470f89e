//! Cost-volume regularization and depth/confidence readout.
//!
//! Reference mode smooths each depth slice with a separable 3x3 Gaussian
//! (the depth axis is untouched) and applies a per-pixel softmax. Learned
//! mode runs a 3-D UNet forward pass with loaded weights instead of the
//! blur. Both are deterministic.

use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypothesis::DepthHypothesisSet;
use crate::nn::{ConvLayer, LayerKind};
use crate::pipeline::DepthMap;
use crate::transformer::CostVolume;

/// Per-pixel distribution over depth bins.
#[derive(Debug, Clone)]
pub struct ProbabilityVolume {
    /// `(H, W, D)`, non-negative, summing to 1 per pixel.
    pub probs: Array3<f64>,
    pub stage: usize,
}

impl ProbabilityVolume {
    pub fn new(probs: Array3<f64>, stage: usize) -> Result<Self> {
        let (h, w, _) = probs.dim();
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for &p in probs.slice(ndarray::s![y, x, ..]).iter() {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::usage(format!(
                            "probability {p} at ({y},{x}) outside [0,1]"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::usage(format!(
                        "probabilities at ({y},{x}) sum to {sum}"
                    )));
                }
            }
        }
        Ok(Self { probs, stage })
    }

    pub fn depth_count(&self) -> usize {
        self.probs.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerMode {
    Reference,
    Learned,
}

impl std::str::FromStr for RegularizerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(RegularizerMode::Reference),
            "learned" => Ok(RegularizerMode::Learned),
            other => Err(Error::config(format!("unknown regularizer mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    /// Soft-argmax: expectation of depth under the distribution.
    Expectation,
    /// Highest-probability bin, lowest index on ties.
    Argmax,
}

impl std::str::FromStr for ReadoutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expectation" => Ok(ReadoutMode::Expectation),
            "argmax" => Ok(ReadoutMode::Argmax),
            other => Err(Error::config(format!("unknown readout mode '{other}'"))),
        }
    }
}

/// Regularize a cost volume into a probability volume.
///
/// Learned mode requires weights; reference mode ignores them.
pub fn regularize(
    cost: &CostVolume,
    mode: RegularizerMode,
    weights: Option<&UnetWeights>,
    sigma: f64,
) -> Result<ProbabilityVolume> {
    match mode {
        RegularizerMode::Reference => regularize_reference(cost, sigma),
        RegularizerMode::Learned => {
            let w = weights
                .ok_or_else(|| Error::config("learned regularizer mode requires UNet weights"))?;
            regularize_learned(cost, w)
        }
    }
}

fn regularize_reference(cost: &CostVolume, sigma: f64) -> Result<ProbabilityVolume> {
    let (h, w, g, d) = cost.values.dim();
    let mut summed = Array3::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            for j in 0..d {
                let mut s = 0.0;
                for gi in 0..g {
                    s += cost.values[(y, x, gi, j)];
                }
                summed[(y, x, j)] = s;
            }
        }
    }
    let blurred = blur_slices(&summed, sigma);
    Ok(softmax_volume(&blurred))
}

/// Separable 3-tap Gaussian over the spatial axes of each depth slice, with
/// symmetric (edge-reflecting) padding so per-slice mass is conserved.
fn blur_slices(volume: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return volume.clone();
    }
    let a = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 / (1.0 + 2.0 * a);
    let (h, w, d) = volume.dim();
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            0
        } else if i >= n as isize {
            n - 1
        } else {
            i as usize
        }
    };
    let mut tmp = Array3::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let xm = reflect(x as isize - 1, w);
            let xp = reflect(x as isize + 1, w);
            for j in 0..d {
                tmp[(y, x, j)] =
                    norm * (a * volume[(y, xm, j)] + volume[(y, x, j)] + a * volume[(y, xp, j)]);
            }
        }
    }
    let mut out = Array3::zeros((h, w, d));
    for y in 0..h {
        let ym = reflect(y as isize - 1, h);
        let yp = reflect(y as isize + 1, h);
        for x in 0..w {
            for j in 0..d {
                out[(y, x, j)] =
                    norm * (a * tmp[(ym, x, j)] + tmp[(y, x, j)] + a * tmp[(yp, x, j)]);
            }
        }
    }
    out
}

fn softmax_volume(logits: &Array3<f64>) -> ProbabilityVolume {
    let (h, w, d) = logits.dim();
    let mut probs = Array3::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for j in 0..d {
                max = max.max(logits[(y, x, j)]);
            }
            let mut sum = 0.0;
            for j in 0..d {
                let e = (logits[(y, x, j)] - max).exp();
                probs[(y, x, j)] = e;
                sum += e;
            }
            for j in 0..d {
                probs[(y, x, j)] /= sum;
            }
        }
    }
    ProbabilityVolume { probs, stage: 0 }
}

/// Depth by expectation (or argmax) plus windowed-sum confidence.
///
/// Confidence is the maximum probability mass in any run of
/// `min(window, D)` consecutive bins.
pub fn depth_readout(
    probs: &ProbabilityVolume,
    hyps: &DepthHypothesisSet,
    window: usize,
    mode: ReadoutMode,
) -> Result<DepthMap> {
    let (h, w, d) = probs.probs.dim();
    if hyps.values.dim() != (h, w, d) {
        return Err(Error::usage("probability/hypothesis shape mismatch"));
    }
    let win = window.max(1).min(d);
    let mut depth = Array2::zeros((h, w));
    let mut confidence = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let p = probs.probs.slice(ndarray::s![y, x, ..]);
            let dv = hyps.at(y, x);
            depth[(y, x)] = match mode {
                ReadoutMode::Expectation => p.iter().zip(dv.iter()).map(|(a, b)| a * b).sum(),
                ReadoutMode::Argmax => {
                    let mut best = 0;
                    for j in 1..d {
                        if p[j] > p[best] {
                            best = j;
                        }
                    }
                    dv[best]
                }
            };
            let mut run: f64 = p.iter().take(win).sum();
            let mut best = run;
            for j in win..d {
                run += p[j] - p[j - win];
                if run > best {
                    best = run;
                }
            }
            confidence[(y, x)] = best.min(1.0);
        }
    }
    Ok(DepthMap {
        depth,
        valid: Array2::from_elem((h, w), true),
        confidence,
    })
}

/// Ordered layers of the lightweight 3-D regularization UNet.
#[derive(Debug, Clone)]
pub struct UnetWeights {
    pub layers: Vec<ConvLayer>,
    pub in_channels: usize,
}

type UnetSpec = (
    &'static str,
    LayerKind,
    usize,
    usize,
    usize,
    usize,
    usize,
    usize,
    bool,
);

/// UNet layer table for a cost volume with `g_in` groups: 3x3x1 encoder
/// strides, 3x3x3 bottleneck convolutions, transposed 3x3x1 upsampling and
/// a plain 3x3x3 output head followed by a 1-channel projection.
pub fn unet_layer_specs(g_in: usize) -> Vec<UnetSpec> {
    use LayerKind::{Conv3d, TConv3d};
    vec![
        ("input.conv", Conv3d, 1, g_in, 8, 3, 3, 1, true),
        ("enc1.down", Conv3d, 2, 8, 16, 3, 3, 1, true),
        ("enc1.conv", Conv3d, 1, 16, 16, 3, 3, 3, true),
        ("enc2.down", Conv3d, 2, 16, 32, 3, 3, 1, true),
        ("enc2.conv", Conv3d, 1, 32, 32, 3, 3, 3, true),
        ("enc3.down", Conv3d, 2, 32, 64, 3, 3, 1, true),
        ("enc3.conv", Conv3d, 1, 64, 64, 3, 3, 3, true),
        ("dec3.up", TConv3d, 2, 64, 32, 3, 3, 1, true),
        ("dec2.up", TConv3d, 2, 32, 16, 3, 3, 1, true),
        ("dec1.up", TConv3d, 2, 16, 8, 3, 3, 1, true),
        ("output.conv", TConv3d, 1, 8, 8, 3, 3, 3, false),
        ("output.proj", Conv3d, 1, 8, 1, 1, 1, 1, false),
    ]
}

impl UnetWeights {
    pub fn seeded(seed: u64, in_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = unet_layer_specs(in_channels)
            .iter()
            .map(|s| crate::fpn::seeded_layer(s, &mut rng))
            .collect();
        Self {
            layers,
            in_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let specs = unet_layer_specs(self.in_channels);
        if self.layers.len() != specs.len() {
            return Err(Error::config(format!(
                "expected {} UNet layers, got {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for (layer, spec) in self.layers.iter().zip(&specs) {
            let (name, kind, stride, cin, cout, kh, kw, kd, _) = *spec;
            layer.validate()?;
            if layer.kind != kind
                || layer.stride != stride
                || layer.in_channels != cin
                || layer.out_channels != cout
                || (layer.kh, layer.kw, layer.kd) != (kh, kw, kd)
            {
                return Err(Error::config(format!("UNet layer {name}: shape mismatch")));
            }
        }
        Ok(())
    }

    fn layer(&self, name: &str) -> &ConvLayer {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .expect("validated weights have all named layers")
    }
}

fn regularize_learned(cost: &CostVolume, weights: &UnetWeights) -> Result<ProbabilityVolume> {
    let (h, w, g, d) = cost.values.dim();
    if g != weights.in_channels {
        return Err(Error::config(format!(
            "UNet expects {} input channels, cost volume has {g}",
            weights.in_channels
        )));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::config(format!(
            "learned regularizer needs spatial dims divisible by 8, got {h}x{w}"
        )));
    }
    weights.validate()?;
    // (H, W, G, D) -> (H, W, D, C) for the convolution stack.
    let input = Array4::from_shape_fn((h, w, d, g), |(y, x, j, c)| cost.values[(y, x, c, j)]);

    let a0 = weights.layer("input.conv").apply3d(&input)?;
    let b1 = weights
        .layer("enc1.conv")
        .apply3d(&weights.layer("enc1.down").apply3d(&a0)?)?;
    let b2 = weights
        .layer("enc2.conv")
        .apply3d(&weights.layer("enc2.down").apply3d(&b1)?)?;
    let b3 = weights
        .layer("enc3.conv")
        .apply3d(&weights.layer("enc3.down").apply3d(&b2)?)?;
    let u3 = weights.layer("dec3.up").apply_t3d(&b3)? + &b2;
    let u2 = weights.layer("dec2.up").apply_t3d(&u3)? + &b1;
    let u1 = weights.layer("dec1.up").apply_t3d(&u2)? + &a0;
    let head = weights.layer("output.conv").apply_t3d(&u1)?;
    let logits4 = weights.layer("output.proj").apply3d(&head)?;

    let logits = Array3::from_shape_fn((h, w, d), |(y, x, j)| logits4[(y, x, j, 0)]);
    Ok(softmax_volume(&logits))
}
