//! Feature pyramid network forward pass with loadable weights.
//!
//! The encoder is inference-only: weights come from a bundle file or a
//! seeded generator, batch norm is already folded into per-channel affine
//! parameters, and identical inputs produce bit-identical pyramids.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::nn::{upsample2x, ConvLayer, LayerKind};

/// Where a weight bundle came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    LoadedFile,
    SeededRandom,
    OracleBypass,
}

/// Ordered convolution layers for the encoder.
#[derive(Debug, Clone)]
pub struct WeightBundle {
    pub layers: Vec<ConvLayer>,
    pub provenance: Provenance,
}

/// Declared shape of one layer: (name, kind, stride, in, out, kh, kw, kd, relu).
type LayerSpec = (
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

/// The encoder trunk plus lateral/output heads. Trunk convolutions carry
/// folded BN + ReLU; the 1x1 inner and output layers are plain.
pub fn fpn_layer_specs() -> Vec<LayerSpec> {
    use LayerKind::Conv2d;
    vec![
        ("stage1.conv1", Conv2d, 1, 3, 8, 3, 3, 1, true),
        ("stage1.conv2", Conv2d, 1, 8, 8, 3, 3, 1, true),
        ("stage2.conv1", Conv2d, 2, 8, 16, 5, 5, 1, true),
        ("stage2.conv2", Conv2d, 1, 16, 16, 3, 3, 1, true),
        ("stage2.conv3", Conv2d, 1, 16, 16, 3, 3, 1, true),
        ("stage3.conv1", Conv2d, 2, 16, 32, 5, 5, 1, true),
        ("stage3.conv2", Conv2d, 1, 32, 32, 3, 3, 1, true),
        ("stage3.conv3", Conv2d, 1, 32, 32, 3, 3, 1, true),
        ("stage4.conv1", Conv2d, 2, 32, 64, 5, 5, 1, true),
        ("stage4.conv2", Conv2d, 1, 64, 64, 3, 3, 1, true),
        ("stage4.conv3", Conv2d, 1, 64, 64, 3, 3, 1, true),
        ("stage1.inner", Conv2d, 1, 8, 64, 1, 1, 1, false),
        ("stage2.inner", Conv2d, 1, 16, 64, 1, 1, 1, false),
        ("stage3.inner", Conv2d, 1, 32, 64, 1, 1, 1, false),
        ("stage4.inner", Conv2d, 1, 64, 64, 1, 1, 1, false),
        ("stage1.output", Conv2d, 1, 64, 8, 1, 1, 1, false),
        ("stage2.output", Conv2d, 1, 64, 16, 1, 1, 1, false),
        ("stage3.output", Conv2d, 1, 64, 32, 1, 1, 1, false),
        ("stage4.output", Conv2d, 1, 64, 64, 1, 1, 1, false),
    ]
}

/// Kaiming-style uniform initialization for one layer from a seeded stream.
pub(crate) fn seeded_layer(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> ConvLayer {
    let (name, kind, stride, cin, cout, kh, kw, kd, relu) = *spec;
    let fan_in = (cin * kh * kw * kd) as f64;
    let bound = (6.0 / fan_in).sqrt() as f32;
    let kernel: Vec<f32> = (0..cout * cin * kh * kw * kd)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-0.01..0.01f32)).collect();
    ConvLayer {
        name: name.to_string(),
        kind,
        stride,
        in_channels: cin,
        out_channels: cout,
        kh,
        kw,
        kd,
        kernel,
        bias,
        scale: vec![1.0; cout],
        shift: vec![0.0; cout],
        relu,
    }
}

impl WeightBundle {
    /// Generate deterministic pseudo-random encoder weights.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = fpn_layer_specs()
            .iter()
            .map(|s| seeded_layer(s, &mut rng))
            .collect();
        Self {
            layers,
            provenance: Provenance::SeededRandom,
        }
    }

    /// Check every layer against the expected encoder shapes, naming the
    /// first offending layer.
    pub fn validate_fpn(&self) -> Result<()> {
        let specs = fpn_layer_specs();
        if self.layers.len() != specs.len() {
            return Err(Error::config(format!(
                "expected {} encoder layers, bundle has {}",
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
                return Err(Error::config(format!(
                    "layer {name}: shape mismatch (got {}x{}x{} {}->{} stride {})",
                    layer.kh,
                    layer.kw,
                    layer.kd,
                    layer.in_channels,
                    layer.out_channels,
                    layer.stride
                )));
            }
        }
        Ok(())
    }

    fn layer(&self, name: &str) -> &ConvLayer {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .expect("validated bundle has all named layers")
    }
}

/// Run the encoder on an `(H, W, 3)` image in `[0, 1]`, producing feature
/// maps at scales 1, 1/2, 1/4, 1/8 with channels 8, 16, 32, 64.
pub fn extract_pyramid(image: &Array3<f64>, weights: &WeightBundle) -> Result<Vec<FeatureMap>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::usage(format!("expected 3-channel image, got {c}")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::usage(format!(
            "image dimensions {h}x{w} must be divisible by 8"
        )));
    }
    weights.validate_fpn()?;

    let c1 = weights
        .layer("stage1.conv2")
        .apply2d(&weights.layer("stage1.conv1").apply2d(image)?)?;
    let c2 = weights.layer("stage2.conv3").apply2d(
        &weights
            .layer("stage2.conv2")
            .apply2d(&weights.layer("stage2.conv1").apply2d(&c1)?)?,
    )?;
    let c3 = weights.layer("stage3.conv3").apply2d(
        &weights
            .layer("stage3.conv2")
            .apply2d(&weights.layer("stage3.conv1").apply2d(&c2)?)?,
    )?;
    let c4 = weights.layer("stage4.conv3").apply2d(
        &weights
            .layer("stage4.conv2")
            .apply2d(&weights.layer("stage4.conv1").apply2d(&c3)?)?,
    )?;

    // Top-down lateral merge with nearest-neighbor upsampling.
    let p4 = weights.layer("stage4.inner").apply2d(&c4)?;
    let p3 = weights.layer("stage3.inner").apply2d(&c3)? + upsample2x(&p4);
    let p2 = weights.layer("stage2.inner").apply2d(&c2)? + upsample2x(&p3);
    let p1 = weights.layer("stage1.inner").apply2d(&c1)? + upsample2x(&p2);

    Ok(vec![
        FeatureMap::new(weights.layer("stage1.output").apply2d(&p1)?)?,
        FeatureMap::new(weights.layer("stage2.output").apply2d(&p2)?)?,
        FeatureMap::new(weights.layer("stage3.output").apply2d(&p3)?)?,
        FeatureMap::new(weights.layer("stage4.output").apply2d(&p4)?)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::PYRAMID_CHANNELS;

    #[test]
    fn zero_image_zero_biases_gives_zero_pyramid() {
        let mut bundle = WeightBundle::seeded(1);
        for layer in &mut bundle.layers {
            layer.bias.fill(0.0);
            layer.shift.fill(0.0);
        }
        let image = Array3::zeros((16, 16, 3));
        let pyr = extract_pyramid(&image, &bundle).unwrap();
        for fm in &pyr {
            assert!(fm.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pyramid_shapes_match_table() {
        let bundle = WeightBundle::seeded(2);
        let image = Array3::from_elem((16, 24, 3), 0.5);
        let pyr = extract_pyramid(&image, &bundle).unwrap();
        assert_eq!(pyr.len(), 4);
        for (k, fm) in pyr.iter().enumerate() {
            assert_eq!(fm.height(), 16 >> k);
            assert_eq!(fm.width(), 24 >> k);
            assert_eq!(fm.channels(), PYRAMID_CHANNELS[k]);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let bundle = WeightBundle::seeded(3);
        let image = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y * 31 + x * 17 + c * 7) % 11) as f64 / 11.0
        });
        let a = extract_pyramid(&image, &bundle).unwrap();
        let b = extract_pyramid(&image, &bundle).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.data, fb.data);
        }
    }

    #[test]
    fn shape_mismatch_names_offending_layer() {
        let mut bundle = WeightBundle::seeded(4);
        bundle.layers[2].kh = 3; // stage2.conv1 is declared 5x5
        let len = bundle.layers[2].kernel_len();
        bundle.layers[2].kernel.truncate(len);
        let image = Array3::zeros((16, 16, 3));
        let err = extract_pyramid(&image, &bundle).unwrap_err();
        assert!(err.to_string().contains("stage2.conv1"), "{err}");
    }

    /// Golden checksum over the full pyramid for a fixed seed and image,
    /// recorded from the first run. Guards against regressions in the
    /// forward pass, not correctness.
    #[test]
    fn golden_checksum_for_seeded_weights() {
        let bundle = WeightBundle::seeded(42);
        let image = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y * 131 + x * 73 + c * 29) % 97) as f64 / 97.0
        });
        let pyr = extract_pyramid(&image, &bundle).unwrap();
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for fm in &pyr {
            for v in fm.data.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = format!("{:x}", hasher.finalize());
        assert_eq!(
            digest, "42423b83e3c560c6601cf7f0537ea3a61fcaa0a6f7b27d43a6e5dac97ef97d75",
            "seeded-weight pyramid changed; if intentional, re-record the checksum"
        );
    }
}
