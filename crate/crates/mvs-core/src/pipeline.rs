//! Four-stage coarse-to-fine estimation pipeline.

use nalgebra::Vector2;
use ndarray::{Array2, Array3};

use crate::camera::{CameraModel, PairWarper};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::fpn::WeightBundle;
use crate::hypothesis::{self, DepthHypothesisSet};
use crate::par;
use crate::regularizer::{self, ProbabilityVolume, ReadoutMode, RegularizerMode, UnetWeights};
use crate::transformer::{self, CostVolume};

/// Per-stage depth estimate with validity and confidence.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
    pub confidence: Array2<f64>,
}

impl DepthMap {
    pub fn dims(&self) -> (usize, usize) {
        self.depth.dim()
    }
}

/// How source volumes are fused into the cost volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Epipolar,
    Variance,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epipolar" => Ok(FusionMode::Epipolar),
            "variance" => Ok(FusionMode::Variance),
            other => Err(Error::config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Epipolar => "epipolar",
            FusionMode::Variance => "variance",
        })
    }
}

/// Pipeline configuration; every field has the default used throughout the
/// tests and CLI.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Hypothesized depth count per stage.
    pub depth_counts: [usize; 4],
    /// Correlation group count per stage.
    pub group_counts: [usize; 4],
    /// Attention temperature.
    pub temperature: f64,
    pub fusion: FusionMode,
    pub regularizer: RegularizerMode,
    /// Spatial Gaussian sigma for the reference regularizer.
    pub blur_sigma: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Double the first stage's hypothesis count.
    pub double_first_stage: bool,
    /// Bins in the confidence window (clamped to D per stage).
    pub confidence_window: usize,
    pub readout: ReadoutMode,
    /// Scale applied to per-pixel standardized costs before regularization.
    pub cost_sharpness: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            depth_counts: [8, 8, 4, 4],
            group_counts: [8, 8, 4, 4],
            temperature: 2.0,
            fusion: FusionMode::Epipolar,
            regularizer: RegularizerMode::Reference,
            blur_sigma: 1.4,
            d_min: 425.0,
            d_max: 935.0,
            double_first_stage: true,
            confidence_window: 4,
            readout: ReadoutMode::Expectation,
            cost_sharpness: 9.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(Error::config(format!(
                "invalid depth range [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        for (k, &d) in self.depth_counts.iter().enumerate() {
            if d < 2 {
                return Err(Error::config(format!("stage {k}: D must be >= 2")));
            }
        }
        for (k, &g) in self.group_counts.iter().enumerate() {
            let channels = stage_channels(k);
            if g == 0 || !channels.is_multiple_of(g) {
                return Err(Error::config(format!(
                    "stage {k}: group count {g} must divide {channels} channels"
                )));
            }
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.cost_sharpness <= 0.0 {
            return Err(Error::config("cost sharpness must be positive"));
        }
        Ok(())
    }

    /// Effective hypothesis count for a stage, honoring the doubled first
    /// stage flag.
    pub fn effective_depth_count(&self, stage: usize) -> usize {
        if stage == 0 && self.double_first_stage {
            self.depth_counts[0] * 2
        } else {
            self.depth_counts[stage]
        }
    }

    /// Parse from the flat key-value config format. Every key is optional
    /// and falls back to the default.
    pub fn from_kv(kv: &crate::io::kv::KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        let counts = |key: &str, target: &mut [usize; 4]| -> Result<()> {
            if let Some(v) = kv.get_usize_list(key)? {
                if v.len() != 4 {
                    return Err(Error::config(format!("key '{key}' needs 4 values")));
                }
                target.copy_from_slice(&v);
            }
            Ok(())
        };
        counts("depth_counts", &mut cfg.depth_counts)?;
        counts("group_counts", &mut cfg.group_counts)?;
        if let Some(v) = kv.get_f64("temperature")? {
            cfg.temperature = v;
        }
        if let Some(v) = kv.get("fusion") {
            cfg.fusion = v.parse()?;
        }
        if let Some(v) = kv.get("regularizer") {
            cfg.regularizer = v.parse()?;
        }
        if let Some(v) = kv.get_f64("blur_sigma")? {
            cfg.blur_sigma = v;
        }
        if let Some(v) = kv.get_f64("d_min")? {
            cfg.d_min = v;
        }
        if let Some(v) = kv.get_f64("d_max")? {
            cfg.d_max = v;
        }
        if let Some(v) = kv.get_bool("double_first_stage")? {
            cfg.double_first_stage = v;
        }
        if let Some(v) = kv.get_usize("confidence_window")? {
            cfg.confidence_window = v;
        }
        if let Some(v) = kv.get("readout") {
            cfg.readout = v.parse()?;
        }
        if let Some(v) = kv.get_f64("cost_sharpness")? {
            cfg.cost_sharpness = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> crate::io::kv::KvMap {
        let mut kv = crate::io::kv::KvMap::new();
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        kv.set("depth_counts", join(&self.depth_counts));
        kv.set("group_counts", join(&self.group_counts));
        kv.set("temperature", self.temperature);
        kv.set("fusion", self.fusion);
        kv.set(
            "regularizer",
            match self.regularizer {
                RegularizerMode::Reference => "reference",
                RegularizerMode::Learned => "learned",
            },
        );
        kv.set("blur_sigma", self.blur_sigma);
        kv.set("d_min", self.d_min);
        kv.set("d_max", self.d_max);
        kv.set("double_first_stage", self.double_first_stage);
        kv.set("confidence_window", self.confidence_window);
        kv.set(
            "readout",
            match self.readout {
                ReadoutMode::Expectation => "expectation",
                ReadoutMode::Argmax => "argmax",
            },
        );
        kv.set("cost_sharpness", self.cost_sharpness);
        kv
    }
}

/// Feature channels at pipeline stage `k` (stage 0 is coarsest).
pub fn stage_channels(stage: usize) -> usize {
    crate::features::PYRAMID_CHANNELS[3 - stage]
}

/// Pyramid scale index used by pipeline stage `k`.
pub fn stage_scale(stage: usize) -> usize {
    3 - stage
}

/// Where per-view features come from.
pub enum FeatureSource<'a> {
    /// Area-downsampled intensities replicated across channels.
    Oracle,
    /// Encoder forward pass with the given weights.
    Fpn(&'a WeightBundle),
}

/// One input view: image plus full-resolution camera.
pub struct ViewInput {
    pub image: Array3<f64>,
    pub camera: CameraModel,
}

/// Output of one cascade stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub stage: usize,
    pub depth: DepthMap,
    pub probabilities: ProbabilityVolume,
    pub hypotheses: DepthHypothesisSet,
}

/// Full pipeline output: per-stage results, finest last.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stages: Vec<StageOutput>,
}

impl PipelineOutput {
    pub fn final_depth(&self) -> &DepthMap {
        &self.stages.last().expect("pipeline has stages").depth
    }
}

/// Learned-regularizer weights per stage, when configured.
#[derive(Default)]
pub struct StageWeights<'a> {
    pub unet: [Option<&'a UnetWeights>; 4],
}

struct StageRowOutput {
    /// Fused per-pixel matching values, laid out `(x * D + j) * G + g`.
    fused: Vec<f64>,
    flagged: Vec<bool>,
    any_view: Vec<bool>,
}

/// Run one cascade stage.
///
/// `ref_pyramid`/`src_pyramids` are full 4-scale pyramids; `cams` must
/// already be scaled to the stage resolution. `prev` is required for every
/// stage after the first and must live at the previous stage's resolution.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: usize,
    ref_pyramid: &[FeatureMap],
    src_pyramids: &[&[FeatureMap]],
    ref_cam: &CameraModel,
    src_cams: &[CameraModel],
    prev: Option<&DepthMap>,
    cfg: &PipelineConfig,
    unet: Option<&UnetWeights>,
) -> Result<StageOutput> {
    cfg.validate()?;
    if stage >= 4 {
        return Err(Error::usage(format!("stage {stage} out of range")));
    }
    if src_pyramids.is_empty() {
        return Err(Error::usage("need at least one source view"));
    }
    if src_pyramids.len() != src_cams.len() {
        return Err(Error::usage("source pyramid/camera count mismatch"));
    }
    let scale = stage_scale(stage);
    let ref_feat = &ref_pyramid[scale];
    let (height, width) = (ref_feat.height(), ref_feat.width());
    if ref_cam.width != width || ref_cam.height != height {
        return Err(Error::usage(format!(
            "stage {stage}: camera resolution {}x{} does not match features {width}x{height}",
            ref_cam.width, ref_cam.height
        )));
    }

    let count = cfg.effective_depth_count(stage);
    let hyps = match (stage, prev) {
        (0, None) => {
            hypothesis::init_inverse_depth_hypotheses(cfg.d_min, cfg.d_max, count, height, width)?
        }
        (0, Some(_)) => {
            return Err(Error::usage("stage 0 takes no previous depth map"));
        }
        (_, None) => {
            return Err(Error::usage(format!(
                "stage {stage} requires the previous stage's depth map"
            )));
        }
        (k, Some(prev)) => {
            let span = stage_inverse_span(cfg, k)?;
            let up = upsample_depth(prev, height, width);
            hypothesis::refine_hypotheses(&up, k, count, span, cfg.d_min, cfg.d_max)?
        }
    };

    let groups = match cfg.fusion {
        FusionMode::Epipolar => cfg.group_counts[stage],
        FusionMode::Variance => stage_channels(stage),
    };
    let src_feats: Vec<&FeatureMap> = src_pyramids.iter().map(|p| &p[scale]).collect();
    let warpers: Vec<PairWarper> = src_cams
        .iter()
        .map(|sc| PairWarper::new(ref_cam, sc))
        .collect();

    let rows = par::map_indexed(height, |y| {
        stage_row(
            y, width, count, groups, ref_feat, &src_feats, &warpers, &hyps, cfg,
        )
    });

    // Assemble the fused volume and track pixels no view could see at all.
    // The reference regularizer gets the group-summed cost standardized
    // per pixel across bins (its softmax has no learned scaling); the
    // learned regularizer gets the raw fused groups its layer table expects.
    let standardize = cfg.regularizer == RegularizerMode::Reference;
    let out_groups = if standardize { 1 } else { groups };
    let mut cost = ndarray::Array4::zeros((height, width, out_groups, count));
    let mut flagged = Array3::from_elem((height, width, count), false);
    let mut any_view = Array2::from_elem((height, width), false);
    for (y, row) in rows.iter().enumerate() {
        for x in 0..width {
            if standardize {
                let mut summed = vec![0.0f64; count];
                for (j, slot) in summed.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for g in 0..groups {
                        s += row.fused[(x * count + j) * groups + g];
                    }
                    *slot = s;
                }
                let usable: Vec<usize> = (0..count)
                    .filter(|&j| !row.flagged[x * count + j])
                    .collect();
                if !usable.is_empty() {
                    let mean: f64 =
                        usable.iter().map(|&j| summed[j]).sum::<f64>() / usable.len() as f64;
                    let var: f64 = usable
                        .iter()
                        .map(|&j| (summed[j] - mean).powi(2))
                        .sum::<f64>()
                        / usable.len() as f64;
                    let std = var.sqrt();
                    for &j in &usable {
                        cost[(y, x, 0, j)] = if std > 1e-12 {
                            cfg.cost_sharpness * (summed[j] - mean) / std
                        } else {
                            0.0
                        };
                    }
                }
            } else {
                for j in 0..count {
                    for g in 0..groups {
                        cost[(y, x, g, j)] = row.fused[(x * count + j) * groups + g];
                    }
                }
            }
            for j in 0..count {
                flagged[(y, x, j)] = row.flagged[x * count + j];
            }
            any_view[(y, x)] = row.any_view[x];
        }
    }
    let volume = CostVolume::new(cost, flagged)?;
    let mut probs = regularizer::regularize(&volume, cfg.regularizer, unet, cfg.blur_sigma)?;
    probs.stage = stage;
    let mut depth = regularizer::depth_readout(&probs, &hyps, cfg.confidence_window, cfg.readout)?;
    for y in 0..height {
        for x in 0..width {
            if !any_view[(y, x)] {
                depth.valid[(y, x)] = false;
            }
        }
    }
    Ok(StageOutput {
        stage,
        depth,
        probabilities: probs,
        hypotheses: hyps,
    })
}

/// Cumulative inverse-depth span for a stage. The recurrence always uses the
/// configured per-stage counts: doubling the first stage densifies its
/// sampling without shrinking later search windows.
fn stage_inverse_span(cfg: &PipelineConfig, stage: usize) -> Result<f64> {
    let mut span = 1.0 / cfg.d_min - 1.0 / cfg.d_max;
    for k in 0..stage {
        span = hypothesis::next_inverse_range(span, cfg.depth_counts[k])?;
    }
    Ok(span)
}

/// Per-pixel plane-sweep matching for one image row: sample keys on the
/// epipolar lines, score them per view, and fuse across views.
#[allow(clippy::too_many_arguments)]
fn stage_row(
    y: usize,
    width: usize,
    count: usize,
    groups: usize,
    ref_feat: &FeatureMap,
    src_feats: &[&FeatureMap],
    warpers: &[PairWarper],
    hyps: &DepthHypothesisSet,
    cfg: &PipelineConfig,
) -> StageRowOutput {
    let channels = ref_feat.channels();
    let mut fused_out = vec![0.0f64; width * count * groups];
    let mut flagged = vec![false; width * count];
    let mut any_view = vec![false; width];
    let mut keys = ndarray::Array2::<f64>::zeros((channels, count));
    let mut sample = vec![0.0f64; channels];
    // Query and keys lifted so that plain inner products evaluate the
    // photo-consistency score -|q - k|^2 / 2: raw products of non-negative
    // features score brightness, not similarity. The two extra channels
    // carry the squared norms.
    let mut lifted_query = ndarray::Array1::<f64>::zeros(channels + 2);
    let mut lifted_keys = ndarray::Array2::<f64>::zeros((channels + 2, count));

    for x in 0..width {
        let query = ref_feat.at(y, x);
        let p = Vector2::new(x as f64, y as f64);
        let depths = hyps.at(y, x);
        let mut values: Vec<ndarray::Array2<f64>> = Vec::with_capacity(src_feats.len());
        let mut weights: Vec<ndarray::Array1<f64>> = Vec::with_capacity(src_feats.len());
        let mut volumes: Vec<ndarray::Array2<f64>> = Vec::with_capacity(src_feats.len() + 1);
        if cfg.fusion == FusionMode::Epipolar {
            for c in 0..channels {
                lifted_query[c] = query[c];
            }
            lifted_query[channels] = -0.5 * query.iter().map(|q| q * q).sum::<f64>();
            lifted_query[channels + 1] = 1.0;
        }

        for (feat, warper) in src_feats.iter().zip(warpers) {
            let ray = warper.ray(p);
            let mut valid = vec![false; count];
            keys.fill(0.0);
            for j in 0..count {
                let warped = warper.warp_ray(ray, depths[j]);
                if warped.valid && feat.bilinear_sample_into(warped.coord, &mut sample) {
                    valid[j] = true;
                    for c in 0..channels {
                        keys[(c, j)] = sample[c];
                    }
                }
            }
            let keys = transformer::EpipolarKeys::new(keys.clone(), valid)
                .expect("mask sized to bin count");
            if keys.valid.iter().any(|&v| v) {
                any_view[x] = true;
            }
            match cfg.fusion {
                FusionMode::Epipolar => {
                    for j in 0..count {
                        let kk: f64 = (0..channels)
                            .map(|c| keys.features[(c, j)] * keys.features[(c, j)])
                            .sum();
                        for c in 0..channels {
                            lifted_keys[(c, j)] = keys.features[(c, j)];
                        }
                        lifted_keys[(channels, j)] = 1.0;
                        lifted_keys[(channels + 1, j)] = -0.5 * kk;
                    }
                    let (w, all_invalid) = transformer::attention_weights(
                        lifted_query.view(),
                        lifted_keys.view(),
                        &keys.valid,
                        cfg.temperature,
                    )
                    .expect("stage shapes are validated");
                    let s = transformer::group_correlation(
                        query,
                        keys.features.view(),
                        &keys.valid,
                        groups,
                    )
                    .expect("group count validated");
                    values.push(robust_match_value(s, &keys, query, groups));
                    weights.push(if all_invalid {
                        ndarray::Array1::zeros(count)
                    } else {
                        w
                    });
                }
                FusionMode::Variance => {
                    volumes.push(keys.features);
                }
            }
        }

        let (fused, flags) = match cfg.fusion {
            FusionMode::Epipolar => {
                transformer::fuse_views(&values, &weights).expect("one view minimum")
            }
            FusionMode::Variance => {
                // Reference feature broadcast along depth, then element-wise
                // variance; negated so that low variance means high score.
                let mut ref_vol = ndarray::Array2::zeros((channels, count));
                for c in 0..channels {
                    for j in 0..count {
                        ref_vol[(c, j)] = query[c];
                    }
                }
                volumes.insert(0, ref_vol);
                let var = transformer::variance_fusion(&volumes).expect("two volumes minimum");
                (var.mapv(|v| -v), vec![false; count])
            }
        };

        for j in 0..count {
            for g in 0..groups {
                fused_out[(x * count + j) * groups + g] = fused[(g, j)];
            }
            if flags[j] {
                flagged[x * count + j] = true;
            }
        }
    }
    StageRowOutput {
        fused: fused_out,
        flagged,
        any_view,
    }
}

/// Convert group correlations into robust per-view matching values:
/// `-(1/2G) min(|q_g - k_g|^2, cap_g)` per group, where the cap is a multiple
/// of the per-pixel median squared distance over valid bins. Truncation
/// bounds the damage an occluded or mismatched view can do at the true
/// depth; at refined stages the profile stays untouched because no bin
/// exceeds the cap.
fn robust_match_value(
    correlations: ndarray::Array2<f64>,
    keys: &transformer::EpipolarKeys,
    query: ndarray::ArrayView1<'_, f64>,
    groups: usize,
) -> ndarray::Array2<f64> {
    let (_, count) = correlations.dim();
    let channels = keys.features.dim().0;
    let group_size = channels / groups;
    let inv_g = 1.0 / groups as f64;
    let mut ssd = ndarray::Array2::<f64>::zeros((groups, count));
    for j in 0..count {
        if !keys.valid[j] {
            continue;
        }
        for g in 0..groups {
            let base = g * group_size;
            let mut kk = 0.0;
            let mut qq = 0.0;
            for c in base..base + group_size {
                kk += keys.features[(c, j)] * keys.features[(c, j)];
                qq += query[c] * query[c];
            }
            // |q - k|^2 / G assembled from the group correlation.
            ssd[(g, j)] = (kk + qq) * inv_g - 2.0 * correlations[(g, j)];
        }
    }
    let mut value = ndarray::Array2::<f64>::zeros((groups, count));
    let mut buf: Vec<f64> = Vec::with_capacity(count);
    for g in 0..groups {
        buf.clear();
        for j in 0..count {
            if keys.valid[j] {
                buf.push(ssd[(g, j)]);
            }
        }
        if buf.is_empty() {
            continue;
        }
        buf.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
        let cap = 2.5 * buf[buf.len() / 2];
        for j in 0..count {
            if keys.valid[j] {
                value[(g, j)] = -0.5 * ssd[(g, j)].min(cap);
            }
        }
    }
    value
}

/// Bilinear upsampling of a depth map with nearest-neighbor fallback where
/// any contributing pixel is invalid, so depths never blend across validity
/// borders.
pub fn upsample_depth(prev: &DepthMap, height: usize, width: usize) -> DepthMap {
    let (ph, pw) = prev.dims();
    let sy = ph as f64 / height as f64;
    let sx = pw as f64 / width as f64;
    let mut depth = Array2::zeros((height, width));
    let mut valid = Array2::from_elem((height, width), false);
    let mut confidence = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            // Map output pixel center into the source grid.
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ph - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (pw - 1) as f64);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(ph - 1);
            let x1 = (x0 + 1).min(pw - 1);
            let dy = fy - y0 as f64;
            let dx = fx - x0 as f64;
            let corners = [
                (y0, x0, (1.0 - dy) * (1.0 - dx)),
                (y0, x1, (1.0 - dy) * dx),
                (y1, x0, dy * (1.0 - dx)),
                (y1, x1, dy * dx),
            ];
            let all_valid = corners.iter().all(|&(cy, cx, _)| prev.valid[(cy, cx)]);
            if all_valid {
                let mut d = 0.0;
                let mut c = 0.0;
                for &(cy, cx, w) in &corners {
                    d += w * prev.depth[(cy, cx)];
                    c += w * prev.confidence[(cy, cx)];
                }
                depth[(y, x)] = d;
                confidence[(y, x)] = c;
                valid[(y, x)] = true;
            } else {
                // Nearest valid corner, if any.
                let mut best: Option<(f64, usize, usize)> = None;
                for &(cy, cx, _) in &corners {
                    if prev.valid[(cy, cx)] {
                        let dist = (cy as f64 - fy).powi(2) + (cx as f64 - fx).powi(2);
                        if best.is_none_or(|(bd, _, _)| dist < bd) {
                            best = Some((dist, cy, cx));
                        }
                    }
                }
                if let Some((_, cy, cx)) = best {
                    depth[(y, x)] = prev.depth[(cy, cx)];
                    confidence[(y, x)] = prev.confidence[(cy, cx)];
                    valid[(y, x)] = true;
                }
            }
        }
    }
    DepthMap {
        depth,
        valid,
        confidence,
    }
}

/// Canonical source ordering key so view permutations cannot change
/// summation order anywhere downstream.
fn camera_sort_key(cam: &CameraModel) -> Vec<u64> {
    let mut key = Vec::with_capacity(21);
    for v in cam.translation.iter() {
        key.push(v.to_bits());
    }
    for v in cam.rotation.iter() {
        key.push(v.to_bits());
    }
    for v in cam.intrinsics.iter() {
        key.push(v.to_bits());
    }
    key
}

/// Run all four cascade stages. The first view is the reference; source
/// views are reordered canonically, so permuting them does not change the
/// result.
pub fn run_pipeline(
    views: &[ViewInput],
    cfg: &PipelineConfig,
    features: &FeatureSource<'_>,
    stage_weights: &StageWeights<'_>,
) -> Result<PipelineOutput> {
    run_pipeline_partial(views, cfg, features, stage_weights, 4)
}

/// Run only the first `stages` cascade stages (1..=4).
pub fn run_pipeline_partial(
    views: &[ViewInput],
    cfg: &PipelineConfig,
    features: &FeatureSource<'_>,
    stage_weights: &StageWeights<'_>,
    stages: usize,
) -> Result<PipelineOutput> {
    if !(1..=4).contains(&stages) {
        return Err(Error::usage(format!("stage count {stages} not in 1..=4")));
    }
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::usage(
            "need a reference and at least one source view",
        ));
    }
    let (h, w, _) = views[0].image.dim();
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::usage(format!(
            "resolution {h}x{w} must be divisible by 8"
        )));
    }
    for v in views {
        if v.image.dim() != (h, w, 3) {
            return Err(Error::usage("all views must share the same resolution"));
        }
        if v.camera.width != w || v.camera.height != h {
            return Err(Error::usage("camera resolution must match its image"));
        }
    }

    let pyramids: Vec<Vec<FeatureMap>> = views
        .iter()
        .map(|v| match features {
            FeatureSource::Oracle => crate::features::oracle_pyramid(&v.image),
            FeatureSource::Fpn(bundle) => crate::fpn::extract_pyramid(&v.image, bundle),
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (1..views.len()).collect();
    order.sort_by(|&a, &b| {
        camera_sort_key(&views[a].camera).cmp(&camera_sort_key(&views[b].camera))
    });

    let ref_pyramid = &pyramids[0];
    let src_pyramids: Vec<&[FeatureMap]> = order.iter().map(|&i| pyramids[i].as_slice()).collect();

    let stage_count = stages;
    let mut stages: Vec<StageOutput> = Vec::with_capacity(stage_count);
    for stage in 0..stage_count {
        let level = stage_scale(stage);
        let ref_cam = views[0].camera.scaled(level);
        let src_cams: Vec<CameraModel> = order
            .iter()
            .map(|&i| views[i].camera.scaled(level))
            .collect();
        let prev = stages.last().map(|s: &StageOutput| &s.depth);
        let out = run_stage(
            stage,
            ref_pyramid,
            &src_pyramids,
            &ref_cam,
            &src_cams,
            prev,
            cfg,
            stage_weights.unet[stage],
        )?;
        stages.push(out);
    }
    Ok(PipelineOutput { stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render, SceneSpec};
    use approx::assert_relative_eq;

    fn scene_views(scene: &SceneSpec) -> (Vec<ViewInput>, DepthMap) {
        let mut views = Vec::new();
        let mut gt = None;
        for v in 0..scene.ring.count {
            let out = render(scene, v).expect("render preset");
            if v == 0 {
                gt = Some(out.depth.clone());
            }
            views.push(ViewInput {
                image: out.image,
                camera: out.camera,
            });
        }
        (views, gt.expect("reference ground truth"))
    }

    fn small_scene(seed: u64) -> SceneSpec {
        let mut scene = SceneSpec::three_planes(seed);
        scene.height = 64;
        scene.width = 80;
        scene.focal = 160.0;
        scene
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = PipelineConfig::default();
        cfg.depth_counts[2] = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.group_counts[3] = 3; // does not divide 8 channels
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            d_min: 0.0,
            ..PipelineConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = PipelineConfig {
            fusion: FusionMode::Variance,
            depth_counts: [16, 8, 4, 2],
            double_first_stage: false,
            ..PipelineConfig::default()
        };
        let kv = cfg.to_kv();
        let parsed = PipelineConfig::from_kv(&kv).unwrap();
        assert_eq!(parsed.fusion, FusionMode::Variance);
        assert_eq!(parsed.depth_counts, [16, 8, 4, 2]);
        assert!(!parsed.double_first_stage);
        // Empty map gives pure defaults.
        let empty = PipelineConfig::from_kv(&crate::io::kv::KvMap::new()).unwrap();
        assert_eq!(empty.depth_counts, PipelineConfig::default().depth_counts);
    }

    #[test]
    fn doubled_flag_only_affects_first_stage() {
        let cfg = PipelineConfig {
            double_first_stage: true,
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.effective_depth_count(0), 16);
        assert_eq!(cfg.effective_depth_count(1), 8);
        assert_eq!(cfg.effective_depth_count(2), 4);
        let off = PipelineConfig {
            double_first_stage: false,
            ..cfg.clone()
        };
        assert_eq!(off.effective_depth_count(0), 8);
        // Span recurrence ignores the doubling.
        assert_relative_eq!(
            stage_inverse_span(&cfg, 1).unwrap(),
            stage_inverse_span(&off, 1).unwrap()
        );
    }

    #[test]
    fn pipeline_outputs_have_expected_shapes() {
        let scene = small_scene(1);
        let (views, _) = scene_views(&scene);
        let cfg = PipelineConfig::default();
        let out = run_pipeline(
            &views,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default(),
        )
        .unwrap();
        assert_eq!(out.stages.len(), 4);
        for (k, s) in out.stages.iter().enumerate() {
            let scale = 1 << (3 - k);
            assert_eq!(s.depth.dims(), (64 / scale, 80 / scale));
            assert_eq!(s.hypotheses.count, cfg.effective_depth_count(k));
            assert_eq!(s.probabilities.probs.dim().2, cfg.effective_depth_count(k));
        }
        // Per-stage depths stay within the configured range.
        for s in &out.stages {
            for (&d, &v) in s.depth.depth.iter().zip(s.depth.valid.iter()) {
                if v {
                    assert!(d >= cfg.d_min - 1e-9 && d <= cfg.d_max + 1e-9);
                }
            }
        }
    }

    #[test]
    fn hypothesis_spans_follow_recurrence() {
        let scene = small_scene(2);
        let (views, _) = scene_views(&scene);
        let cfg = PipelineConfig::default();
        let out = run_pipeline(
            &views,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default(),
        )
        .unwrap();
        let s0 = 1.0 / cfg.d_min - 1.0 / cfg.d_max;
        let expected = [s0, s0 / 7.0, s0 / 49.0, s0 / 147.0];
        for (k, s) in out.stages.iter().enumerate() {
            assert_relative_eq!(s.hypotheses.inverse_span, expected[k], max_relative = 1e-12);
        }
    }

    #[test]
    fn source_permutation_is_bit_identical() {
        let scene = small_scene(3);
        let (mut views, _) = scene_views(&scene);
        let cfg = PipelineConfig::default();
        let a = run_pipeline(
            &views,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default(),
        )
        .unwrap();
        views.swap(1, 4);
        views.swap(2, 3);
        let b = run_pipeline(
            &views,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default(),
        )
        .unwrap();
        assert_eq!(a.final_depth().depth, b.final_depth().depth);
        assert_eq!(a.final_depth().confidence, b.final_depth().confidence);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn worker_count_is_bit_identical() {
        let scene = small_scene(4);
        let (views, _) = scene_views(&scene);
        let cfg = PipelineConfig::default();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let eight = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap();
        let a = one
            .install(|| {
                run_pipeline(
                    &views,
                    &cfg,
                    &FeatureSource::Oracle,
                    &StageWeights::default(),
                )
            })
            .unwrap();
        let b = eight
            .install(|| {
                run_pipeline(
                    &views,
                    &cfg,
                    &FeatureSource::Oracle,
                    &StageWeights::default(),
                )
            })
            .unwrap();
        for (sa, sb) in a.stages.iter().zip(&b.stages) {
            assert_eq!(sa.depth.depth, sb.depth.depth);
            assert_eq!(sa.probabilities.probs, sb.probabilities.probs);
        }
    }

    #[test]
    fn zero_baseline_source_gives_finite_depths() {
        // A source identical to the reference: epipolar samples coincide,
        // attention is uniform, and the readout must stay finite.
        let scene = small_scene(5);
        let out0 = render(&scene, 0).unwrap();
        let views = vec![
            ViewInput {
                image: out0.image.clone(),
                camera: out0.camera.clone(),
            },
            ViewInput {
                image: out0.image.clone(),
                camera: out0.camera.clone(),
            },
        ];
        let cfg = PipelineConfig::default();
        let out = run_pipeline(
            &views,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default(),
        )
        .unwrap();
        for s in &out.stages {
            for (&d, &v) in s.depth.depth.iter().zip(s.depth.valid.iter()) {
                if v {
                    assert!(d.is_finite());
                }
            }
        }
    }

    #[test]
    fn variance_fusion_runs_end_to_end() {
        let scene = small_scene(6);
        let (views, _) = scene_views(&scene);
        let cfg = PipelineConfig {
            fusion: FusionMode::Variance,
            ..PipelineConfig::default()
        };
        let out = run_pipeline(
            &views,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default(),
        )
        .unwrap();
        let d = out.final_depth();
        let valid = d.valid.iter().filter(|&&v| v).count();
        assert!(valid > d.depth.len() / 2);
        for (&x, &v) in d.depth.iter().zip(d.valid.iter()) {
            if v {
                assert!(x.is_finite());
            }
        }
    }

    #[test]
    fn stage_zero_epe_within_one_bin() {
        // Plane scene oracle: stage-0 error bounded by one inverse-depth bin
        // expressed in depth at the surface.
        let scene = SceneSpec::three_planes(7);
        let (views, gt) = scene_views(&scene);
        let cfg = PipelineConfig::default();
        let out = run_pipeline(
            &views,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default(),
        )
        .unwrap();
        let s0 = &out.stages[0];
        let (sh, sw) = s0.depth.dims();
        let f = gt.depth.dim().0 / sh;
        let mut err_sum = 0.0;
        let mut bin_sum = 0.0;
        let mut n = 0.0;
        let inv_step = s0.hypotheses.inverse_span / (s0.hypotheses.count - 1) as f64;
        for y in 0..sh {
            for x in 0..sw {
                if !s0.depth.valid[(y, x)] || !gt.valid[(y * f, x * f)] {
                    continue;
                }
                let g = gt.depth[(y * f, x * f)];
                err_sum += (s0.depth.depth[(y, x)] - g).abs();
                bin_sum += inv_step * g * g; // bin width in depth near g
                n += 1.0;
            }
        }
        let epe = err_sum / n;
        let mean_bin = bin_sum / n;
        assert!(
            epe <= mean_bin,
            "stage-0 EPE {epe:.2} > bin width {mean_bin:.2}"
        );
    }

    #[test]
    fn stage_sequencing_errors() {
        let scene = small_scene(8);
        let (views, _) = scene_views(&scene);
        let cfg = PipelineConfig::default();
        let pyramids: Vec<Vec<crate::features::FeatureMap>> = views
            .iter()
            .map(|v| crate::features::oracle_pyramid(&v.image).unwrap())
            .collect();
        let srcs: Vec<&[crate::features::FeatureMap]> =
            pyramids[1..].iter().map(|p| p.as_slice()).collect();
        let level = stage_scale(0);
        let ref_cam = views[0].camera.scaled(level);
        let src_cams: Vec<CameraModel> =
            views[1..].iter().map(|v| v.camera.scaled(level)).collect();
        // Stage 1 without previous depth (cameras at stage-1 resolution).
        let l1 = stage_scale(1);
        let ref_cam1 = views[0].camera.scaled(l1);
        let src_cams1: Vec<CameraModel> = views[1..].iter().map(|v| v.camera.scaled(l1)).collect();
        let err = run_stage(
            1,
            &pyramids[0],
            &srcs,
            &ref_cam1,
            &src_cams1,
            None,
            &cfg,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("previous"));
        // Stage 0 with a previous depth.
        let bogus = DepthMap {
            depth: Array2::from_elem((8, 10), 500.0),
            valid: Array2::from_elem((8, 10), true),
            confidence: Array2::from_elem((8, 10), 1.0),
        };
        let err = run_stage(
            0,
            &pyramids[0],
            &srcs,
            &ref_cam,
            &src_cams,
            Some(&bogus),
            &cfg,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("previous"));
        // Mismatched camera resolution.
        let bad_cam = views[0].camera.scaled(1);
        let err = run_stage(
            0,
            &pyramids[0],
            &srcs,
            &bad_cam,
            &src_cams,
            None,
            &cfg,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("resolution"));
    }

    #[test]
    fn upsample_preserves_validity_borders() {
        let mut prev = DepthMap {
            depth: Array2::from_elem((4, 4), 600.0),
            valid: Array2::from_elem((4, 4), true),
            confidence: Array2::from_elem((4, 4), 1.0),
        };
        prev.depth[(0, 0)] = 500.0;
        prev.valid[(2, 2)] = false;
        let up = upsample_depth(&prev, 8, 8);
        // Valid pixels adjacent to the invalid region never blend with it.
        for y in 0..8 {
            for x in 0..8 {
                if up.valid[(y, x)] {
                    let d = up.depth[(y, x)];
                    assert!((500.0..=600.0).contains(&d));
                }
            }
        }
        // Far corner interpolates cleanly.
        assert_relative_eq!(up.depth[(7, 7)], 600.0);
    }

    #[test]
    fn rejects_too_few_views_and_bad_resolution() {
        let scene = small_scene(9);
        let out0 = render(&scene, 0).unwrap();
        let cfg = PipelineConfig::default();
        let single = vec![ViewInput {
            image: out0.image.clone(),
            camera: out0.camera.clone(),
        }];
        assert!(run_pipeline(
            &single,
            &cfg,
            &FeatureSource::Oracle,
            &StageWeights::default()
        )
        .is_err());
    }
}
