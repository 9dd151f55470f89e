//! Subcommand implementations.

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use mvs_core::fpn::WeightBundle;
use mvs_core::fusion::{self, FilterParams};
use mvs_core::io::kv::KvMap;
use mvs_core::io::manifest::RunManifest;
use mvs_core::io::{camera_txt, pfm, ply, weights};
use mvs_core::metrics;
use mvs_core::ot::{self, DepthDistribution};
use mvs_core::pipeline::{
    run_pipeline_partial, FeatureSource, PipelineConfig, StageWeights, ViewInput,
};
use mvs_core::synth::{self, SceneSpec};

use crate::ensure_dir;
use crate::util::{
    count_views, depth_from_pfm, depth_to_pfm, load_view, parse_view_list, OutputTracker,
};

#[derive(Args)]
pub struct SynthArgs {
    /// Scene specification file (flat key-value). Mutually exclusive with --preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in scene: three-planes | wall | occluded.
    #[arg(long)]
    pub preset: Option<String>,
    /// Seed for the preset scenes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn synth(args: &SynthArgs) -> Result<ExitCode> {
    let spec = match (&args.spec, &args.preset) {
        (Some(path), None) => SceneSpec::from_kv(&KvMap::load(path)?)?,
        (None, Some(name)) => match name.as_str() {
            "three-planes" => SceneSpec::three_planes(args.seed),
            "wall" => SceneSpec::plane_wall(args.seed),
            "occluded" => SceneSpec::occluded(args.seed, 0.1, 0.02),
            other => bail!("unknown preset '{other}'"),
        },
        _ => bail!("give exactly one of --spec or --preset"),
    };
    spec.validate()?;

    let mut manifest = RunManifest::new("synth", &args.output);
    if let Some(p) = &args.spec {
        manifest.config = Some(p.clone());
    }
    manifest.check_inputs()?;
    ensure_dir(&args.output)?;
    let mut tracker = OutputTracker::default();

    let d_interval = (spec.depth_max - spec.depth_min) / 255.0;
    for v in 0..spec.ring.count {
        let out = synth::render(&spec, v)?;
        let img_path = tracker.track(&args.output.join(format!("image_{v}.pfm")));
        pfm::write_color(&img_path, &out.image)?;
        let depth_path = tracker.track(&args.output.join(format!("depth_{v}.pfm")));
        depth_to_pfm(&depth_path, &out.depth)?;
        let cam_path = tracker.track(&args.output.join(format!("cam_{v}.txt")));
        camera_txt::write(
            &cam_path,
            &camera_txt::CameraFile::from_camera(&out.camera, spec.depth_min, d_interval),
        )?;
        manifest.artifacts.push(format!("image_{v}.pfm"));
        manifest.artifacts.push(format!("depth_{v}.pfm"));
        manifest.artifacts.push(format!("cam_{v}.txt"));
    }
    let spec_path = tracker.track(&args.output.join("scene.cfg"));
    spec.to_kv().save(&spec_path)?;
    manifest.artifacts.push("scene.cfg".into());
    manifest.set("views", spec.ring.count);
    manifest.set("seed", args.seed);
    let manifest_path = tracker.track(&args.output.join("manifest.txt"));
    manifest.save(&manifest_path)?;
    tracker.commit();
    println!(
        "synth: wrote {} views to {}",
        spec.ring.count,
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct EstimateArgs {
    /// Scene directory produced by `mvs synth`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Pipeline configuration file (flat key-value); defaults apply otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the fusion mode: epipolar | variance.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Number of cascade stages to run (1..=4).
    #[arg(long, default_value_t = 4)]
    pub stages: usize,
    /// Comma-separated view list, reference first (default: all, ref 0).
    #[arg(long)]
    pub views: Option<String>,
    /// Feature source: oracle | seeded | file.
    #[arg(long, default_value = "oracle")]
    pub features: String,
    /// Weight bundle path for --features file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Seed for --features seeded.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Estimate a depth map for every view as reference (needed for fusion).
    #[arg(long, default_value_t = false)]
    pub all_refs: bool,
}

pub fn estimate(args: &EstimateArgs, threads: Option<usize>) -> Result<ExitCode> {
    let mut manifest = RunManifest::new("estimate", &args.output);
    manifest.inputs.push(args.input.clone());
    manifest.config = args.config.clone();
    if let Some(w) = &args.weights {
        manifest.inputs.push(w.clone());
    }
    manifest.check_inputs()?;

    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::from_kv(&KvMap::load(path)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(f) = &args.fusion {
        cfg.fusion = f.parse()?;
    }
    // Depth range from the scene's camera files when not set explicitly.
    if args.config.is_none() {
        let cam0 = camera_txt::read(&args.input.join("cam_0.txt"))?;
        let scene_cfg = args.input.join("scene.cfg");
        if scene_cfg.exists() {
            let kv = KvMap::load(&scene_cfg)?;
            if let (Some(lo), Some(hi)) = (kv.get_f64("depth.min")?, kv.get_f64("depth.max")?) {
                cfg.d_min = lo;
                cfg.d_max = hi;
            }
        } else {
            cfg.d_min = cam0.d_min;
        }
        cfg.validate()?;
    }

    let bundle;
    let feature_source = match args.features.as_str() {
        "oracle" => FeatureSource::Oracle,
        "seeded" => {
            bundle = WeightBundle::seeded(args.seed);
            FeatureSource::Fpn(&bundle)
        }
        "file" => {
            let path = args
                .weights
                .as_ref()
                .ok_or_else(|| anyhow!("--features file requires --weights"))?;
            bundle = WeightBundle {
                layers: weights::read_layers(path)?,
                provenance: mvs_core::fpn::Provenance::LoadedFile,
            };
            FeatureSource::Fpn(&bundle)
        }
        other => bail!("unknown feature source '{other}'"),
    };

    let total = count_views(&args.input)?;
    let order = match &args.views {
        Some(spec) => parse_view_list(spec, total)?,
        None => (0..total).collect(),
    };
    let loaded: Vec<_> = order
        .iter()
        .map(|&v| load_view(&args.input, v))
        .collect::<Result<_>>()?;

    ensure_dir(&args.output)?;
    let mut tracker = OutputTracker::default();
    let refs: Vec<usize> = if args.all_refs {
        (0..loaded.len()).collect()
    } else {
        vec![0]
    };

    let mut report = KvMap::new();
    for &r in &refs {
        let mut views: Vec<ViewInput> = Vec::with_capacity(loaded.len());
        views.push(ViewInput {
            image: loaded[r].input.image.clone(),
            camera: loaded[r].input.camera.clone(),
        });
        for (i, lv) in loaded.iter().enumerate() {
            if i != r {
                views.push(ViewInput {
                    image: lv.input.image.clone(),
                    camera: lv.input.camera.clone(),
                });
            }
        }
        let out = run_pipeline_partial(
            &views,
            &cfg,
            &feature_source,
            &StageWeights::default(),
            args.stages,
        )?;
        let ref_view = order[r];
        for stage in &out.stages {
            let dp = tracker.track(
                &args
                    .output
                    .join(format!("depth_view{ref_view}_stage{}.pfm", stage.stage)),
            );
            depth_to_pfm(&dp, &stage.depth)?;
            manifest
                .artifacts
                .push(format!("depth_view{ref_view}_stage{}.pfm", stage.stage));
        }
        let final_depth = out.final_depth();
        let dp = tracker.track(&args.output.join(format!("depth_view{ref_view}.pfm")));
        depth_to_pfm(&dp, final_depth)?;
        let cp = tracker.track(&args.output.join(format!("confidence_view{ref_view}.pfm")));
        pfm::write(&cp, &final_depth.confidence)?;
        manifest.artifacts.push(format!("depth_view{ref_view}.pfm"));
        manifest
            .artifacts
            .push(format!("confidence_view{ref_view}.pfm"));

        // Metrics against ground truth when the scene carries it.
        if let Some(gt) = &loaded[r].gt_depth {
            for stage in &out.stages {
                let (sh, sw) = stage.depth.dims();
                let f = gt.depth.dim().0 / sh;
                let mut g = ndarray::Array2::zeros((sh, sw));
                let mut v = ndarray::Array2::from_elem((sh, sw), false);
                for y in 0..sh {
                    for x in 0..sw {
                        g[(y, x)] = gt.depth[(y * f, x * f)];
                        v[(y, x)] = gt.valid[(y * f, x * f)] && stage.depth.valid[(y, x)];
                    }
                }
                let m = metrics::depth_metrics(&stage.depth.depth, &g, &v)?;
                report.set(
                    &format!("view{ref_view}.stage{}.epe", stage.stage),
                    format!("{:.6}", m.epe),
                );
                report.set(
                    &format!("view{ref_view}.stage{}.e1", stage.stage),
                    format!("{:.6}", m.e1),
                );
                report.set(
                    &format!("view{ref_view}.stage{}.e3", stage.stage),
                    format!("{:.6}", m.e3),
                );
            }
        }
    }
    if report.keys().next().is_some() {
        let rp = tracker.track(&args.output.join("metrics.txt"));
        report.save(&rp)?;
        manifest.artifacts.push("metrics.txt".into());
    }

    let cfg_path = tracker.track(&args.output.join("pipeline.cfg"));
    cfg.to_kv().save(&cfg_path)?;
    manifest.artifacts.push("pipeline.cfg".into());
    manifest.set("fusion", cfg.fusion);
    manifest.set("stages", args.stages);
    manifest.set("features", &args.features);
    manifest.set(
        "threads",
        threads.map_or("default".into(), |t| t.to_string()),
    );
    let mp = tracker.track(&args.output.join("manifest.txt"));
    manifest.save(&mp)?;
    tracker.commit();
    println!(
        "estimate: {} reference view(s), {} stage(s), fusion {}",
        refs.len(),
        args.stages,
        cfg.fusion
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct FuseArgs {
    /// Directory with per-view depth/confidence maps from `mvs estimate --all-refs`.
    #[arg(long)]
    pub input: PathBuf,
    /// Scene directory with cameras (and images for point colors).
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub min_consistent: usize,
    #[arg(long, default_value_t = 1.0)]
    pub reproj_tol: f64,
    #[arg(long, default_value_t = 0.01)]
    pub depth_tol: f64,
    #[arg(long, default_value_t = 0.5)]
    pub conf_threshold: f64,
    /// PLY flavor: binary | ascii.
    #[arg(long, default_value = "binary")]
    pub format: String,
}

pub fn fuse(args: &FuseArgs, threads: Option<usize>) -> Result<ExitCode> {
    let mut manifest = RunManifest::new("fuse", &args.output);
    manifest.inputs.push(args.input.clone());
    manifest.inputs.push(args.scene.clone());
    manifest.check_inputs()?;

    let format = match args.format.as_str() {
        "binary" => ply::PlyFormat::BinaryLittleEndian,
        "ascii" => ply::PlyFormat::Ascii,
        other => bail!("unknown PLY format '{other}'"),
    };
    let total = count_views(&args.scene)?;
    let mut cams = Vec::with_capacity(total);
    let mut depths = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total);
    for v in 0..total {
        let lv = load_view(&args.scene, v)?;
        let mut depth = depth_from_pfm(&args.input.join(format!("depth_view{v}.pfm")))
            .with_context(|| format!("estimate output for view {v}"))?;
        let conf_path = args.input.join(format!("confidence_view{v}.pfm"));
        if conf_path.exists() {
            let conf = pfm::read(&conf_path)?;
            let keep = fusion::photometric_filter(&conf, args.conf_threshold);
            for (v, &k) in depth.valid.iter_mut().zip(keep.iter()) {
                *v = *v && k;
            }
            depth.confidence = conf;
        }
        images.push(lv.input.image.clone());
        cams.push(lv.input.camera.clone());
        depths.push(depth);
    }

    let params = FilterParams {
        reproj_px_tol: args.reproj_tol,
        rel_depth_tol: args.depth_tol,
        min_consistent: args.min_consistent,
    };
    let (masks, warned) = fusion::geometric_filter(&depths, &cams, &params)?;
    if warned {
        eprintln!("warning: fewer than min_consistent+1 views; everything filtered");
    }
    let cloud = fusion::fuse_point_cloud(&depths, &cams, &masks, &params, Some(&images))?;

    ensure_dir(&args.output)?;
    let mut tracker = OutputTracker::default();
    let cloud_path = tracker.track(&args.output.join("cloud.ply"));
    ply::write(&cloud_path, &cloud, format)?;
    manifest.artifacts.push("cloud.ply".into());
    manifest.set("points", cloud.len());
    manifest.set("min_consistent", args.min_consistent);
    manifest.set("reproj_tol", args.reproj_tol);
    manifest.set("depth_tol", args.depth_tol);
    manifest.set("conf_threshold", args.conf_threshold);
    manifest.set(
        "threads",
        threads.map_or("default".into(), |t| t.to_string()),
    );
    let mp = tracker.track(&args.output.join("manifest.txt"));
    manifest.save(&mp)?;
    tracker.commit();
    println!("fuse: {} points -> {}", cloud.len(), args.output.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct EvalArgs {
    /// Predicted depth map (PFM) — pairs with --gt-depth.
    #[arg(long)]
    pub pred_depth: Option<PathBuf>,
    #[arg(long)]
    pub gt_depth: Option<PathBuf>,
    /// Reconstructed point cloud (PLY) — pairs with --gt-cloud.
    #[arg(long)]
    pub pred_cloud: Option<PathBuf>,
    #[arg(long)]
    pub gt_cloud: Option<PathBuf>,
    /// Nearest-neighbor distance cap for cloud metrics.
    #[arg(long, default_value_t = 20.0)]
    pub cap: f64,
}

pub fn eval(args: &EvalArgs) -> Result<ExitCode> {
    match (
        &args.pred_depth,
        &args.gt_depth,
        &args.pred_cloud,
        &args.gt_cloud,
    ) {
        (Some(pred), Some(gt), None, None) => {
            let pred = depth_from_pfm(pred)?;
            let gt = depth_from_pfm(gt)?;
            let mut valid = pred.valid.clone();
            for (v, &g) in valid.iter_mut().zip(gt.valid.iter()) {
                *v = *v && g;
            }
            let m = metrics::depth_metrics(&pred.depth, &gt.depth, &valid)?;
            println!("epe = {:.6}", m.epe);
            println!("e1 = {:.6}", m.e1);
            println!("e3 = {:.6}", m.e3);
        }
        (None, None, Some(pred), Some(gt)) => {
            let pred = ply::read(pred)?;
            let gt = ply::read(gt)?;
            let m = metrics::cloud_metrics(&pred, &gt, args.cap)?;
            println!("accuracy = {:.6}", m.accuracy);
            println!("completeness = {:.6}", m.completeness);
            println!("overall = {:.6}", m.overall);
        }
        _ => bail!("give --pred-depth/--gt-depth or --pred-cloud/--gt-cloud"),
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 8)]
    pub bins: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Transport epsilon as a fraction of the bin span.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon_frac: f64,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let max_rel = gradcheck_max_rel_error(args.instances, args.bins, args.seed, args.epsilon_frac)?;
    println!(
        "gradcheck: max relative error {max_rel:.3e} over {} instances",
        args.instances
    );
    if max_rel <= 1e-4 {
        Ok(ExitCode::SUCCESS)
    } else {
        bail!("gradient check failed: {max_rel:.3e} > 1e-4");
    }
}

/// Central finite differences of the entropic transport objective against
/// the dual-potential gradient, over seeded random instances.
pub fn gradcheck_max_rel_error(
    instances: usize,
    bins: usize,
    seed: u64,
    epsilon_frac: f64,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let h = 1e-5;
    for _ in 0..instances {
        let d_min = rng.gen_range(400.0..460.0);
        let d_max = rng.gen_range(880.0..990.0);
        let positions: Vec<f64> = (0..bins)
            .map(|j| {
                let t = j as f64 / (bins - 1) as f64;
                1.0 / (1.0 / d_min + t * (1.0 / d_max - 1.0 / d_min))
            })
            .collect();
        let mut mass: Vec<f64> = (0..bins).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        let q = DepthDistribution::new(positions, mass)?;
        let logits: Vec<f64> = (0..bins).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = epsilon_frac * q.span();
        // A fixed iteration budget keeps the solve a smooth function of the
        // logits, which the finite differences rely on.
        let iters = 800;
        let (grad, _) = ot::ot_loss_gradient(&logits, &q, eps, iters, 0.0)?;
        let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs())).max(1e-12);
        for k in 0..bins {
            let mut zp = logits.clone();
            zp[k] += h;
            let mut zm = logits.clone();
            zm[k] -= h;
            let op = objective(&zp, &q, eps, iters)?;
            let om = objective(&zm, &q, eps, iters)?;
            let fd = (op - om) / (2.0 * h);
            max_rel = max_rel.max((grad[k] - fd).abs() / scale);
        }
    }
    Ok(max_rel)
}

fn objective(logits: &[f64], q: &DepthDistribution, eps: f64, iters: usize) -> Result<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mass: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let p = DepthDistribution::new(q.bins.clone(), mass)?;
    Ok(ot::sinkhorn_w1_direct(&p, q, eps, iters, 0.0)?.objective)
}

#[derive(Args)]
pub struct BenchArgs {
    /// Scene specification file; a built-in preset is used otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repetitions per stage.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

pub fn bench(args: &BenchArgs, threads: Option<usize>) -> Result<ExitCode> {
    let spec = match &args.spec {
        Some(path) => SceneSpec::from_kv(&KvMap::load(path)?)?,
        None => SceneSpec::three_planes(args.seed),
    };
    let cfg = PipelineConfig::default();
    let mut views = Vec::new();
    for v in 0..spec.ring.count {
        let out = synth::render(&spec, v)?;
        views.push(ViewInput {
            image: out.image,
            camera: out.camera,
        });
    }
    println!(
        "bench: {}x{}, {} views, {} reps, threads {}",
        spec.height,
        spec.width,
        views.len(),
        args.reps,
        threads.map_or("default".into(), |t| t.to_string())
    );
    // One full run provides the previous-stage inputs; each stage is then
    // timed in isolation.
    let full = mvs_core::pipeline::run_pipeline(
        &views,
        &cfg,
        &FeatureSource::Oracle,
        &StageWeights::default(),
    )?;
    let pyramids: Vec<Vec<mvs_core::features::FeatureMap>> = views
        .iter()
        .map(|v| mvs_core::features::oracle_pyramid(&v.image))
        .collect::<mvs_core::Result<_>>()?;
    let srcs: Vec<&[mvs_core::features::FeatureMap]> =
        pyramids[1..].iter().map(|p| p.as_slice()).collect();
    for stage in 0..4 {
        let level = mvs_core::pipeline::stage_scale(stage);
        let ref_cam = views[0].camera.scaled(level);
        let src_cams: Vec<_> = views[1..].iter().map(|v| v.camera.scaled(level)).collect();
        let prev = if stage == 0 {
            None
        } else {
            Some(&full.stages[stage - 1].depth)
        };
        let mut times = Vec::with_capacity(args.reps);
        for _ in 0..args.reps {
            let t0 = Instant::now();
            mvs_core::pipeline::run_stage(
                stage,
                &pyramids[0],
                &srcs,
                &ref_cam,
                &src_cams,
                prev,
                &cfg,
                None,
            )?;
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let median = times[times.len() / 2];
        println!("stage {stage}: median {:.2} ms", median * 1e3);
    }
    Ok(ExitCode::SUCCESS)
}
