//! Cross-module integration: the cascade with encoder features and the
//! learned regularizer, plus file-format interplay with the pipeline.

use mvs_core::fpn::WeightBundle;
use mvs_core::io::{camera_txt, pfm, weights};
use mvs_core::pipeline::{run_pipeline, FeatureSource, PipelineConfig, StageWeights, ViewInput};
use mvs_core::regularizer::{RegularizerMode, UnetWeights};
use mvs_core::synth::{render, SceneSpec};

fn tiny_scene(seed: u64) -> SceneSpec {
    let mut scene = SceneSpec::three_planes(seed);
    scene.height = 64;
    scene.width = 80;
    scene.focal = 160.0;
    scene
}

fn views_of(scene: &SceneSpec) -> Vec<ViewInput> {
    (0..scene.ring.count)
        .map(|v| {
            let out = render(scene, v).expect("render");
            ViewInput {
                image: out.image,
                camera: out.camera,
            }
        })
        .collect()
}

#[test]
fn pipeline_runs_with_encoder_features() {
    let scene = tiny_scene(1);
    let views = views_of(&scene);
    let bundle = WeightBundle::seeded(9);
    let cfg = PipelineConfig::default();
    let out = run_pipeline(
        &views,
        &cfg,
        &FeatureSource::Fpn(&bundle),
        &StageWeights::default(),
    )
    .unwrap();
    let d = out.final_depth();
    assert!(d.depth.iter().all(|v| v.is_finite()));
    // Identical weights and inputs: bit-identical rerun.
    let again = run_pipeline(
        &views,
        &cfg,
        &FeatureSource::Fpn(&bundle),
        &StageWeights::default(),
    )
    .unwrap();
    assert_eq!(d.depth, again.final_depth().depth);
}

#[test]
fn pipeline_runs_with_learned_regularizer() {
    // The UNet downsamples three times spatially, so every stage resolution
    // must divide by 8; 128x128 keeps the coarsest stage at 16x16.
    let mut scene = SceneSpec::three_planes(2);
    scene.height = 128;
    scene.width = 128;
    scene.focal = 280.0;
    let views = views_of(&scene);
    let cfg = PipelineConfig {
        regularizer: RegularizerMode::Learned,
        ..PipelineConfig::default()
    };
    // One UNet per stage, sized for that stage's group count.
    let unets: Vec<UnetWeights> = (0..4)
        .map(|k| UnetWeights::seeded(30 + k as u64, cfg.group_counts[k]))
        .collect();
    let stage_weights = StageWeights {
        unet: [
            Some(&unets[0]),
            Some(&unets[1]),
            Some(&unets[2]),
            Some(&unets[3]),
        ],
    };
    let out = run_pipeline(&views, &cfg, &FeatureSource::Oracle, &stage_weights).unwrap();
    for s in &out.stages {
        assert!(s.probabilities.probs.iter().all(|p| p.is_finite()));
    }
    // Learned mode without weights is a configuration error.
    let err = run_pipeline(
        &views,
        &cfg,
        &FeatureSource::Oracle,
        &StageWeights::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("weights"), "{err}");
}

#[test]
fn weight_bundle_file_feeds_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fpn.bin");
    let bundle = WeightBundle::seeded(17);
    weights::write_layers(&path, &bundle.layers).unwrap();
    let loaded = WeightBundle {
        layers: weights::read_layers(&path).unwrap(),
        provenance: mvs_core::fpn::Provenance::LoadedFile,
    };
    let scene = tiny_scene(3);
    let views = views_of(&scene);
    let cfg = PipelineConfig::default();
    let a = run_pipeline(
        &views,
        &cfg,
        &FeatureSource::Fpn(&bundle),
        &StageWeights::default(),
    )
    .unwrap();
    let b = run_pipeline(
        &views,
        &cfg,
        &FeatureSource::Fpn(&loaded),
        &StageWeights::default(),
    )
    .unwrap();
    assert_eq!(a.final_depth().depth, b.final_depth().depth);
}

#[test]
fn rendered_view_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(4);
    let out = render(&scene, 1).unwrap();
    let img_path = dir.path().join("image.pfm");
    pfm::write_color(&img_path, &out.image).unwrap();
    let cam_path = dir.path().join("cam.txt");
    camera_txt::write(
        &cam_path,
        &camera_txt::CameraFile::from_camera(&out.camera, scene.depth_min, 2.0),
    )
    .unwrap();
    let image = pfm::read_color(&img_path).unwrap();
    let cam = camera_txt::read(&cam_path)
        .unwrap()
        .into_camera(scene.width, scene.height)
        .unwrap();
    assert_eq!(cam.rotation, out.camera.rotation);
    assert_eq!(cam.translation, out.camera.translation);
    // f32 storage rounds the image; the difference stays below f32 epsilon.
    for (a, b) in image.iter().zip(out.image.iter()) {
        assert!((a - b).abs() <= 1e-6);
    }
}
