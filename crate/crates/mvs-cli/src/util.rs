//! Shared helpers: scene-directory loading and partial-output cleanup.

use anyhow::{anyhow, bail, Context, Result};
use std::path::{Path, PathBuf};

use mvs_core::camera::CameraModel;
use mvs_core::io::{camera_txt, pfm};
use mvs_core::pipeline::{DepthMap, ViewInput};

/// Tracks files created by a command so they can be removed if it fails.
#[derive(Default)]
pub struct OutputTracker {
    created: Vec<PathBuf>,
    committed: bool,
}

impl OutputTracker {
    pub fn track(&mut self, path: &Path) -> PathBuf {
        self.created.push(path.to_path_buf());
        path.to_path_buf()
    }

    /// Keep the outputs; call once the command has fully succeeded.
    pub fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for OutputTracker {
    fn drop(&mut self) {
        if !self.committed {
            for path in &self.created {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}

/// One view loaded from a scene directory written by `mvs synth`.
pub struct LoadedView {
    pub input: ViewInput,
    pub gt_depth: Option<DepthMap>,
}

/// Number of views in a scene directory (consecutive `cam_N.txt` files).
pub fn count_views(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while dir.join(format!("cam_{n}.txt")).exists() {
        n += 1;
    }
    if n == 0 {
        bail!("no cam_0.txt in {}", dir.display());
    }
    Ok(n)
}

pub fn load_view(dir: &Path, view: usize) -> Result<LoadedView> {
    let img_path = dir.join(format!("image_{view}.pfm"));
    let cam_path = dir.join(format!("cam_{view}.txt"));
    let image =
        pfm::read_color(&img_path).with_context(|| format!("loading {}", img_path.display()))?;
    let (h, w, _) = image.dim();
    let cam_file = camera_txt::read(&cam_path)?;
    let camera: CameraModel = cam_file.into_camera(w, h)?;
    let gt_path = dir.join(format!("depth_{view}.pfm"));
    let gt_depth = if gt_path.exists() {
        Some(depth_from_pfm(&gt_path)?)
    } else {
        None
    };
    Ok(LoadedView {
        input: ViewInput { image, camera },
        gt_depth,
    })
}

/// Depth maps are exchanged as PFM with 0 marking invalid pixels.
pub fn depth_from_pfm(path: &Path) -> Result<DepthMap> {
    let depth = pfm::read(path)?;
    let valid = depth.mapv(|d| d > 0.0);
    let confidence = valid.mapv(|v| if v { 1.0 } else { 0.0 });
    Ok(DepthMap {
        depth,
        valid,
        confidence,
    })
}

pub fn depth_to_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    let mut out = map.depth.clone();
    for (d, &v) in out.iter_mut().zip(map.valid.iter()) {
        if !v {
            *d = 0.0;
        }
    }
    pfm::write(path, &out).map_err(|e| anyhow!(e))
}

/// Reference + source ordering from a `--views` list like "2,0,1".
pub fn parse_view_list(spec: &str, total: usize) -> Result<Vec<usize>> {
    let views: Vec<usize> = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("bad view index '{t}'"))
        })
        .collect::<Result<_>>()?;
    if views.len() < 2 {
        bail!("--views needs at least a reference and one source");
    }
    for &v in &views {
        if v >= total {
            bail!("view {v} out of range (scene has {total})");
        }
    }
    let mut seen = vec![false; total];
    for &v in &views {
        if seen[v] {
            bail!("view {v} listed twice");
        }
        seen[v] = true;
    }
    Ok(views)
}
