//! Multi-view depth filtering and point-cloud fusion.
//!
//! A reference pixel survives the geometric filter when enough source views
//! agree with it: the round-tripped reprojection lands within a pixel
//! tolerance and the round-tripped depth within a relative tolerance.
//! Fusion back-projects surviving pixels at the average of their own depth
//! and the reprojected depths of consistent views, claiming source pixels
//! so they do not re-seed duplicate points.

use nalgebra::{Vector2, Vector3};
use ndarray::{Array2, Array3};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::par;
use crate::pipeline::DepthMap;

/// Tolerances for geometric consistency voting.
#[derive(Debug, Clone, Copy)]
pub struct FilterParams {
    /// Reprojection round-trip tolerance in pixels.
    pub reproj_px_tol: f64,
    /// Relative depth tolerance for the round-tripped depth.
    pub rel_depth_tol: f64,
    /// Minimum number of consistent source views.
    pub min_consistent: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            reproj_px_tol: 1.0,
            rel_depth_tol: 0.01,
            min_consistent: 4,
        }
    }
}

/// A fused point cloud in world coordinates.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    /// Seed pixel of each point: (view, y, x).
    pub provenance: Option<Vec<(usize, usize, usize)>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One consistency vote from a source view.
struct Vote {
    src: usize,
    src_y: usize,
    src_x: usize,
    /// Depth of the round-tripped point in the reference camera.
    reproj_depth: f64,
}

/// Test a reference pixel against one source view; `Some(vote)` when the
/// source agrees within the tolerances.
fn consistency_vote(
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    src_depth_map: &DepthMap,
    src: usize,
    pixel: Vector2<f64>,
    depth: f64,
    params: &FilterParams,
) -> Option<Vote> {
    let world = ref_cam.back_project(pixel, depth);
    let (q, _, in_bounds) = src_cam.project(world);
    if !in_bounds {
        return None;
    }
    // Nearest texel; the continuous coordinate is already known in-bounds,
    // so rounding at most touches the border.
    let sx = (q.x.round() as usize).min(src_cam.width - 1);
    let sy = (q.y.round() as usize).min(src_cam.height - 1);
    if !src_depth_map.valid[(sy, sx)] {
        return None;
    }
    let d_src = src_depth_map.depth[(sy, sx)];
    if !d_src.is_finite() || d_src <= 0.0 {
        return None;
    }
    let world_back = src_cam.back_project(Vector2::new(sx as f64, sy as f64), d_src);
    let (p_back, d_reproj, _) = ref_cam.project(world_back);
    if !d_reproj.is_finite() || d_reproj <= 0.0 {
        return None;
    }
    let reproj_err = (p_back - pixel).norm();
    let rel_err = (d_reproj - depth).abs() / depth;
    if reproj_err <= params.reproj_px_tol && rel_err <= params.rel_depth_tol {
        Some(Vote {
            src,
            src_y: sy,
            src_x: sx,
            reproj_depth: d_reproj,
        })
    } else {
        None
    }
}

/// Geometric consistency masks, one per view acting as reference.
///
/// Returns the masks and a warning flag that is set when fewer than
/// `min_consistent + 1` views exist, in which case everything is filtered.
pub fn geometric_filter(
    depths: &[DepthMap],
    cams: &[CameraModel],
    params: &FilterParams,
) -> Result<(Vec<Array2<bool>>, bool)> {
    if depths.is_empty() || depths.len() != cams.len() {
        return Err(Error::usage("need matching depth maps and cameras"));
    }
    let dims = depths[0].dims();
    for (d, c) in depths.iter().zip(cams) {
        if d.dims() != dims {
            return Err(Error::usage("all depth maps must share one resolution"));
        }
        if (c.height, c.width) != dims {
            return Err(Error::usage("camera resolution must match depth maps"));
        }
    }
    let n = depths.len();
    if n < params.min_consistent + 1 {
        let empty = vec![Array2::from_elem(dims, false); n];
        return Ok((empty, true));
    }
    let (h, w) = dims;
    let mut masks = Vec::with_capacity(n);
    for r in 0..n {
        let rows = par::map_indexed(h, |y| {
            let mut row = vec![false; w];
            for (x, slot) in row.iter_mut().enumerate() {
                if !depths[r].valid[(y, x)] {
                    continue;
                }
                let depth = depths[r].depth[(y, x)];
                if !depth.is_finite() || depth <= 0.0 {
                    continue;
                }
                let pixel = Vector2::new(x as f64, y as f64);
                let mut votes = 0usize;
                for s in 0..n {
                    if s == r {
                        continue;
                    }
                    if consistency_vote(&cams[r], &cams[s], &depths[s], s, pixel, depth, params)
                        .is_some()
                    {
                        votes += 1;
                        if votes >= params.min_consistent {
                            break;
                        }
                    }
                }
                *slot = votes >= params.min_consistent;
            }
            row
        });
        let mut mask = Array2::from_elem(dims, false);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, v) in row.into_iter().enumerate() {
                mask[(y, x)] = v;
            }
        }
        masks.push(mask);
    }
    Ok((masks, false))
}

/// Keep pixels whose confidence meets the threshold.
pub fn photometric_filter(confidence: &Array2<f64>, threshold: f64) -> Array2<bool> {
    confidence.mapv(|c| c >= threshold)
}

/// Fuse filtered depth maps into a point cloud.
///
/// Views are visited in index order and pixels row-major; every consistent
/// source pixel is claimed by the first fused point it supports and never
/// seeds its own point afterwards. When `images` are given, each point takes
/// the color of its seed pixel.
pub fn fuse_point_cloud(
    depths: &[DepthMap],
    cams: &[CameraModel],
    masks: &[Array2<bool>],
    params: &FilterParams,
    images: Option<&[Array3<f64>]>,
) -> Result<PointCloud> {
    if depths.len() != cams.len() || depths.len() != masks.len() {
        return Err(Error::usage("depths, cameras and masks must align"));
    }
    let n = depths.len();
    let (h, w) = depths[0].dims();
    let mut claimed: Vec<Array2<bool>> = vec![Array2::from_elem((h, w), false); n];
    let mut points = Vec::new();
    let mut colors = images.map(|_| Vec::new());
    let mut provenance = Vec::new();

    for r in 0..n {
        for y in 0..h {
            for x in 0..w {
                if !masks[r][(y, x)] || claimed[r][(y, x)] || !depths[r].valid[(y, x)] {
                    continue;
                }
                let depth = depths[r].depth[(y, x)];
                let pixel = Vector2::new(x as f64, y as f64);
                let mut depth_sum = depth;
                let mut count = 1.0;
                let mut votes = Vec::new();
                for s in 0..n {
                    if s == r {
                        continue;
                    }
                    if let Some(v) =
                        consistency_vote(&cams[r], &cams[s], &depths[s], s, pixel, depth, params)
                    {
                        depth_sum += v.reproj_depth;
                        count += 1.0;
                        votes.push(v);
                    }
                }
                let fused_depth = depth_sum / count;
                points.push(cams[r].back_project(pixel, fused_depth));
                provenance.push((r, y, x));
                if let (Some(colors), Some(images)) = (colors.as_mut(), images) {
                    let img = &images[r];
                    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    colors.push([
                        to_u8(img[(y, x, 0)]),
                        to_u8(img[(y, x, 1)]),
                        to_u8(img[(y, x, 2)]),
                    ]);
                }
                claimed[r][(y, x)] = true;
                for v in votes {
                    claimed[v.src][(v.src_y, v.src_x)] = true;
                }
            }
        }
    }
    Ok(PointCloud {
        points,
        colors,
        provenance: Some(provenance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn cam(t: Vector3<f64>, w: usize, h: usize) -> CameraModel {
        let k = Matrix3::new(
            200.0,
            0.0,
            w as f64 / 2.0,
            0.0,
            200.0,
            h as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        CameraModel::new(k, Matrix3::identity(), t, w, h).unwrap()
    }

    fn plane_depth_map(cam: &CameraModel, plane_z: f64) -> DepthMap {
        // Fronto-parallel plane at world z = plane_z; identity-rotation
        // cameras see depth = plane_z - cam_z at every pixel.
        let d = plane_z + cam.translation.z;
        DepthMap {
            depth: Array2::from_elem((cam.height, cam.width), d),
            valid: Array2::from_elem((cam.height, cam.width), true),
            confidence: Array2::from_elem((cam.height, cam.width), 1.0),
        }
    }

    fn rig(n: usize) -> (Vec<CameraModel>, Vec<DepthMap>) {
        let cams: Vec<CameraModel> = (0..n)
            .map(|i| cam(Vector3::new(i as f64 * -8.0, 0.0, 0.0), 64, 48))
            .collect();
        let depths: Vec<DepthMap> = cams.iter().map(|c| plane_depth_map(c, 500.0)).collect();
        (cams, depths)
    }

    #[test]
    fn perfect_plane_survives_filtering() {
        let (cams, depths) = rig(6);
        let (masks, warned) = geometric_filter(&depths, &cams, &FilterParams::default()).unwrap();
        assert!(!warned);
        // Central pixels of the middle view reproject into >= 4 sources.
        let mask = &masks[2];
        let mut kept = 0;
        for y in 8..40 {
            for x in 8..56 {
                if mask[(y, x)] {
                    kept += 1;
                }
            }
        }
        assert_eq!(kept, 32 * 48, "all central pixels should survive");
    }

    #[test]
    fn too_few_views_filters_everything_with_warning() {
        let (cams, depths) = rig(3);
        let (masks, warned) = geometric_filter(&depths, &cams, &FilterParams::default()).unwrap();
        assert!(warned);
        assert!(masks.iter().all(|m| m.iter().all(|&v| !v)));
    }

    #[test]
    fn min_consistent_zero_keeps_all_valid() {
        let (cams, depths) = rig(2);
        let params = FilterParams {
            min_consistent: 0,
            ..FilterParams::default()
        };
        let (masks, warned) = geometric_filter(&depths, &cams, &params).unwrap();
        assert!(!warned);
        assert!(masks[0].iter().all(|&v| v));
    }

    #[test]
    fn corrupted_view_loses_votes_but_thresholds_hold() {
        let (cams, mut depths) = rig(5);
        // Corrupt one source by +10%: its votes must disappear.
        depths[4].depth.mapv_inplace(|d| d * 1.1);
        let params = FilterParams::default();
        let (masks, _) = geometric_filter(&depths, &cams, &params).unwrap();
        // Reference 0 now has only 3 clean sources: nothing can reach 4 votes.
        assert!(masks[0].iter().all(|&v| !v));
    }

    #[test]
    fn raising_min_consistent_never_grows_kept_set() {
        let (cams, depths) = rig(6);
        let mut prev_kept = usize::MAX;
        for min_consistent in 1..=5 {
            let params = FilterParams {
                min_consistent,
                ..FilterParams::default()
            };
            let (masks, _) = geometric_filter(&depths, &cams, &params).unwrap();
            let kept: usize = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
            assert!(kept <= prev_kept);
            prev_kept = kept;
        }
    }

    #[test]
    fn photometric_filter_thresholds() {
        let conf = Array2::from_shape_vec((1, 2), vec![0.4, 0.6]).unwrap();
        let mask = photometric_filter(&conf, 0.5);
        assert!(!mask[(0, 0)]);
        assert!(mask[(0, 1)]);
        let all = photometric_filter(&conf, 0.0);
        assert!(all.iter().all(|&v| v));
    }

    #[test]
    fn raising_confidence_threshold_never_grows_kept_set() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let conf = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let mut prev = usize::MAX;
        for thr in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let kept = photometric_filter(&conf, thr)
                .iter()
                .filter(|&&v| v)
                .count();
            assert!(kept <= prev);
            prev = kept;
        }
    }

    #[test]
    fn single_view_back_projection_identity() {
        let c = cam(Vector3::zeros(), 8, 8);
        let mut depth = plane_depth_map(&c, 100.0);
        depth.depth.fill(50.0);
        let mask = Array2::from_elem((8, 8), true);
        let params = FilterParams {
            min_consistent: 0,
            ..FilterParams::default()
        };
        let cloud =
            fuse_point_cloud(&[depth], std::slice::from_ref(&c), &[mask], &params, None).unwrap();
        assert_eq!(cloud.len(), 64);
        // Point for pixel (u,v) is K^-1 (u,v,1) * d.
        let expect = c.back_project(Vector2::new(3.0, 2.0), 50.0);
        let got = cloud.points[2 * 8 + 3];
        assert_relative_eq!((expect - got).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn consistent_views_average_depths() {
        let (cams, depths) = rig(5);
        let masks: Vec<Array2<bool>> = depths
            .iter()
            .map(|d| Array2::from_elem(d.dims(), true))
            .collect();
        let cloud =
            fuse_point_cloud(&depths, &cams, &masks, &FilterParams::default(), None).unwrap();
        assert!(!cloud.is_empty());
        // Every fused point lies on the z = 500 plane (all views agree).
        for p in &cloud.points {
            assert_relative_eq!(p.z, 500.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fused_points_reproject_into_seed_pixel() {
        let (cams, depths) = rig(5);
        let params = FilterParams::default();
        let (masks, _) = geometric_filter(&depths, &cams, &params).unwrap();
        let cloud = fuse_point_cloud(&depths, &cams, &masks, &params, None).unwrap();
        let prov = cloud.provenance.as_ref().unwrap();
        for (p, &(view, y, x)) in cloud.points.iter().zip(prov) {
            let (q, _, _) = cams[view].project(*p);
            let err = (q - Vector2::new(x as f64, y as f64)).norm();
            assert!(err <= params.reproj_px_tol, "reprojection error {err}");
        }
    }

    #[test]
    fn claimed_pixels_do_not_reseed() {
        let (cams, depths) = rig(5);
        let masks: Vec<Array2<bool>> = depths
            .iter()
            .map(|d| Array2::from_elem(d.dims(), true))
            .collect();
        let cloud =
            fuse_point_cloud(&depths, &cams, &masks, &FilterParams::default(), None).unwrap();
        let total_pixels: usize = depths.iter().map(|d| d.depth.len()).sum();
        // Duplicate suppression must fuse far fewer points than pixels.
        assert!(cloud.len() < total_pixels / 2, "{}", cloud.len());
    }
}
