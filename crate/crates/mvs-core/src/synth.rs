//! Synthetic multi-view scenes with analytic ground-truth depth.
//!
//! Scenes are textured rectangles and spheres on a camera ring. Depth is
//! the exact ray-primitive intersection (camera-frame z, no rasterization),
//! shading is Lambertian under a fixed light with a seeded procedural
//! texture, and per-view photometric noise is applied after shading.
//! Everything is hash-based and stateless, so renders are bit-identical
//! across runs and worker counts.

use nalgebra::{Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::io::kv::KvMap;
use crate::par;
use crate::pipeline::DepthMap;

#[derive(Debug, Clone, PartialEq)]
pub struct RectPlane {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl RectPlane {
    /// Build a rectangle from center, (not necessarily unit) normal and half
    /// extents; in-plane axes are derived deterministically.
    pub fn from_normal(
        center: Vector3<f64>,
        normal: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    ) -> Result<Self> {
        let n = normal.norm();
        if n < 1e-12 || half_u <= 0.0 || half_v <= 0.0 {
            return Err(Error::config("degenerate plane parameters"));
        }
        let normal = if (n - 1.0).abs() <= 1e-12 {
            normal
        } else {
            normal / n
        };
        let hint = if normal.cross(&Vector3::y()).norm() > 1e-6 {
            Vector3::y()
        } else {
            Vector3::x()
        };
        let u_axis = hint.cross(&normal).normalize();
        let v_axis = normal.cross(&u_axis);
        Ok(Self {
            center,
            normal,
            u_axis,
            v_axis,
            half_u,
            half_v,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereShape {
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Plane(RectPlane),
    Sphere(SphereShape),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub center: Vector3<f64>,
    pub target: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// Per-view gain drawn from `1 +- gain_jitter`.
    pub gain_jitter: f64,
    /// Per-view offset drawn from `+- offset_jitter`.
    pub offset_jitter: f64,
    /// Additive per-pixel Gaussian sigma.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gain_jitter: 0.0,
            offset_jitter: 0.0,
            sigma: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub ring: CameraRing,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub noise: NoiseSpec,
    /// Base texture wavelength in depth units.
    pub texture_scale: f64,
}

pub struct RenderOutput {
    pub image: Array3<f64>,
    pub depth: DepthMap,
    pub camera: CameraModel,
}

struct Hit {
    t: f64,
    primitive: usize,
    point: Vector3<f64>,
    normal: Vector3<f64>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::config(format!(
                "resolution {}x{} must be divisible by 8",
                self.height, self.width
            )));
        }
        if self.primitives.is_empty() {
            return Err(Error::config("scene has no primitives"));
        }
        if self.ring.count < 1 {
            return Err(Error::config("camera ring needs at least one view"));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(Error::config("invalid scene depth range"));
        }
        for v in 0..self.ring.count {
            let cam = self.camera(v)?;
            let (_, _, sees) = cam.project(self.ring.target);
            if !sees {
                return Err(Error::config(format!("camera {v} does not see the target")));
            }
            let eye = cam.center();
            for (i, prim) in self.primitives.iter().enumerate() {
                if let Shape::Sphere(s) = &prim.shape {
                    if (eye - s.center).norm() <= s.radius {
                        return Err(Error::config(format!(
                            "camera {v} is inside sphere primitive {i}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Camera `v` on the ring, looking at the target.
    pub fn camera(&self, view: usize) -> Result<CameraModel> {
        if view >= self.ring.count {
            return Err(Error::usage(format!(
                "view {view} out of range ({} cameras)",
                self.ring.count
            )));
        }
        let theta = 2.0 * std::f64::consts::PI * view as f64 / self.ring.count as f64;
        let eye = self.ring.center
            + Vector3::new(
                self.ring.radius * theta.cos(),
                self.ring.radius * theta.sin(),
                0.0,
            );
        let forward = (self.ring.target - eye).normalize();
        let hint = if forward.cross(&Vector3::y()).norm() > 1e-6 {
            Vector3::y()
        } else {
            Vector3::x()
        };
        // CV convention: x right, y down, z forward.
        let x_c = hint.cross(&forward).normalize();
        let y_c = forward.cross(&x_c);
        let rotation = Matrix3::from_rows(&[x_c.transpose(), y_c.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        let k = Matrix3::new(
            self.focal,
            0.0,
            self.width as f64 / 2.0,
            0.0,
            self.focal,
            self.height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        CameraModel::new(k, rotation, translation, self.width, self.height)
    }

    fn intersect(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (idx, prim) in self.primitives.iter().enumerate() {
            let t = match &prim.shape {
                Shape::Plane(p) => {
                    let denom = p.normal.dot(&dir);
                    if denom.abs() < 1e-15 {
                        continue;
                    }
                    let t = p.normal.dot(&(p.center - origin)) / denom;
                    if t <= 1e-9 {
                        continue;
                    }
                    let point = origin + dir * t;
                    let rel = point - p.center;
                    if rel.dot(&p.u_axis).abs() > p.half_u || rel.dot(&p.v_axis).abs() > p.half_v {
                        continue;
                    }
                    t
                }
                Shape::Sphere(s) => {
                    let oc = origin - s.center;
                    let a = dir.norm_squared();
                    let b = 2.0 * oc.dot(&dir);
                    let c = oc.norm_squared() - s.radius * s.radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc < 0.0 {
                        continue;
                    }
                    let sq = disc.sqrt();
                    let t0 = (-b - sq) / (2.0 * a);
                    let t1 = (-b + sq) / (2.0 * a);

                    if t0 > 1e-9 {
                        t0
                    } else if t1 > 1e-9 {
                        t1
                    } else {
                        continue;
                    }
                }
            };
            if best.as_ref().is_none_or(|h| t < h.t) {
                let point = origin + dir * t;
                let normal = match &prim.shape {
                    Shape::Plane(p) => p.normal,
                    Shape::Sphere(s) => (point - s.center).normalize(),
                };
                best = Some(Hit {
                    t,
                    primitive: idx,
                    point,
                    normal,
                });
            }
        }
        best
    }

    /// Cast the ray through a (possibly continuous) pixel of view `view`.
    /// The returned `t` is the camera-frame depth of the hit.
    fn cast(&self, cam: &CameraModel, pixel: Vector2<f64>) -> Option<Hit> {
        let k_inv = cam.intrinsics.try_inverse().expect("valid K");
        let dir_cam = k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        let dir_world = cam.rotation.transpose() * dir_cam;
        self.intersect(cam.center(), dir_world)
    }
}

/// Render one view: shaded image, exact depth map, camera.
pub fn render(spec: &SceneSpec, view: usize) -> Result<RenderOutput> {
    spec.validate()?;
    let cam = spec.camera(view)?;
    let (h, w) = (spec.height, spec.width);
    let k_inv = cam.intrinsics.try_inverse().expect("valid K");
    let rot_t = cam.rotation.transpose();
    let eye = cam.center();
    let light = Vector3::new(-0.3, 0.4, -0.85).normalize();
    let gain = 1.0 + spec.noise.gain_jitter * signed_unit(hash3(spec.noise.seed, view as u64, 0));
    let offset = spec.noise.offset_jitter * signed_unit(hash3(spec.noise.seed, view as u64, 1));

    let rows = par::map_indexed(h, |y| {
        let mut img_row = vec![0.0f64; w * 3];
        let mut depth_row = vec![0.0f64; w];
        let mut valid_row = vec![false; w];
        for x in 0..w {
            let dir_cam = k_inv * Vector3::new(x as f64, y as f64, 1.0);
            let dir_world = rot_t * dir_cam;
            if let Some(hit) = spec.intersect(eye, dir_world) {
                depth_row[x] = hit.t;
                valid_row[x] = true;
                let prim = &spec.primitives[hit.primitive];
                let albedo = texture_albedo(hit.point, prim.texture_seed, spec.texture_scale);
                // Two-sided shading with an ambient floor.
                let mut n = hit.normal;
                if n.dot(&dir_world) > 0.0 {
                    n = -n;
                }
                let shade = albedo * (0.3 + 0.7 * n.dot(&light).max(0.0));
                let tint = primitive_tint(prim.texture_seed);
                for c in 0..3 {
                    let noise = spec.noise.sigma
                        * gaussian(hash5(
                            spec.noise.seed,
                            view as u64,
                            y as u64,
                            x as u64,
                            c as u64,
                        ));
                    img_row[x * 3 + c] = (gain * shade * tint[c] + offset + noise).clamp(0.0, 1.0);
                }
            }
        }
        (img_row, depth_row, valid_row)
    });

    let mut image = Array3::zeros((h, w, 3));
    let mut depth = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for (y, (img_row, depth_row, valid_row)) in rows.into_iter().enumerate() {
        for x in 0..w {
            for c in 0..3 {
                image[(y, x, c)] = img_row[x * 3 + c];
            }
            depth[(y, x)] = depth_row[x];
            valid[(y, x)] = valid_row[x];
        }
    }
    Ok(RenderOutput {
        image,
        depth: DepthMap {
            depth,
            valid,
            confidence: Array2::from_elem((h, w), 1.0),
        },
        camera: cam,
    })
}

/// Per-pixel visibility of the reference view's surface in a source view: the
/// reference point must reproject in bounds and the source ray through the
/// reprojection must hit the same primitive at the same depth.
pub fn gt_visibility(spec: &SceneSpec, ref_view: usize, src_view: usize) -> Result<Array2<bool>> {
    spec.validate()?;
    let ref_cam = spec.camera(ref_view)?;
    let src_cam = spec.camera(src_view)?;
    let (h, w) = (spec.height, spec.width);
    if ref_view == src_view {
        let out = render(spec, ref_view)?;
        return Ok(out.depth.valid);
    }
    let k_inv = ref_cam.intrinsics.try_inverse().expect("valid K");
    let rot_t = ref_cam.rotation.transpose();
    let eye = ref_cam.center();

    let rows = par::map_indexed(h, |y| {
        let mut row = vec![false; w];
        for (x, slot) in row.iter_mut().enumerate() {
            let dir_world = rot_t * (k_inv * Vector3::new(x as f64, y as f64, 1.0));
            let Some(hit) = spec.intersect(eye, dir_world) else {
                continue;
            };
            let (q, src_depth, in_bounds) = src_cam.project(hit.point);
            if !in_bounds {
                continue;
            }
            let Some(src_hit) = spec.cast(&src_cam, q) else {
                continue;
            };
            *slot = src_hit.primitive == hit.primitive
                && (src_hit.t - src_depth).abs() <= 1e-9 * src_depth.max(1.0);
        }
        row
    });
    let mut out = Array2::from_elem((h, w), false);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, v) in row.into_iter().enumerate() {
            out[(y, x)] = v;
        }
    }
    Ok(out)
}

/// Exact analytic depth of a source view at a continuous pixel; the oracle
/// half of the warp/render consistency property.
pub fn cast_depth(spec: &SceneSpec, cam: &CameraModel, pixel: Vector2<f64>) -> Option<f64> {
    spec.cast(cam, pixel).map(|h| h.t)
}

// Stateless hashing (splitmix64) for textures and noise.

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn hash3(a: u64, b: u64, c: u64) -> u64 {
    splitmix(splitmix(splitmix(a).wrapping_add(b)).wrapping_add(c))
}

fn hash5(a: u64, b: u64, c: u64, d: u64, e: u64) -> u64 {
    splitmix(hash3(a, b, c).wrapping_add(splitmix(d).wrapping_add(e)))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn signed_unit(h: u64) -> f64 {
    2.0 * unit(h) - 1.0
}

/// Standard normal from one hash via Box-Muller.
fn gaussian(h: u64) -> f64 {
    let u1 = unit(splitmix(h)).max(1e-12);
    let u2 = unit(splitmix(h ^ 0xdeadbeefcafef00d));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn lattice(seed: u64, ix: i64, iy: i64, iz: i64) -> f64 {
    unit(hash5(seed, 0x517cc1b7, ix as u64, iy as u64, iz as u64))
}

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise on a cubic lattice of the given cell size.
fn value_noise(p: Vector3<f64>, cell: f64, seed: u64) -> f64 {
    let q = p / cell;
    let ix = q.x.floor();
    let iy = q.y.floor();
    let iz = q.z.floor();
    let fx = fade(q.x - ix);
    let fy = fade(q.y - iy);
    let fz = fade(q.z - iz);
    let (ix, iy, iz) = (ix as i64, iy as i64, iz as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                acc += wx * wy * wz * lattice(seed, ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

/// Multi-octave value noise stretched to a high-contrast albedo in
/// [0.05, 0.95].
fn texture_albedo(p: Vector3<f64>, seed: u64, base_scale: f64) -> f64 {
    let mut v = 0.0;
    let mut weight = 0.5;
    let mut cell = base_scale;
    let mut total = 0.0;
    for octave in 0..5 {
        v += weight * value_noise(p, cell, seed.wrapping_add(octave));
        total += weight;
        weight *= 0.62;
        cell *= 0.5;
    }
    v /= total;
    (0.5 + 2.6 * (v - 0.5)).clamp(0.05, 0.95)
}

fn primitive_tint(seed: u64) -> [f64; 3] {
    [
        0.75 + 0.25 * unit(hash3(seed, 101, 0)),
        0.75 + 0.25 * unit(hash3(seed, 102, 0)),
        0.75 + 0.25 * unit(hash3(seed, 103, 0)),
    ]
}

// Scene presets used by the tests and the CLI examples.

impl SceneSpec {
    /// Three large tilted planes whose nearest-hit envelope forms a concave
    /// alcove: every pixel of every ring camera sees a textured slanted
    /// surface with no occlusion anywhere, and the seams are exact
    /// plane-plane intersections.
    pub fn three_planes(seed: u64) -> Self {
        let mk_plane = |center, normal, hu, hv| {
            RectPlane::from_normal(center, normal, hu, hv).expect("valid preset plane")
        };
        SceneSpec {
            primitives: vec![
                Primitive {
                    shape: Shape::Plane(mk_plane(
                        Vector3::new(-230.0, 0.0, 842.0),
                        Vector3::new(0.30, -0.04, -1.0),
                        700.0,
                        700.0,
                    )),
                    texture_seed: seed.wrapping_mul(3).wrapping_add(11),
                },
                Primitive {
                    shape: Shape::Plane(mk_plane(
                        Vector3::new(0.0, 0.0, 878.0),
                        Vector3::new(0.02, 0.05, -1.0),
                        700.0,
                        700.0,
                    )),
                    texture_seed: seed.wrapping_mul(3).wrapping_add(12),
                },
                Primitive {
                    shape: Shape::Plane(mk_plane(
                        Vector3::new(225.0, 0.0, 840.0),
                        Vector3::new(-0.32, 0.03, -1.0),
                        700.0,
                        700.0,
                    )),
                    texture_seed: seed.wrapping_mul(3).wrapping_add(13),
                },
            ],
            ring: CameraRing {
                count: 5,
                radius: 65.0,
                center: Vector3::zeros(),
                target: Vector3::new(0.0, 0.0, 845.0),
            },
            height: 256,
            width: 320,
            focal: 640.0,
            depth_min: 425.0,
            depth_max: 935.0,
            noise: NoiseSpec {
                seed: seed.wrapping_add(1),
                ..NoiseSpec::default()
            },
            texture_scale: 44.0,
        }
    }

    /// A single fronto-parallel wall seen by a 7-camera ring; every in-bounds
    /// pixel is visible everywhere.
    pub fn plane_wall(seed: u64) -> Self {
        SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Plane(
                    RectPlane::from_normal(
                        Vector3::new(0.0, 0.0, 700.0),
                        Vector3::new(0.0, 0.0, -1.0),
                        700.0,
                        560.0,
                    )
                    .expect("valid wall"),
                ),
                texture_seed: seed.wrapping_add(5),
            }],
            ring: CameraRing {
                count: 7,
                radius: 40.0,
                center: Vector3::zeros(),
                target: Vector3::new(0.0, 0.0, 700.0),
            },
            height: 128,
            width: 160,
            focal: 180.0,
            depth_min: 425.0,
            depth_max: 935.0,
            noise: NoiseSpec {
                seed: seed.wrapping_add(2),
                ..NoiseSpec::default()
            },
            texture_scale: 44.0,
        }
    }

    /// Panels plus an occluding sphere in front, with photometric jitter;
    /// the fusion-ablation scene.
    pub fn occluded(seed: u64, gain_jitter: f64, sigma: f64) -> Self {
        let mut spec = Self::three_planes(seed);
        spec.primitives.push(Primitive {
            shape: Shape::Sphere(SphereShape {
                center: Vector3::new(-25.0, 20.0, 700.0),
                radius: 55.0,
            }),
            texture_seed: seed.wrapping_mul(7).wrapping_add(29),
        });
        spec.noise.gain_jitter = gain_jitter;
        spec.noise.sigma = sigma;
        spec
    }
}

// Flat key-value serialization, shared with the pipeline config format.

impl SceneSpec {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("scene.height", self.height);
        kv.set("scene.width", self.width);
        kv.set("scene.focal", self.focal);
        kv.set("scene.texture_scale", self.texture_scale);
        kv.set("ring.count", self.ring.count);
        kv.set("ring.radius", self.ring.radius);
        kv.set(
            "ring.center",
            format!(
                "{} {} {}",
                self.ring.center.x, self.ring.center.y, self.ring.center.z
            ),
        );
        kv.set(
            "ring.target",
            format!(
                "{} {} {}",
                self.ring.target.x, self.ring.target.y, self.ring.target.z
            ),
        );
        kv.set("depth.min", self.depth_min);
        kv.set("depth.max", self.depth_max);
        kv.set("noise.gain_jitter", self.noise.gain_jitter);
        kv.set("noise.offset_jitter", self.noise.offset_jitter);
        kv.set("noise.sigma", self.noise.sigma);
        kv.set("noise.seed", self.noise.seed);
        let mut planes = 0usize;
        let mut spheres = 0usize;
        for prim in &self.primitives {
            match &prim.shape {
                Shape::Plane(p) => {
                    kv.set(
                        &format!("plane.{planes}"),
                        format!(
                            "{} {} {} {} {} {} {} {} {}",
                            p.center.x,
                            p.center.y,
                            p.center.z,
                            p.normal.x,
                            p.normal.y,
                            p.normal.z,
                            p.half_u,
                            p.half_v,
                            prim.texture_seed
                        ),
                    );
                    planes += 1;
                }
                Shape::Sphere(s) => {
                    kv.set(
                        &format!("sphere.{spheres}"),
                        format!(
                            "{} {} {} {} {}",
                            s.center.x, s.center.y, s.center.z, s.radius, prim.texture_seed
                        ),
                    );
                    spheres += 1;
                }
            }
        }
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let need = |key: &str| -> Result<f64> {
            kv.get_f64(key)?
                .ok_or_else(|| Error::config(format!("missing key '{key}'")))
        };
        let vec3 = |key: &str| -> Result<Vector3<f64>> {
            let v = kv
                .get_f64_list(key)?
                .ok_or_else(|| Error::config(format!("missing key '{key}'")))?;
            if v.len() != 3 {
                return Err(Error::config(format!("key '{key}' needs 3 numbers")));
            }
            Ok(Vector3::new(v[0], v[1], v[2]))
        };
        let mut primitives = Vec::new();
        for i in 0.. {
            let Some(vals) = kv.get_f64_list(&format!("plane.{i}"))? else {
                break;
            };
            if vals.len() != 9 {
                return Err(Error::config(format!("plane.{i} needs 9 numbers")));
            }
            primitives.push(Primitive {
                shape: Shape::Plane(RectPlane::from_normal(
                    Vector3::new(vals[0], vals[1], vals[2]),
                    Vector3::new(vals[3], vals[4], vals[5]),
                    vals[6],
                    vals[7],
                )?),
                texture_seed: vals[8] as u64,
            });
        }
        for i in 0.. {
            let Some(vals) = kv.get_f64_list(&format!("sphere.{i}"))? else {
                break;
            };
            if vals.len() != 5 {
                return Err(Error::config(format!("sphere.{i} needs 5 numbers")));
            }
            primitives.push(Primitive {
                shape: Shape::Sphere(SphereShape {
                    center: Vector3::new(vals[0], vals[1], vals[2]),
                    radius: vals[3],
                }),
                texture_seed: vals[4] as u64,
            });
        }
        let spec = SceneSpec {
            primitives,
            ring: CameraRing {
                count: kv
                    .get_usize("ring.count")?
                    .ok_or_else(|| Error::config("missing key 'ring.count'"))?,
                radius: need("ring.radius")?,
                center: vec3("ring.center")?,
                target: vec3("ring.target")?,
            },
            height: kv
                .get_usize("scene.height")?
                .ok_or_else(|| Error::config("missing key 'scene.height'"))?,
            width: kv
                .get_usize("scene.width")?
                .ok_or_else(|| Error::config("missing key 'scene.width'"))?,
            focal: need("scene.focal")?,
            depth_min: need("depth.min")?,
            depth_max: need("depth.max")?,
            noise: NoiseSpec {
                gain_jitter: kv.get_f64("noise.gain_jitter")?.unwrap_or(0.0),
                offset_jitter: kv.get_f64("noise.offset_jitter")?.unwrap_or(0.0),
                sigma: kv.get_f64("noise.sigma")?.unwrap_or(0.0),
                seed: kv.get_u64("noise.seed")?.unwrap_or(1),
            },
            texture_scale: kv.get_f64("scene.texture_scale")?.unwrap_or(44.0),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::warp_pixel;
    use approx::assert_relative_eq;

    fn fronto_plane_scene(d: f64) -> SceneSpec {
        SceneSpec {
            primitives: vec![Primitive {
                shape: Shape::Plane(
                    RectPlane::from_normal(
                        Vector3::new(0.0, 0.0, d),
                        Vector3::new(0.0, 0.0, -1.0),
                        2000.0,
                        2000.0,
                    )
                    .unwrap(),
                ),
                texture_seed: 3,
            }],
            ring: CameraRing {
                count: 1,
                radius: 0.0,
                center: Vector3::zeros(),
                target: Vector3::new(0.0, 0.0, d),
            },
            height: 64,
            width: 64,
            focal: 80.0,
            depth_min: d * 0.5,
            depth_max: d * 1.5,
            noise: NoiseSpec::default(),
            texture_scale: 44.0,
        }
    }

    #[test]
    fn fronto_plane_has_constant_depth() {
        let d = 500.0;
        let scene = fronto_plane_scene(d);
        let out = render(&scene, 0).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert!(out.depth.valid[(y, x)]);
                assert_relative_eq!(out.depth.depth[(y, x)], d, epsilon = 1e-9 * d);
            }
        }
    }

    #[test]
    fn sphere_center_pixel_depth() {
        let d = 600.0;
        let r = 80.0;
        let mut scene = fronto_plane_scene(900.0);
        scene.primitives.push(Primitive {
            shape: Shape::Sphere(SphereShape {
                center: Vector3::new(0.0, 0.0, d),
                radius: r,
            }),
            texture_seed: 9,
        });
        scene.ring.target = Vector3::new(0.0, 0.0, d);
        let out = render(&scene, 0).unwrap();
        // Principal-point ray hits the sphere head on.
        assert_relative_eq!(out.depth.depth[(32, 32)], d - r, epsilon = 1e-9 * d);
    }

    #[test]
    fn renders_are_bit_identical() {
        let scene = SceneSpec::occluded(4, 0.1, 0.02);
        let a = render(&scene, 2).unwrap();
        let b = render(&scene, 2).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth.depth, b.depth.depth);
    }

    #[test]
    fn camera_inside_sphere_is_error() {
        let mut scene = SceneSpec::three_planes(1);
        scene.primitives.push(Primitive {
            shape: Shape::Sphere(SphereShape {
                center: Vector3::new(60.0, 0.0, 0.0),
                radius: 10.0,
            }),
            texture_seed: 1,
        });
        assert!(render(&scene, 0).is_err());
    }

    #[test]
    fn single_plane_visible_from_all_views() {
        let scene = SceneSpec::plane_wall(2);
        let vis = gt_visibility(&scene, 0, 3).unwrap();
        let total = vis.len();
        let seen = vis.iter().filter(|&&v| v).count();
        // The wall fills every frustum; only reprojection out-of-bounds at
        // image borders can drop pixels.
        assert!(seen as f64 >= 0.9 * total as f64, "{seen}/{total}");
    }

    #[test]
    fn ref_equals_src_visibility_is_identity() {
        let scene = SceneSpec::three_planes(3);
        let vis = gt_visibility(&scene, 1, 1).unwrap();
        let out = render(&scene, 1).unwrap();
        for y in 0..scene.height {
            for x in 0..scene.width {
                assert_eq!(vis[(y, x)], out.depth.valid[(y, x)]);
            }
        }
    }

    #[test]
    fn occluder_hides_backdrop_pixels() {
        let scene = SceneSpec::occluded(5, 0.0, 0.0);
        // Some pixels must be visible in the reference but occluded in a
        // source view.
        let vis_self = gt_visibility(&scene, 0, 0).unwrap();
        let vis_other = gt_visibility(&scene, 0, 2).unwrap();
        let hidden = vis_self
            .iter()
            .zip(vis_other.iter())
            .filter(|(&a, &b)| a && !b)
            .count();
        assert!(
            hidden > 100,
            "expected occlusion, got {hidden} hidden pixels"
        );
    }

    #[test]
    fn warped_gt_depth_matches_source_gt_depth() {
        let scene = SceneSpec::three_planes(7);
        let ref_out = render(&scene, 0).unwrap();
        let src_cam = scene.camera(2).unwrap();
        let vis = gt_visibility(&scene, 0, 2).unwrap();
        let mut checked = 0usize;
        let mut consistent = 0usize;
        for y in (0..scene.height).step_by(3) {
            for x in (0..scene.width).step_by(3) {
                if !vis[(y, x)] {
                    continue;
                }
                let d = ref_out.depth.depth[(y, x)];
                let s = warp_pixel(
                    &ref_out.camera,
                    &src_cam,
                    Vector2::new(x as f64, y as f64),
                    d,
                );
                if !s.valid {
                    continue;
                }
                checked += 1;
                let src_gt = cast_depth(&scene, &src_cam, s.coord).unwrap();
                if (src_gt - s.src_depth).abs() <= 1e-6 * src_gt {
                    consistent += 1;
                }
            }
        }
        assert!(checked > 1000);
        assert!(
            consistent as f64 >= 0.999 * checked as f64,
            "{consistent}/{checked}"
        );
    }

    #[test]
    fn scene_spec_kv_round_trip() {
        let scene = SceneSpec::occluded(11, 0.1, 0.02);
        let kv = scene.to_kv();
        let text = kv.serialize();
        let parsed = SceneSpec::from_kv(&KvMap::parse(&text, "mem").unwrap()).unwrap();
        assert_eq!(scene, parsed);
    }
}
