//! Procedural paired camera/LiDAR street scenes with exact per-pixel and
//! per-point labels.
//!
//! Both sensors share one optical centre and both are ray cast against the
//! same primitives, so a LiDAR return and the camera ray through its pixel
//! see the same surface unless the return sits within half a pixel of an
//! object boundary.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::canonical_hash;
use crate::error::{ensure, Error, Result};
use crate::geometry::CameraModel;
use crate::tensor::Tensor;

/// Label written for pixels whose ray leaves the scene.
pub const BACKGROUND: i32 = -1;

pub const COARSE_CLASSES: [&str; 8] = [
    "ground",
    "building",
    "vehicle",
    "pole",
    "vegetation",
    "barrier",
    "pedestrian",
    "noise",
];

pub const REFINED_CLASSES: [&str; 10] = [
    "ground",
    "building",
    "vehicle",
    "pole",
    "vegetation",
    "barrier",
    "adult",
    "worker",
    "debris",
    "pushable",
];

/// Refined classes that split a coarse class.
pub const NEW_REFINED_CLASSES: [usize; 4] = [6, 7, 8, 9];

/// Coarse id of a refined id.
pub fn coarse_of(refined: i32) -> i32 {
    match refined {
        6 | 7 => 6,
        8 | 9 => 7,
        c => c,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

/// Everything that shapes a generated scene except its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Radius of the ground disk in meters; nothing exists beyond it.
    pub extent: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub horizontal_fov_deg: f64,
    pub sensor_height: f64,
    pub camera_pitch_deg: f64,
    pub lidar_azimuth_steps: usize,
    pub lidar_elevation_steps: usize,
    pub lidar_elevation_min_deg: f64,
    pub lidar_elevation_max_deg: f64,
    pub range_jitter: f64,
    pub intensity_noise: f64,
    pub shading_amplitude: f64,
    pub pixel_noise: f64,
    /// Share of objects placed inside the camera's horizontal field of view.
    pub in_view_fraction: f64,
    pub buildings: CountRange,
    pub vehicles: CountRange,
    pub poles: CountRange,
    pub vegetation: CountRange,
    pub barriers: CountRange,
    pub pedestrians: CountRange,
    pub clutter: CountRange,
    pub refined_labels: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent: 40.0,
            image_height: 256,
            image_width: 384,
            horizontal_fov_deg: 60.0,
            sensor_height: 1.7,
            camera_pitch_deg: 5.0,
            lidar_azimuth_steps: 360,
            lidar_elevation_steps: 16,
            lidar_elevation_min_deg: -20.0,
            lidar_elevation_max_deg: 4.0,
            range_jitter: 0.02,
            intensity_noise: 0.04,
            shading_amplitude: 0.6,
            pixel_noise: 0.02,
            in_view_fraction: 0.5,
            buildings: CountRange::new(2, 5),
            vehicles: CountRange::new(3, 7),
            poles: CountRange::new(3, 8),
            vegetation: CountRange::new(2, 6),
            barriers: CountRange::new(2, 5),
            pedestrians: CountRange::new(3, 8),
            clutter: CountRange::new(3, 8),
            refined_labels: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.extent > 0.0, Config, "scene extent must be positive");
        ensure!(
            self.image_height > 0 && self.image_width > 0,
            Config,
            "image size must be positive"
        );
        ensure!(
            self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0,
            Config,
            "horizontal field of view must be in (0, 180)"
        );
        ensure!(self.sensor_height > 0.0, Config, "sensor height must be positive");
        ensure!(
            self.lidar_azimuth_steps > 0 && self.lidar_elevation_steps > 0,
            Config,
            "LiDAR pattern must be non-empty"
        );
        ensure!(
            self.lidar_elevation_min_deg < self.lidar_elevation_max_deg,
            Config,
            "LiDAR elevation range is empty"
        );
        ensure!(
            self.range_jitter >= 0.0 && self.pixel_noise >= 0.0 && self.intensity_noise >= 0.0,
            Config,
            "noise levels must be non-negative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.in_view_fraction),
            Config,
            "in_view_fraction must be in [0, 1]"
        );
        for (name, r) in self.counts() {
            ensure!(r.min <= r.max, Config, "{} count range is inverted", name);
        }
        Ok(())
    }

    fn counts(&self) -> [(&'static str, CountRange); 7] {
        [
            ("buildings", self.buildings),
            ("vehicles", self.vehicles),
            ("poles", self.poles),
            ("vegetation", self.vegetation),
            ("barriers", self.barriers),
            ("pedestrians", self.pedestrians),
            ("clutter", self.clutter),
        ]
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    /// The camera rig: centred on the LiDAR, facing +x, pitched down.
    pub fn camera(&self) -> CameraModel {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        let f = 0.5 * w / (0.5 * self.horizontal_fov_deg.to_radians()).tan();
        let p = self.camera_pitch_deg.to_radians();
        let right = [0.0, -1.0, 0.0];
        let down = [-p.sin(), 0.0, -p.cos()];
        let fwd = [p.cos(), 0.0, -p.sin()];
        let c = [0.0, 0.0, self.sensor_height];
        let mut e = [[0.0; 4]; 4];
        for (i, axis) in [right, down, fwd].iter().enumerate() {
            e[i][..3].copy_from_slice(axis);
            e[i][3] = -(axis[0] * c[0] + axis[1] * c[1] + axis[2] * c[2]);
        }
        e[3][3] = 1.0;
        CameraModel::pinhole(f, f, (w - 1.0) / 2.0, (h - 1.0) / 2.0, e, self.image_width, self.image_height)
            .expect("rig rotation is orthonormal")
    }
}

/// Geometric primitive in world coordinates (z up).
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Infinite plane `z = 0` clipped to a disk of `radius` around the origin.
    Ground { radius: f64 },
    /// Box resting on `z = base`, rotated by `yaw` about its vertical axis.
    Box {
        center: [f64; 2],
        base: f64,
        half: [f64; 3],
        yaw: f64,
    },
    /// Vertical cylinder from `z0` to `z1`.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z0: f64,
        z1: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
}

/// Ray parameter and unit surface normal of a hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: [f64; 3],
}

const EPS: f64 = 1e-9;

impl Shape {
    /// Nearest intersection with `t > 0`; `dir` must be unit length.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        match *self {
            Shape::Ground { radius } => {
                if dir[2].abs() < EPS {
                    return None;
                }
                let t = -origin[2] / dir[2];
                if t <= EPS {
                    return None;
                }
                let (x, y) = (origin[0] + t * dir[0], origin[1] + t * dir[1]);
                (x * x + y * y <= radius * radius).then_some(Hit {
                    t,
                    normal: [0.0, 0.0, if origin[2] >= 0.0 { 1.0 } else { -1.0 }],
                })
            }
            Shape::Sphere { center, radius } => {
                let oc = [origin[0] - center[0], origin[1] - center[1], origin[2] - center[2]];
                let b = dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [-b - sq, -b + sq].into_iter().find(|&t| t > EPS)?;
                let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                let n = [(p[0] - center[0]) / radius, (p[1] - center[1]) / radius, (p[2] - center[2]) / radius];
                Some(Hit { t, normal: n })
            }
            Shape::Box {
                center,
                base,
                half,
                yaw,
            } => {
                let (s, c) = yaw.sin_cos();
                let lo = [origin[0] - center[0], origin[1] - center[1], origin[2] - (base + half[2])];
                // world -> local rotates by -yaw
                let o = [c * lo[0] + s * lo[1], -s * lo[0] + c * lo[1], lo[2]];
                let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
                let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis_in, mut axis_out) = (0usize, 0usize);
                for a in 0..3 {
                    if d[a].abs() < EPS {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half[a] - o[a]) / d[a];
                    let t2 = (half[a] - o[a]) / d[a];
                    let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if near > tmin {
                        tmin = near;
                        axis_in = a;
                    }
                    if far < tmax {
                        tmax = far;
                        axis_out = a;
                    }
                }
                if tmin > tmax || tmax <= EPS {
                    return None;
                }
                let (t, axis, sign) = if tmin > EPS {
                    (tmin, axis_in, -d[axis_in].signum())
                } else {
                    (tmax, axis_out, d[axis_out].signum())
                };
                let mut nl = [0.0; 3];
                nl[axis] = sign;
                let normal = [c * nl[0] - s * nl[1], s * nl[0] + c * nl[1], nl[2]];
                Some(Hit { t, normal })
            }
            Shape::Cylinder {
                center,
                radius,
                z0,
                z1,
            } => {
                let mut best: Option<Hit> = None;
                let mut consider = |h: Hit| {
                    if h.t > EPS && best.is_none_or(|b| h.t < b.t) {
                        best = Some(h);
                    }
                };
                let (ox, oy) = (origin[0] - center[0], origin[1] - center[1]);
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                if a > EPS {
                    let b = ox * dir[0] + oy * dir[1];
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let z = origin[2] + t * dir[2];
                            if z >= z0 && z <= z1 {
                                let (px, py) = (ox + t * dir[0], oy + t * dir[1]);
                                consider(Hit {
                                    t,
                                    normal: [px / radius, py / radius, 0.0],
                                });
                            }
                        }
                    }
                }
                if dir[2].abs() > EPS {
                    for (zc, nz) in [(z0, -1.0), (z1, 1.0)] {
                        let t = (zc - origin[2]) / dir[2];
                        let (px, py) = (ox + t * dir[0], oy + t * dir[1]);
                        if px * px + py * py <= radius * radius {
                            consider(Hit {
                                t,
                                normal: [0.0, 0.0, nz],
                            });
                        }
                    }
                }
                best
            }
        }
    }

    /// Whether `p` lies inside or on the primitive.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ground { radius } => p[2].abs() < 1e-9 && p[0] * p[0] + p[1] * p[1] <= radius * radius,
            Shape::Sphere { center, radius } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                dot(d, d) <= radius * radius
            }
            Shape::Box {
                center,
                base,
                half,
                yaw,
            } => {
                let (s, c) = yaw.sin_cos();
                let l = [p[0] - center[0], p[1] - center[1], p[2] - (base + half[2])];
                let q = [c * l[0] + s * l[1], -s * l[0] + c * l[1], l[2]];
                (0..3).all(|a| q[a].abs() <= half[a])
            }
            Shape::Cylinder {
                center,
                radius,
                z0,
                z1,
            } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                dx * dx + dy * dy <= radius * radius && p[2] >= z0 && p[2] <= z1
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// A primitive with its refined class and materials.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Refined class id in `0..10`.
    pub class: i32,
    pub albedo: [f64; 3],
    pub reflectivity: f64,
}

/// Primitives plus the light used for image shading.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub light: [f64; 3],
    pub sky: [f64; 3],
}

impl Scene {
    /// Nearest primitive hit along a ray.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(usize, Hit)> {
        let mut best: Option<(usize, Hit)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(h) = p.shape.intersect(origin, dir) {
                if best.is_none_or(|(_, b)| h.t < b.t) {
                    best = Some((i, h));
                }
            }
        }
        best
    }
}

fn base_albedo(class: i32) -> [f64; 3] {
    match class {
        0 => [0.30, 0.30, 0.28],
        1 => [0.62, 0.46, 0.36],
        2 => [0.16, 0.24, 0.62],
        3 => [0.08, 0.08, 0.09],
        4 => [0.14, 0.50, 0.12],
        5 => [0.92, 0.48, 0.10],
        6 => [0.56, 0.18, 0.26],
        7 => [0.92, 0.88, 0.10],
        8 => [0.42, 0.30, 0.14],
        _ => [0.18, 0.62, 0.62],
    }
}

fn base_reflectivity(class: i32) -> f64 {
    [0.15, 0.35, 0.70, 0.50, 0.25, 0.80, 0.30, 0.92, 0.20, 0.55][class as usize]
}

/// Places primitives for one scene.
pub fn build_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let mut prims = Vec::new();
    let mut add = |shape: Shape, class: i32, rng: &mut ChaCha8Rng| {
        let b = base_albedo(class);
        let albedo = b.map(|v| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
        prims.push(Primitive {
            shape,
            class,
            albedo,
            reflectivity: base_reflectivity(class),
        });
    };
    add(Shape::Ground { radius: spec.extent }, 0, rng);

    let half_fov = 0.5 * spec.horizontal_fov_deg.to_radians() * 0.95;
    let place = |rng: &mut ChaCha8Rng, r0: f64, r1: f64| -> [f64; 2] {
        let az = if rng.random_bool(spec.in_view_fraction) {
            rng.random_range(-half_fov..half_fov)
        } else {
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
        };
        let r = rng.random_range(r0..r1).min(spec.extent * 0.95);
        [r * az.cos(), r * az.sin()]
    };
    let count = |rng: &mut ChaCha8Rng, c: CountRange| rng.random_range(c.min..=c.max);

    for _ in 0..count(rng, spec.buildings) {
        let c = place(rng, 16.0, 30.0);
        let half = [rng.random_range(2.0..5.0), rng.random_range(2.0..5.0), rng.random_range(2.5..6.0)];
        let yaw = c[1].atan2(c[0]) + rng.random_range(-0.3..0.3);
        add(Shape::Box { center: c, base: 0.0, half, yaw }, 1, rng);
    }
    for _ in 0..count(rng, spec.vehicles) {
        let c = place(rng, 5.0, 20.0);
        let half = [rng.random_range(1.8..2.4), rng.random_range(0.8..1.0), rng.random_range(0.65..0.9)];
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        add(Shape::Box { center: c, base: 0.0, half, yaw }, 2, rng);
    }
    for _ in 0..count(rng, spec.poles) {
        let c = place(rng, 4.0, 18.0);
        let radius = rng.random_range(0.12..0.2);
        let z1 = rng.random_range(3.5..6.0);
        add(Shape::Cylinder { center: c, radius, z0: 0.0, z1 }, 3, rng);
    }
    for _ in 0..count(rng, spec.vegetation) {
        let c = place(rng, 6.0, 22.0);
        let radius = rng.random_range(1.0..2.0);
        let z = rng.random_range(radius * 0.8..radius * 1.6);
        add(Shape::Sphere { center: [c[0], c[1], z], radius }, 4, rng);
    }
    for _ in 0..count(rng, spec.barriers) {
        let c = place(rng, 4.0, 15.0);
        let half = [rng.random_range(1.0..2.0), 0.2, rng.random_range(0.4..0.55)];
        let yaw = rng.random_range(0.0..std::f64::consts::PI);
        add(Shape::Box { center: c, base: 0.0, half, yaw }, 5, rng);
    }
    for _ in 0..count(rng, spec.pedestrians) {
        let c = place(rng, 3.5, 14.0);
        let worker = rng.random_bool(0.5);
        let radius = rng.random_range(0.25..0.35);
        let z1 = if worker {
            rng.random_range(1.75..1.95)
        } else {
            rng.random_range(1.5..1.8)
        };
        add(Shape::Cylinder { center: c, radius, z0: 0.0, z1 }, if worker { 7 } else { 6 }, rng);
    }
    for _ in 0..count(rng, spec.clutter) {
        let c = place(rng, 3.5, 14.0);
        if rng.random_bool(0.5) {
            let radius = rng.random_range(0.3..0.5);
            add(Shape::Sphere { center: [c[0], c[1], radius * 0.5], radius }, 8, rng);
        } else {
            let half = [rng.random_range(0.3..0.45), rng.random_range(0.3..0.45), rng.random_range(0.45..0.6)];
            let yaw = rng.random_range(0.0..std::f64::consts::PI);
            add(Shape::Box { center: c, base: 0.0, half, yaw }, 9, rng);
        }
    }

    let la = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let le: f64 = rng.random_range(0.5..1.2);
    let light = [le.cos() * la.cos(), le.cos() * la.sin(), le.sin()];
    let sky = [
        rng.random_range(0.55..0.7),
        rng.random_range(0.7..0.8),
        rng.random_range(0.85..0.95),
    ];
    Scene {
        primitives: prims,
        light,
        sky,
    }
}

/// One LiDAR return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub intensity: f64,
    /// Refined class id.
    pub class: i32,
}

/// Casts the spinning pattern from `(0, 0, sensor_height)`; misses produce no point.
pub fn raycast_lidar(scene: &Scene, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<LidarPoint> {
    let origin = [0.0, 0.0, spec.sensor_height];
    let jitter = Normal::new(0.0, spec.range_jitter.max(1e-300)).expect("finite sigma");
    let inoise = Normal::new(0.0, spec.intensity_noise.max(1e-300)).expect("finite sigma");
    let az_step = 2.0 * std::f64::consts::PI / spec.lidar_azimuth_steps as f64;
    let az0 = rng.random_range(0.0..az_step);
    let (e0, e1) = (
        spec.lidar_elevation_min_deg.to_radians(),
        spec.lidar_elevation_max_deg.to_radians(),
    );
    let ne = spec.lidar_elevation_steps;
    let mut out = Vec::new();
    for ei in 0..ne {
        let el = if ne == 1 {
            e0
        } else {
            e0 + (e1 - e0) * ei as f64 / (ne - 1) as f64
        };
        for ai in 0..spec.lidar_azimuth_steps {
            let az = az0 + ai as f64 * az_step;
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some((idx, hit)) = scene.trace(origin, dir) else {
                continue;
            };
            let prim = &scene.primitives[idx];
            let r = hit.t + if spec.range_jitter > 0.0 { jitter.sample(rng) } else { 0.0 };
            let incidence = (-dot(dir, hit.normal)).abs();
            let noise = if spec.intensity_noise > 0.0 { inoise.sample(rng) } else { 0.0 };
            let intensity = (prim.reflectivity * (0.7 + 0.3 * incidence) + noise).clamp(0.0, 1.0);
            out.push(LidarPoint {
                position: [origin[0] + r * dir[0], origin[1] + r * dir[1], origin[2] + r * dir[2]],
                intensity,
                class: prim.class,
            });
        }
    }
    out
}

/// Rendered image with labels and depth along the optical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    /// `3 x h x w`, linear RGB in `[0, 1]`.
    pub image: Vec<f64>,
    /// Refined labels, [`BACKGROUND`] where the ray escapes.
    pub labels: Vec<i32>,
    /// Camera-frame depth, infinite where the ray escapes.
    pub depth: Vec<f64>,
}

/// Ray casts the ray through every pixel centre.
pub fn render_camera(scene: &Scene, cam: &CameraModel, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Rendering {
    let (h, w) = (cam.height, cam.width);
    let e = &cam.extrinsics;
    // camera centre = -R^T t
    let mut origin = [0.0; 3];
    for (j, o) in origin.iter_mut().enumerate() {
        *o = -(0..3).map(|i| e[i][j] * e[i][3]).sum::<f64>();
    }
    let noise = Normal::new(0.0, spec.pixel_noise.max(1e-300)).expect("finite sigma");
    let mut out = Rendering {
        image: vec![0.0; 3 * h * w],
        labels: vec![BACKGROUND; h * w],
        depth: vec![f64::INFINITY; h * w],
    };
    let ambient = 1.0 - spec.shading_amplitude;
    for v in 0..h {
        for u in 0..w {
            let dc = [(u as f64 - cam.cx()) / cam.fx(), (v as f64 - cam.cy()) / cam.fy(), 1.0];
            let norm = dot(dc, dc).sqrt();
            let mut dir = [0.0; 3];
            for (j, d) in dir.iter_mut().enumerate() {
                *d = (0..3).map(|i| e[i][j] * dc[i]).sum::<f64>() / norm;
            }
            let p = v * w + u;
            let color = match scene.trace(origin, dir) {
                Some((idx, hit)) => {
                    let prim = &scene.primitives[idx];
                    out.labels[p] = prim.class;
                    out.depth[p] = hit.t / norm;
                    let lambert = dot(hit.normal, scene.light).max(0.0);
                    let shade = ambient + spec.shading_amplitude * lambert;
                    prim.albedo.map(|a| a * shade)
                }
                None => scene.sky,
            };
            for (ch, c) in color.iter().enumerate() {
                let n = if spec.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                out.image[ch * h * w + p] = (c + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// A generated camera/LiDAR pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub seed: u64,
    /// `3 x h x w`.
    pub image: Tensor<f32>,
    /// `n x 4`: `x, y, z, intensity`.
    pub cloud: Tensor<f32>,
    pub labels_px: Vec<i32>,
    pub labels_pt: Vec<i32>,
    pub labels_px_refined: Vec<i32>,
    pub labels_pt_refined: Vec<i32>,
    pub camera: CameraModel,
}

impl PairedSample {
    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn num_points(&self) -> usize {
        self.labels_pt.len()
    }

    /// Point labels under either label set.
    pub fn point_labels(&self, refined: bool) -> &[i32] {
        if refined {
            &self.labels_pt_refined
        } else {
            &self.labels_pt
        }
    }

    pub fn pixel_labels(&self, refined: bool) -> &[i32] {
        if refined {
            &self.labels_px_refined
        } else {
            &self.labels_px
        }
    }
}

fn majority(labels: impl Iterator<Item = i32>) -> i32 {
    let mut counts: Vec<(i32, usize)> = Vec::new();
    for l in labels {
        match counts.iter_mut().find(|(k, _)| *k == l) {
            Some((_, n)) => *n += 1,
            None => counts.push((l, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counts[0].0
}

fn downscale_labels(labels: &[i32], h: usize, w: usize, f: usize) -> Vec<i32> {
    let (ho, wo) = (h / f, w / f);
    let mut out = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        for x in 0..wo {
            out.push(majority(
                (0..f).flat_map(|dy| (0..f).map(move |dx| labels[(y * f + dy) * w + x * f + dx])),
            ));
        }
    }
    out
}

impl PairedSample {
    /// The sample as seen by a camera `factor` times coarser: block-averaged
    /// image, block-majority pixel labels (ties to the lower id), scaled
    /// intrinsics. The cloud is unchanged.
    pub fn downscaled(&self, factor: usize) -> Result<PairedSample> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let camera = self.camera.downscaled(factor)?;
        let (h, w) = (self.height(), self.width());
        let (ho, wo) = (camera.height, camera.width);
        let inv = 1.0 / (factor * factor) as f32;
        let src = self.image.data();
        let mut img = vec![0.0f32; 3 * ho * wo];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img[c * ho * wo + (y / factor) * wo + x / factor] += src[c * h * w + y * w + x] * inv;
                }
            }
        }
        Ok(PairedSample {
            seed: self.seed,
            image: Tensor::new(vec![3, ho, wo], img)?,
            cloud: self.cloud.clone(),
            labels_px: downscale_labels(&self.labels_px, h, w, factor),
            labels_pt: self.labels_pt.clone(),
            labels_px_refined: downscale_labels(&self.labels_px_refined, h, w, factor),
            labels_pt_refined: self.labels_pt_refined.clone(),
            camera,
        })
    }
}

/// Generates the sample for `seed`. Pure in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PairedSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = build_scene(spec, &mut rng);
    let cam = spec.camera();
    let points = raycast_lidar(&scene, spec, &mut rng);
    let render = render_camera(&scene, &cam, spec, &mut rng);
    let mut cloud = Vec::with_capacity(points.len() * 4);
    for p in &points {
        cloud.extend([p.position[0] as f32, p.position[1] as f32, p.position[2] as f32, p.intensity as f32]);
    }
    let labels_pt_refined: Vec<i32> = points.iter().map(|p| p.class).collect();
    let coarse = |l: &i32| if *l == BACKGROUND { BACKGROUND } else { coarse_of(*l) };
    Ok(PairedSample {
        seed,
        image: Tensor::new(
            vec![3, cam.height, cam.width],
            render.image.iter().map(|&v| v as f32).collect(),
        )?,
        cloud: Tensor::new(vec![points.len(), 4], cloud)?,
        labels_pt: labels_pt_refined.iter().map(coarse).collect(),
        labels_px: render.labels.iter().map(coarse).collect(),
        labels_pt_refined,
        labels_px_refined: render.labels,
        camera: cam,
    })
}

/// Which split a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
    pub points: usize,
}

/// Dataset index written next to the samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub spec_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    spec_hash: String,
    points: usize,
    height: usize,
    width: usize,
    version: String,
}

/// Seed of sample `index` in a dataset generated with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Generates `train + val` samples in memory; rayon-parallel per scene.
pub fn generate_dataset(spec: &SceneSpec, seed: u64, train: usize, val: usize) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    use rayon::prelude::*;
    let all: Vec<PairedSample> = (0..train + val)
        .into_par_iter()
        .map(|i| generate_scene(spec, sample_seed(seed, i)))
        .collect::<Result<_>>()?;
    let mut all = all;
    let val_set = all.split_off(train);
    Ok((all, val_set))
}

pub(crate) fn write_f32(path: &Path, data: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = data.flat_map(f32::to_le_bytes).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_i32(path: &Path, data: &[i32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(bytes.len() % 4 == 0, Data, "{} is not a float32 array", path.display());
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_i32(path: &Path) -> Result<Vec<i32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(bytes.len() % 4 == 0, Data, "{} is not an int32 array", path.display());
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes one sample directory.
pub fn write_sample(sample: &PairedSample, dir: &Path, spec: &SceneSpec, refined: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_f32(&dir.join("cloud.f32"), sample.cloud.data().iter().copied())?;
    write_f32(&dir.join("image.f32"), sample.image.data().iter().copied())?;
    write_i32(&dir.join("labels_pt.i32"), &sample.labels_pt)?;
    write_i32(&dir.join("labels_px.i32"), &sample.labels_px)?;
    if refined {
        write_i32(&dir.join("labels_pt_refined.i32"), &sample.labels_pt_refined)?;
        write_i32(&dir.join("labels_px_refined.i32"), &sample.labels_px_refined)?;
    }
    sample.camera.to_json_file(&dir.join("calib.json"))?;
    let meta = SampleMeta {
        seed: sample.seed,
        spec_hash: spec.hash(),
        points: sample.num_points(),
        height: sample.height(),
        width: sample.width(),
        version: crate::VERSION.to_string(),
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

/// Reads one sample directory. Missing refined label files fall back to the
/// coarse labels.
pub fn read_sample(dir: &Path) -> Result<PairedSample> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact {
            path: meta_path,
            hint: "generate the dataset with `xmd scenegen`".into(),
        });
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text)?;
    let camera = CameraModel::from_json_file(&dir.join("calib.json"))?;
    let cloud = read_f32(&dir.join("cloud.f32"))?;
    let image = read_f32(&dir.join("image.f32"))?;
    let labels_pt = read_i32(&dir.join("labels_pt.i32"))?;
    let labels_px = read_i32(&dir.join("labels_px.i32"))?;
    let refined_pt = dir.join("labels_pt_refined.i32");
    let (labels_pt_refined, labels_px_refined) = if refined_pt.exists() {
        (read_i32(&refined_pt)?, read_i32(&dir.join("labels_px_refined.i32"))?)
    } else {
        (labels_pt.clone(), labels_px.clone())
    };
    let n = meta.points;
    ensure!(
        cloud.len() == n * 4 && labels_pt.len() == n && labels_pt_refined.len() == n,
        Data,
        "{}: point arrays disagree with meta.json",
        dir.display()
    );
    let hw = meta.height * meta.width;
    ensure!(
        image.len() == 3 * hw && labels_px.len() == hw && labels_px_refined.len() == hw,
        Data,
        "{}: image arrays disagree with meta.json",
        dir.display()
    );
    ensure!(
        camera.height == meta.height && camera.width == meta.width,
        Data,
        "{}: calibration size disagrees with meta.json",
        dir.display()
    );
    Ok(PairedSample {
        seed: meta.seed,
        image: Tensor::new(vec![3, meta.height, meta.width], image)?,
        cloud: Tensor::new(vec![n, 4], cloud)?,
        labels_px,
        labels_pt,
        labels_px_refined,
        labels_pt_refined,
        camera,
    })
}

/// Writes a dataset directory with a manifest.
pub fn write_dataset(
    dir: &Path,
    spec: &SceneSpec,
    seed: u64,
    config_hash: &str,
    train: &[PairedSample],
    val: &[PairedSample],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::new();
    for (split, set) in [(Split::Train, train), (Split::Val, val)] {
        for s in set {
            let name = format!("sample_{:05}", samples.len());
            write_sample(s, &dir.join(&name), spec, spec.refined_labels)?;
            samples.push(ManifestEntry {
                name,
                seed: s.seed,
                split,
                points: s.num_points(),
            });
        }
    }
    let manifest = Manifest {
        version: crate::VERSION.to_string(),
        spec_hash: spec.hash(),
        config_hash: config_hash.to_string(),
        seed,
        spec: spec.clone(),
        samples,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loaded dataset split into train and val.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "generate the dataset with `xmd scenegen`".into(),
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for entry in &manifest.samples {
        let s = read_sample(&dir.join(&entry.name))?;
        match entry.split {
            Split::Train => train.push(s),
            Split::Val => val.push(s),
        }
    }
    Ok(Dataset { manifest, train, val })
}
