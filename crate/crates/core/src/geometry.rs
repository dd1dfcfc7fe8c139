//! Pinhole projection of LiDAR points into the camera and nearest-pixel
//! feature sampling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

/// Points closer than this to the focal plane are never valid.
pub const Z_MIN: f64 = 1e-3;

/// Ideal pinhole camera with a world-to-camera rigid transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibJson", into = "CalibJson")]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize, Deserialize)]
struct CalibJson {
    intrinsics: Vec<f64>,
    extrinsics: Vec<f64>,
    width: usize,
    height: usize,
}

impl TryFrom<CalibJson> for CameraModel {
    type Error = Error;

    fn try_from(c: CalibJson) -> Result<Self> {
        ensure!(
            c.intrinsics.len() == 9 && c.extrinsics.len() == 16,
            Data,
            "calibration needs 9 intrinsics and 16 extrinsics, got {} and {}",
            c.intrinsics.len(),
            c.extrinsics.len()
        );
        let mut k = [[0.0; 3]; 3];
        let mut e = [[0.0; 4]; 4];
        for (i, v) in c.intrinsics.iter().enumerate() {
            k[i / 3][i % 3] = *v;
        }
        for (i, v) in c.extrinsics.iter().enumerate() {
            e[i / 4][i % 4] = *v;
        }
        CameraModel::new(k, e, c.width, c.height)
    }
}

impl From<CameraModel> for CalibJson {
    fn from(c: CameraModel) -> Self {
        CalibJson {
            intrinsics: c.intrinsics.iter().flatten().copied().collect(),
            extrinsics: c.extrinsics.iter().flatten().copied().collect(),
            width: c.width,
            height: c.height,
        }
    }
}

impl CameraModel {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            extrinsics,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with focal lengths `fx, fy` and principal point `cx, cy`.
    pub fn pinhole(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsics: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        Self::new(
            [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            extrinsics,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (fx, fy) = (self.fx(), self.fy());
        ensure!(
            fx > 0.0 && fy > 0.0,
            Data,
            "focal lengths must be positive, got {} and {}",
            fx,
            fy
        );
        ensure!(
            self.width > 0 && self.height > 0,
            Data,
            "image size must be positive"
        );
        let r = |i: usize, j: usize| self.extrinsics[i][j];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r(i, k) * r(j, k)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                ensure!(
                    (dot - want).abs() <= 1e-9,
                    Data,
                    "extrinsic rotation is not orthonormal"
                );
            }
        }
        let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1))
            - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
            + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        ensure!(
            (det - 1.0).abs() <= 1e-9,
            Data,
            "extrinsic rotation has determinant {}",
            det
        );
        ensure!(
            self.extrinsics[3] == [0.0, 0.0, 0.0, 1.0],
            Data,
            "extrinsics bottom row must be 0 0 0 1"
        );
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    /// Camera-frame point to continuous pixel coordinates.
    pub fn camera_to_pixel(&self, c: [f64; 3]) -> [f64; 2] {
        [
            self.fx() * c[0] / c[2] + self.cx(),
            self.fy() * c[1] / c[2] + self.cy(),
        ]
    }

    /// Nearest pixel under round-half-up, clamped into the image.
    pub fn nearest_pixel(&self, uv: [f64; 2]) -> (usize, usize) {
        let snap = |x: f64, n: usize| ((x + 0.5).floor().max(0.0) as usize).min(n - 1);
        (snap(uv[0], self.width), snap(uv[1], self.height))
    }

    /// The same camera sampled on a grid `factor` times coarser in each axis.
    /// Pixel centres stay at integer coordinates of the coarse grid.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        ensure!(factor >= 1, Argument, "downscale factor must be positive");
        ensure!(
            self.width % factor == 0 && self.height % factor == 0,
            Argument,
            "{}x{} is not divisible by {}",
            self.height,
            self.width,
            factor
        );
        let f = factor as f64;
        let mut k = self.intrinsics;
        k[0][0] /= f;
        k[1][1] /= f;
        k[0][2] = (k[0][2] + 0.5) / f - 0.5;
        k[1][2] = (k[1][2] + 0.5) / f - 0.5;
        Self::new(k, self.extrinsics, self.width / factor, self.height / factor)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-point projection results.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub width: usize,
    pub height: usize,
}

impl CorrespondenceMap {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Flat `v * width + u` nearest-pixel index of each valid point.
    pub fn pixel_index(&self, i: usize) -> Option<usize> {
        if !self.valid[i] {
            return None;
        }
        let snap = |x: f64, n: usize| ((x + 0.5).floor().max(0.0) as usize).min(n - 1);
        let [u, v] = self.uv[i];
        Some(snap(v, self.height) * self.width + snap(u, self.width))
    }
}

/// Projects an `n x d` cloud (first three columns `x, y, z`) into the camera.
pub fn project<T: Real>(points: &Tensor<T>, cam: &CameraModel) -> Result<CorrespondenceMap> {
    let (n, d) = points.dims2()?;
    ensure!(d >= 3, Shape, "points need x, y, z columns, got {}", d);
    let mut corr = CorrespondenceMap {
        uv: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
        width: cam.width,
        height: cam.height,
    };
    for p in points.data().chunks(d) {
        let c = cam.to_camera([p[0].as_f64(), p[1].as_f64(), p[2].as_f64()]);
        let (uv, ok) = if c[2] > Z_MIN {
            let uv = cam.camera_to_pixel(c);
            let inside = uv[0] >= 0.0
                && uv[0] < cam.width as f64
                && uv[1] >= 0.0
                && uv[1] < cam.height as f64;
            (uv, inside)
        } else {
            ([f64::NAN, f64::NAN], false)
        };
        corr.uv.push(uv);
        corr.depth.push(c[2]);
        corr.valid.push(ok);
    }
    Ok(corr)
}

/// Indices of points visible to both sensors.
pub fn joint_visible_mask(corr: &CorrespondenceMap) -> Vec<usize> {
    corr.valid
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect()
}

/// Nearest-pixel image features for every point (`n x c`, zero rows where
/// invalid) plus the validity mask.
pub fn sample_image_features<T: Real>(
    features: &Tensor<T>,
    corr: &CorrespondenceMap,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (c, h, w) = features.dims3()?;
    ensure!(
        h == corr.height && w == corr.width,
        Shape,
        "feature map is {}x{}, correspondences target {}x{}",
        h,
        w,
        corr.height,
        corr.width
    );
    let hw = h * w;
    let mut out = vec![T::zero(); corr.len() * c];
    for (i, row) in out.chunks_mut(c.max(1)).enumerate().take(corr.len()) {
        if let Some(px) = corr.pixel_index(i) {
            for (ch, o) in row.iter_mut().enumerate().take(c) {
                *o = features.data()[ch * hw + px];
            }
        }
    }
    Ok((Tensor::new(vec![corr.len(), c], out)?, corr.valid.clone()))
}

impl<T: Real> Graph<T> {
    /// Differentiable [`sample_image_features`] restricted to `points`:
    /// returns a `points.len() x c` matrix. Every listed point must be valid.
    pub fn sample_image_features(
        &self,
        features: Var,
        corr: &CorrespondenceMap,
        points: &[usize],
    ) -> Result<Var> {
        let shape = self.shape(features);
        ensure!(shape.len() == 3, Shape, "feature map must be c x h x w");
        ensure!(
            shape[1] == corr.height && shape[2] == corr.width,
            Shape,
            "feature map is {}x{}, correspondences target {}x{}",
            shape[1],
            shape[2],
            corr.height,
            corr.width
        );
        let mut pixels = Vec::with_capacity(points.len());
        for &i in points {
            ensure!(i < corr.len(), Index, "point {} out of {}", i, corr.len());
            let px = corr
                .pixel_index(i)
                .ok_or_else(|| Error::Index(format!("point {i} is not visible")))?;
            pixels.push(px);
        }
        self.gather_pixels(features, &pixels)
    }
}
