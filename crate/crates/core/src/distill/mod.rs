//! Distillation losses, scene preparation and the trainers.

mod losses;
mod runner;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{joint_visible_mask, project, CameraModel, CorrespondenceMap, Z_MIN};
use crate::models::{ModelConfig, VoxelInput};
use crate::scenegen::PairedSample;
use crate::tensor::Tensor;

pub use losses::{
    cross_entropy, kl_rows, loss_feat_mse, loss_fskd_total, loss_infonce, loss_sem_kl, lovasz_grad,
    lovasz_softmax, KlDirection, KL_EPS,
};
pub use runner::{EpochStats, RunOptions, TrainReport, Trainable};
pub use train::{
    pretrain_2d, run_finetune, train_2d, train_fskd, train_pseudolabel_baseline, train_udakd, FskdTeacher, UdakdModels,
};

/// Training hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau: f64,
    /// Weight of the feature term.
    pub a: f64,
    /// Weight of the semantic term.
    pub b: f64,
    pub lr_udakd: f64,
    /// FSKD learning rate of the 3D extractor.
    pub lr_h: f64,
    /// FSKD learning rate of the adaptation module.
    pub lr_da: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub lr_baseline: f64,
    pub momentum: f64,
    pub damping: f64,
    pub weight_decay: f64,
    pub epochs_pretrain: usize,
    pub epochs_udakd: usize,
    pub epochs_fskd: usize,
    pub epochs_finetune: usize,
    pub batch_pretrain: usize,
    pub batch_udakd: usize,
    pub batch_fskd: usize,
    pub batch_finetune: usize,
    /// Labelled pixels drawn per image and step in 2D training (0 = all).
    pub pixels_per_image: usize,
    pub superpixels: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    /// Restrict distillation clouds to the camera frustum widened by this
    /// fraction of the image size on every side; negative keeps all points.
    pub crop_margin: f64,
    pub seed: u64,
    pub use_superpixels: bool,
    pub use_da: bool,
    pub use_soft_labels: bool,
    pub use_feat_kd: bool,
    pub use_sem_kd: bool,
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            a: 10.0,
            b: 1.0,
            lr_udakd: 0.05,
            lr_h: 0.05,
            lr_da: 5e-5,
            lr_pretrain: 0.02,
            lr_finetune: 0.05,
            lr_baseline: 0.05,
            momentum: 0.9,
            damping: 0.1,
            weight_decay: 1e-4,
            epochs_pretrain: 20,
            epochs_udakd: 10,
            epochs_fskd: 60,
            epochs_finetune: 20,
            batch_pretrain: 4,
            batch_udakd: 4,
            batch_fskd: 4,
            batch_finetune: 2,
            pixels_per_image: 1536,
            superpixels: 150,
            compactness: 10.0,
            slic_iters: 10,
            crop_margin: 0.25,
            seed: 0,
            use_superpixels: true,
            use_da: true,
            use_soft_labels: true,
            use_feat_kd: true,
            use_sem_kd: true,
            kl_direction: KlDirection::StudentFirst,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau.is_finite() && self.tau > 0.0, Config, "tau must be positive, got {}", self.tau);
        ensure!(self.a >= 0.0 && self.b >= 0.0, Config, "loss weights must be non-negative");
        for (name, v) in [
            ("lr_udakd", self.lr_udakd),
            ("lr_h", self.lr_h),
            ("lr_da", self.lr_da),
            ("lr_pretrain", self.lr_pretrain),
            ("lr_finetune", self.lr_finetune),
            ("lr_baseline", self.lr_baseline),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            ensure!(v.is_finite() && v >= 0.0, Config, "{} must be non-negative, got {}", name, v);
        }
        ensure!((0.0..=1.0).contains(&self.damping), Config, "damping must lie in [0, 1]");
        for (name, v) in [
            ("batch_pretrain", self.batch_pretrain),
            ("batch_udakd", self.batch_udakd),
            ("batch_fskd", self.batch_fskd),
            ("batch_finetune", self.batch_finetune),
            ("superpixels", self.superpixels),
            ("slic_iters", self.slic_iters),
        ] {
            ensure!(v > 0, Config, "{} must be positive", name);
        }
        ensure!(self.compactness > 0.0, Config, "compactness must be positive");
        ensure!(
            self.use_feat_kd || self.use_sem_kd,
            Config,
            "at least one of use_feat_kd and use_sem_kd must be set"
        );
        Ok(())
    }

    pub(crate) fn sgd(&self, lr: f64) -> crate::optim::SgdConfig {
        crate::optim::SgdConfig {
            lr,
            momentum: self.momentum,
            damping: self.damping,
            weight_decay: self.weight_decay,
        }
    }
}

/// One paired sample at network resolution, with its voxelised clouds and
/// image correspondences.
#[derive(Clone, Debug)]
pub struct SceneView {
    pub seed: u64,
    /// `3 x h x w` at network resolution.
    pub image: Tensor<f32>,
    pub camera: CameraModel,
    pub pixel_labels: Vec<i32>,
    pub pixel_labels_refined: Vec<i32>,
    /// Full cloud.
    pub full: VoxelInput<f32>,
    pub point_labels: Vec<i32>,
    pub point_labels_refined: Vec<i32>,
    /// Rows of the full cloud kept for distillation.
    pub crop_rows: Vec<usize>,
    pub crop: VoxelInput<f32>,
    /// Correspondences of the cropped points.
    pub corr: CorrespondenceMap,
    /// Cropped points visible in the image.
    pub visible: Vec<usize>,
}

impl SceneView {
    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn crop_labels(&self, refined: bool) -> Vec<i32> {
        let src = if refined {
            &self.point_labels_refined
        } else {
            &self.point_labels
        };
        self.crop_rows.iter().map(|&r| src[r]).collect()
    }
}

/// Rows of `cloud` whose projection lands within the image widened by
/// `margin` (a fraction of width and height) in front of the camera.
pub fn frustum_rows(cloud: &Tensor<f32>, camera: &CameraModel, margin: f64) -> Result<Vec<usize>> {
    let (n, d) = cloud.dims2()?;
    ensure!(d >= 3, Shape, "points need x, y, z columns");
    if margin < 0.0 {
        return Ok((0..n).collect());
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut rows = Vec::new();
    for (i, p) in cloud.data().chunks(d).enumerate() {
        let c = camera.to_camera([p[0] as f64, p[1] as f64, p[2] as f64]);
        if c[2] <= Z_MIN {
            continue;
        }
        let uv = camera.camera_to_pixel(c);
        if uv[0] >= -margin * w && uv[0] < (1.0 + margin) * w && uv[1] >= -margin * h && uv[1] < (1.0 + margin) * h {
            rows.push(i);
        }
    }
    Ok(rows)
}

/// Downscales a sample to network resolution and voxelises its clouds.
pub fn prepare_scene(sample: &PairedSample, model: &ModelConfig, crop_margin: f64) -> Result<SceneView> {
    let s = sample.downscaled(model.image_downscale)?;
    let full = VoxelInput::from_cloud(&s.cloud, model.voxel_size, model.z_scale)?;
    let mut crop_rows = frustum_rows(&s.cloud, &s.camera, crop_margin)?;
    if crop_rows.is_empty() {
        crop_rows = (0..s.num_points()).collect();
    }
    let crop_cloud = s.cloud.select_rows(&crop_rows)?;
    let crop = VoxelInput::from_cloud(&crop_cloud, model.voxel_size, model.z_scale)?;
    let corr = project(&crop_cloud, &s.camera)?;
    let visible = joint_visible_mask(&corr);
    Ok(SceneView {
        seed: s.seed,
        image: s.image.clone(),
        camera: s.camera.clone(),
        pixel_labels: s.labels_px.clone(),
        pixel_labels_refined: s.labels_px_refined.clone(),
        full,
        point_labels: s.labels_pt.clone(),
        point_labels_refined: s.labels_pt_refined.clone(),
        crop_rows,
        crop,
        corr,
        visible,
    })
}

pub fn prepare_scenes(samples: &[PairedSample], model: &ModelConfig, crop_margin: f64) -> Result<Vec<SceneView>> {
    samples.iter().map(|s| prepare_scene(s, model, crop_margin)).collect()
}
