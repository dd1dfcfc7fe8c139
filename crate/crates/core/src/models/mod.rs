//! The learnable components: 2D extractor `e`, sparse 3D U-Net `h`,
//! domain-adaptation module `m` and the shared classifier `d`.

mod checkpoint;
mod classifier;
mod da;
mod extractor2d;
mod extractor3d;
mod layers;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::optim::Parameter;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, BlobEntry, Checkpoint, CheckpointManifest};
pub use classifier::SharedClassifier;
pub use da::{DaModule, ScConv3d};
pub use extractor2d::Extractor2D;
pub use extractor3d::{Extractor3D, VoxelInput, POINT_INPUT_CHANNELS};
pub use layers::{component_rng, he_init, Conv2d, Dense, Module, SparseConv, SPARSE_INIT_TAPS};

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image feature channels (output of `e` and `m`).
    pub c_img: usize,
    /// 3D feature channels (output of `h`).
    pub c_pc: usize,
    pub c_cls: usize,
    pub hidden: usize,
    pub da_layers: usize,
    /// Start the self-calibrated kernels near the identity.
    pub da_identity_init: bool,
    pub voxel_size: f64,
    /// Multiplier on the height channel of the voxel input.
    pub z_scale: f64,
    /// Block factor between native and network image resolution.
    pub image_downscale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_img: 64,
            c_pc: 32,
            c_cls: crate::scenegen::COARSE_CLASSES.len(),
            hidden: 128,
            da_layers: 3,
            da_identity_init: true,
            voxel_size: 0.1,
            z_scale: 0.25,
            image_downscale: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.c_img > 0 && self.c_pc > 0, Config, "channel counts must be positive");
        ensure!(self.c_img % 2 == 0, Config, "c_img must be even, got {}", self.c_img);
        ensure!(self.c_cls >= 2, Config, "need at least two classes");
        ensure!(self.hidden > 0, Config, "hidden width must be positive");
        ensure!(
            self.voxel_size.is_finite() && self.voxel_size > 0.0,
            Config,
            "voxel_size must be positive"
        );
        ensure!(self.z_scale.is_finite(), Config, "z_scale must be finite");
        ensure!(self.image_downscale >= 1, Config, "image_downscale must be at least 1");
        Ok(())
    }
}

/// Row-wise argmax.
pub fn argmax_rows<T: Real>(m: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, c) = m.dims2()?;
    ensure!(c > 0, Shape, "argmax over zero columns");
    Ok(m.data()
        .chunks(c)
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// The 2D segmenter `f = d ∘ e`.
#[derive(Clone, Debug)]
pub struct Network2D<T: Real> {
    pub e: Extractor2D<T>,
    pub d: SharedClassifier<T>,
}

impl<T: Real> Network2D<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            e: Extractor2D::new(cfg.c_img, seed),
            d: SharedClassifier::new(cfg.c_img, cfg.hidden, cfg.c_cls, seed, "d"),
        }
    }

    /// `c_img x h x w` feature map.
    pub fn features(&self, g: &Graph<T>, image: Var) -> Result<Var> {
        self.e.forward(g, image)
    }

    /// `hw x c_cls` logits, one row per pixel in row-major order.
    pub fn pixel_logits(&self, g: &Graph<T>, image: Var) -> Result<Var> {
        let f = self.features(g, image)?;
        let rows = g.pixels_as_rows(f)?;
        self.d.logits(g, rows)
    }

    /// Feature map and per-pixel class distributions of one image.
    pub fn infer(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let g = Graph::new();
        let x = g.constant(image.clone());
        let f = self.features(&g, x)?;
        let rows = g.pixels_as_rows(f)?;
        let p = self.d.probs(&g, rows)?;
        let (f, p) = ((*g.value(f)).clone(), (*g.value(p)).clone());
        Ok((f, p))
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<usize>> {
        argmax_rows(&self.infer(image)?.1)
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = self.e.parameters();
        v.extend(self.d.parameters());
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.e.parameters_mut();
        v.extend(self.d.parameters_mut());
        v
    }
}

/// The composed 3D network `d ∘ m ∘ h`, or `k ∘ h` when `m` is absent.
#[derive(Clone, Debug)]
pub struct Network3D<T: Real> {
    pub h: Extractor3D<T>,
    pub m: Option<DaModule<T>>,
    pub d: SharedClassifier<T>,
}

impl<T: Real> Network3D<T> {
    /// `h` plus an adaptation module (`da_layers` self-calibrated layers, or a
    /// bare linear lift when `use_da` is false) feeding `d`.
    pub fn new(cfg: &ModelConfig, seed: u64, use_da: bool, d: SharedClassifier<T>) -> Result<Self> {
        ensure!(
            d.in_channels() == cfg.c_img,
            Shape,
            "classifier expects {} channels, adapter emits {}",
            d.in_channels(),
            cfg.c_img
        );
        let m = if use_da {
            DaModule::new(cfg.c_pc, cfg.c_img, cfg.da_layers, cfg.da_identity_init, seed)?
        } else {
            DaModule::linear(cfg.c_pc, cfg.c_img, seed)
        };
        Ok(Self {
            h: Extractor3D::new(cfg.c_pc, seed),
            m: Some(m),
            d,
        })
    }

    /// `k ∘ h` with a fresh classifier on the 3D features.
    pub fn direct(cfg: &ModelConfig, seed: u64, classes: usize) -> Self {
        Self {
            h: Extractor3D::new(cfg.c_pc, seed),
            m: None,
            d: SharedClassifier::new(cfg.c_pc, cfg.hidden, classes, seed, "k"),
        }
    }

    pub fn voxel_input(&self, cloud: &Tensor<T>, cfg: &ModelConfig) -> Result<VoxelInput<T>> {
        VoxelInput::from_cloud(cloud, cfg.voxel_size, cfg.z_scale)
    }

    /// Per-voxel features entering the classifier.
    pub fn voxel_features(&self, g: &Graph<T>, input: &VoxelInput<T>) -> Result<Var> {
        let v = self.h.forward_voxels(g, input)?;
        match &self.m {
            Some(m) => m.forward_voxels(g, v, &input.pyramid),
            None => Ok(v),
        }
    }

    /// Per-point features entering the classifier (`n x c`).
    pub fn point_features(&self, g: &Graph<T>, input: &VoxelInput<T>) -> Result<Var> {
        let v = self.voxel_features(g, input)?;
        g.gather_rows(v, &input.map.point_rows)
    }

    /// Per-point class distributions.
    pub fn infer(&self, input: &VoxelInput<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let v = self.voxel_features(&g, input)?;
        let p = self.d.probs(&g, v)?;
        let p = (*g.value(p)).clone();
        p.select_rows(&input.map.point_rows)
    }

    pub fn predict(&self, input: &VoxelInput<T>) -> Result<Vec<usize>> {
        argmax_rows(&self.infer(input)?)
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = self.h.parameters();
        if let Some(m) = &self.m {
            v.extend(m.parameters());
        }
        v.extend(self.d.parameters());
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.h.parameters_mut();
        if let Some(m) = &mut self.m {
            v.extend(m.parameters_mut());
        }
        v.extend(self.d.parameters_mut());
        v
    }
}

/// A copy of `net` that classifies with `classifier`; `h` and `m` share their
/// parameter values with `net`.
pub fn swap_classifier<T: Real>(net: &Network3D<T>, classifier: SharedClassifier<T>) -> Result<Network3D<T>> {
    let width = match &net.m {
        Some(m) => m.out_channels(),
        None => net.h.out_channels(),
    };
    ensure!(
        classifier.in_channels() == width,
        Shape,
        "classifier expects {} channels, network emits {}",
        classifier.in_channels(),
        width
    );
    Ok(Network3D {
        h: net.h.clone(),
        m: net.m.clone(),
        d: classifier,
    })
}
