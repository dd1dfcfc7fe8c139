//! The trainers: 2D supervised pretraining, UDAKD, FSKD and the hard
//! pseudo-label baseline.

use rand::seq::SliceRandom;

use super::losses::{cross_entropy, loss_feat_mse, loss_fskd_total, loss_infonce, loss_sem_kl, lovasz_softmax};
use super::runner::{run_epochs, ItemLoss, Schedule};
use super::{DistillConfig, RunOptions, SceneView, TrainReport, Trainable};
use crate::autodiff::Graph;
use crate::error::{ensure, Result};
use crate::models::{
    argmax_rows, DaModule, Extractor2D, Extractor3D, Module, ModelConfig, Network2D, Network3D,
};
use crate::optim::{Parameter, Role};
use crate::superpixel::{group_superpoints, slic, SuperpixelPartition, SuperpointGroups};
use crate::tensor::Tensor;

const NORM_EPS: f32 = 1e-12;

/// Trains `net` on per-pixel labels with cross-entropy plus Lovász-softmax.
/// Frozen parts stay untouched; when all of `e` is frozen its features are
/// computed once per image.
pub fn train_2d(
    net: &mut Network2D<f32>,
    scenes: &[SceneView],
    refined: bool,
    cfg: &DistillConfig,
    run: &RunOptions,
    kind: &'static str,
) -> Result<TrainReport> {
    let classes = net.d.classes();
    let mut labelled: Vec<Vec<(usize, usize)>> = Vec::with_capacity(scenes.len());
    for s in scenes {
        let labels = if refined {
            &s.pixel_labels_refined
        } else {
            &s.pixel_labels
        };
        let mut v = Vec::new();
        for (px, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            ensure!((l as usize) < classes, Data, "pixel label {} out of {} classes", l, classes);
            v.push((px, l as usize));
        }
        labelled.push(v);
    }
    let frozen_e = net.e.parameters().iter().all(|p| !p.trainable);
    let cached: Option<Vec<Tensor<f32>>> = if frozen_e {
        Some(
            scenes
                .iter()
                .map(|s| net.infer(&s.image).map(|(f, _)| f))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let lr = cfg.lr_pretrain;
    let schedule = Schedule {
        kind,
        epochs: cfg.epochs_pretrain,
        batch: cfg.batch_pretrain,
        cfg,
        lr: &|_| lr,
    };
    let per_image = cfg.pixels_per_image;
    run_epochs(net, scenes.len(), &schedule, run, |net, g, i, rng| {
        let mut picks = labelled[i].clone();
        if picks.is_empty() {
            return Ok(None);
        }
        if per_image > 0 && picks.len() > per_image {
            picks.partial_shuffle(rng, per_image);
            picks.truncate(per_image);
        }
        let f = match &cached {
            Some(c) => g.constant(c[i].clone()),
            None => net.features(g, g.constant(scenes[i].image.clone()))?,
        };
        let px: Vec<usize> = picks.iter().map(|p| p.0).collect();
        let y: Vec<usize> = picks.iter().map(|p| p.1).collect();
        let rows = g.gather_pixels(f, &px)?;
        let logits = net.d.logits(g, rows)?;
        let ce = cross_entropy(g, logits, &y)?;
        let lov = lovasz_softmax(g, g.softmax_rows(logits)?, &y)?;
        let parts = vec![("ce", g.value(ce).item() as f64), ("lovasz", g.value(lov).item() as f64)];
        Ok(Some(ItemLoss {
            total: g.add(ce, lov)?,
            parts,
        }))
    })
}

/// Supervised 2D segmenter `f = d ∘ e` on coarse pixel labels.
pub fn pretrain_2d(
    scenes: &[SceneView],
    model: &ModelConfig,
    cfg: &DistillConfig,
    run: &RunOptions,
) -> Result<(Network2D<f32>, TrainReport)> {
    model.validate()?;
    cfg.validate()?;
    let mut net = Network2D::new(model, cfg.seed);
    let report = train_2d(&mut net, scenes, false, cfg, run, "pretrain2d")?;
    Ok((net, report))
}

/// The parameters UDAKD touches: the 2D extractor (backbone frozen), `h` and `m`.
#[derive(Clone, Debug)]
pub struct UdakdModels {
    pub e: Extractor2D<f32>,
    pub h: Extractor3D<f32>,
    pub m: DaModule<f32>,
}

impl Trainable for UdakdModels {
    fn params(&self) -> Vec<&Parameter<f32>> {
        let mut v = self.e.parameters();
        v.extend(self.h.parameters());
        v.extend(self.m.parameters());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        let mut v = self.e.parameters_mut();
        v.extend(self.h.parameters_mut());
        v.extend(self.m.parameters_mut());
        v
    }
}

impl UdakdModels {
    pub fn new(model: &ModelConfig, seed: u64, use_da: bool) -> Result<Self> {
        let mut e = Extractor2D::new(model.c_img, seed);
        e.set_backbone_trainable(false);
        let m = if use_da {
            DaModule::new(model.c_pc, model.c_img, model.da_layers, model.da_identity_init, seed)?
        } else {
            DaModule::linear(model.c_pc, model.c_img, seed)
        };
        Ok(Self {
            e,
            h: Extractor3D::new(model.c_pc, seed),
            m,
        })
    }
}

/// Unsupervised superpixel-driven distillation with InfoNCE. The 2D backbone
/// is a frozen seeded encoder; the head, `h` and `m` are trained.
///
/// The per-scene loss is the summed InfoNCE divided by the number of pooled
/// pairs, logged as `infonce`.
pub fn train_udakd(
    scenes: &[SceneView],
    model: &ModelConfig,
    cfg: &DistillConfig,
    run: &RunOptions,
) -> Result<(UdakdModels, TrainReport)> {
    model.validate()?;
    cfg.validate()?;
    let mut models = UdakdModels::new(model, cfg.seed, cfg.use_da)?;
    let mut backbone = Vec::with_capacity(scenes.len());
    let mut segments: Vec<Option<(SuperpixelPartition, SuperpointGroups)>> = Vec::with_capacity(scenes.len());
    for s in scenes {
        let g = Graph::new();
        let b = models.e.backbone(&g, g.constant(s.image.clone()))?;
        backbone.push((*g.value(b)).clone());
        segments.push(if cfg.use_superpixels {
            let part = slic(&s.image, cfg.superpixels, cfg.compactness, cfg.slic_iters)?;
            let groups = group_superpoints(&part, &s.corr)?;
            Some((part, groups))
        } else {
            None
        });
    }
    let lr = cfg.lr_udakd;
    let schedule = Schedule {
        kind: "udakd",
        epochs: cfg.epochs_udakd,
        batch: cfg.batch_udakd,
        cfg,
        lr: &|_| lr,
    };
    let tau = cfg.tau;
    let report = run_epochs(&mut models, scenes.len(), &schedule, run, |m, g, i, _| {
        let s = &scenes[i];
        let f = m.e.head(g, g.constant(backbone[i].clone()), s.height(), s.width())?;
        let v = m.h.forward_voxels(g, &s.crop)?;
        let v = m.m.forward_voxels(g, v, &s.crop.pyramid)?;
        let pts = g.gather_rows(v, &s.crop.map.point_rows)?;
        let (fp, gp, k) = match &segments[i] {
            Some((part, groups)) => {
                let ids = groups.nonempty();
                if ids.len() < 2 {
                    return Ok(None);
                }
                (g.pool_pixels(f, part, &ids)?, g.pool_points(pts, groups, &ids)?, ids.len())
            }
            None => {
                if s.visible.len() < 2 {
                    return Ok(None);
                }
                (
                    g.sample_image_features(f, &s.corr, &s.visible)?,
                    g.gather_rows(pts, &s.visible)?,
                    s.visible.len(),
                )
            }
        };
        let fp = g.l2_normalize_rows(fp, NORM_EPS)?;
        let gp = g.l2_normalize_rows(gp, NORM_EPS)?;
        let l = loss_infonce(g, fp, gp, tau)?;
        let l = g.scale(l, 1.0 / k as f32);
        Ok(Some(ItemLoss {
            total: l,
            parts: vec![("infonce", g.value(l).item() as f64)],
        }))
    })?;
    Ok((models, report))
}

/// Cached outputs of a frozen 2D segmenter: feature maps and per-pixel
/// class distributions.
#[derive(Clone, Debug)]
pub struct FskdTeacher {
    pub features: Vec<Tensor<f32>>,
    pub probs: Vec<Tensor<f32>>,
}

impl FskdTeacher {
    pub fn compute(teacher: &Network2D<f32>, scenes: &[SceneView]) -> Result<Self> {
        let mut features = Vec::with_capacity(scenes.len());
        let mut probs = Vec::with_capacity(scenes.len());
        for s in scenes {
            let (f, p) = teacher.infer(&s.image)?;
            features.push(f);
            probs.push(p);
        }
        Ok(Self { features, probs })
    }

    /// Argmax 2D class at each visible point of `scene`.
    fn hard_labels(&self, i: usize, scene: &SceneView) -> Result<Vec<usize>> {
        let cls = argmax_rows(&self.probs[i])?;
        scene
            .visible
            .iter()
            .map(|&p| {
                scene
                    .corr
                    .pixel_index(p)
                    .map(|px| cls[px])
                    .ok_or_else(|| crate::Error::Index(format!("point {p} is not visible")))
            })
            .collect()
    }
}

/// Feature plus semantic distillation from a frozen 2D segmenter into
/// `d ∘ m ∘ h`, with `d` shared with the teacher and not updated.
pub fn train_fskd(
    scenes: &[SceneView],
    teacher: &Network2D<f32>,
    model: &ModelConfig,
    cfg: &DistillConfig,
    run: &RunOptions,
) -> Result<(Network3D<f32>, TrainReport)> {
    model.validate()?;
    cfg.validate()?;
    let cache = FskdTeacher::compute(teacher, scenes)?;
    let hard: Vec<Vec<usize>> = if cfg.use_soft_labels {
        Vec::new()
    } else {
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| cache.hard_labels(i, s))
            .collect::<Result<_>>()?
    };
    let mut d = teacher.d.clone();
    d.set_trainable(false);
    let mut net = Network3D::new(model, cfg.seed, cfg.use_da, d)?;
    let (lr_h, lr_da) = (cfg.lr_h, cfg.lr_da);
    let lr = move |r: Role| match r {
        Role::Extractor3d => lr_h,
        Role::DomainAdapt => lr_da,
        _ => 0.0,
    };
    let schedule = Schedule {
        kind: "fskd",
        epochs: cfg.epochs_fskd,
        batch: cfg.batch_fskd,
        cfg,
        lr: &lr,
    };
    let report = run_epochs(&mut net, scenes.len(), &schedule, run, |net, g, i, _| {
        let s = &scenes[i];
        if s.visible.is_empty() {
            return Ok(None);
        }
        let pts = net.point_features(g, &s.crop)?;
        let mut parts = Vec::new();
        let feat = if cfg.use_feat_kd {
            let f = g.constant(cache.features[i].clone());
            loss_feat_mse(g, pts, f, &s.corr, &s.visible)?
        } else {
            None
        };
        if let Some(f) = feat {
            parts.push(("feat", g.value(f).item() as f64));
        }
        let sem = if !cfg.use_sem_kd {
            None
        } else if cfg.use_soft_labels {
            let t = net.d.probs(g, pts)?;
            let sp = g.constant(cache.probs[i].clone());
            loss_sem_kl(g, t, sp, &s.corr, &s.visible, cfg.kl_direction)?
        } else {
            let vis = g.gather_rows(pts, &s.visible)?;
            Some(cross_entropy(g, net.d.logits(g, vis)?, &hard[i])?)
        };
        if let Some(v) = sem {
            parts.push(("sem", g.value(v).item() as f64));
        }
        Ok(loss_fskd_total(g, feat, sem, cfg.a, cfg.b)?.map(|total| ItemLoss { total, parts }))
    })?;
    Ok((net, report))
}

/// `k ∘ h` trained with cross-entropy against the 2D segmenter's argmax
/// label at each visible point.
pub fn train_pseudolabel_baseline(
    scenes: &[SceneView],
    teacher: &Network2D<f32>,
    model: &ModelConfig,
    cfg: &DistillConfig,
    run: &RunOptions,
) -> Result<(Network3D<f32>, TrainReport)> {
    model.validate()?;
    cfg.validate()?;
    let cache = FskdTeacher::compute(teacher, scenes)?;
    let hard: Vec<Vec<usize>> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| cache.hard_labels(i, s))
        .collect::<Result<_>>()?;
    let mut net = Network3D::direct(model, cfg.seed, teacher.d.classes());
    let lr = cfg.lr_baseline;
    let schedule = Schedule {
        kind: "pseudolabel",
        epochs: cfg.epochs_fskd,
        batch: cfg.batch_fskd,
        cfg,
        lr: &|_| lr,
    };
    let report = run_epochs(&mut net, scenes.len(), &schedule, run, |net, g, i, _| {
        let s = &scenes[i];
        if s.visible.is_empty() {
            return Ok(None);
        }
        let pts = net.point_features(g, &s.crop)?;
        let vis = g.gather_rows(pts, &s.visible)?;
        let ce = cross_entropy(g, net.d.logits(g, vis)?, &hard[i])?;
        Ok(Some(ItemLoss {
            total: ce,
            parts: vec![("ce", g.value(ce).item() as f64)],
        }))
    })?;
    Ok((net, report))
}

/// Supervised 3D training with cross-entropy over every point of each full
/// cloud; all trainable parameters share `lr_finetune`.
pub fn run_finetune(
    net: &mut Network3D<f32>,
    scenes: &[SceneView],
    cfg: &DistillConfig,
    run: &RunOptions,
) -> Result<TrainReport> {
    let classes = net.d.classes();
    let mut labels = Vec::with_capacity(scenes.len());
    for s in scenes {
        let mut v = Vec::with_capacity(s.point_labels.len());
        for &l in &s.point_labels {
            ensure!(l >= 0 && (l as usize) < classes, Data, "point label {} out of {} classes", l, classes);
            v.push(l as usize);
        }
        labels.push(v);
    }
    let lr = cfg.lr_finetune;
    let schedule = Schedule {
        kind: "finetune",
        epochs: cfg.epochs_finetune,
        batch: cfg.batch_finetune,
        cfg,
        lr: &|_| lr,
    };
    run_epochs(net, scenes.len(), &schedule, run, |net, g, i, _| {
        let pts = net.point_features(g, &scenes[i].full)?;
        let ce = cross_entropy(g, net.d.logits(g, pts)?, &labels[i])?;
        Ok(Some(ItemLoss {
            total: ce,
            parts: vec![("ce", g.value(ce).item() as f64)],
        }))
    })
}
