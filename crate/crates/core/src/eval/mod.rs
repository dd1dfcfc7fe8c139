//! Metrics and evaluation protocols.

mod metrics;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Provenance;
use crate::distill::{
    run_finetune, train_2d, train_fskd, train_udakd, DistillConfig, RunOptions, SceneView, TrainReport,
};
use crate::error::{ensure, Error, Result};
use crate::models::{
    swap_classifier, Extractor3D, Module, ModelConfig, Network2D, Network3D, SharedClassifier,
};
use crate::scenegen::{write_f32, write_i32, COARSE_CLASSES, NEW_REFINED_CLASSES, REFINED_CLASSES};

pub use metrics::{miou, ConfusionMatrix, MiouReport};

/// Scores `net` on every point of every scene's full cloud.
pub fn evaluate_points(net: &Network3D<f32>, scenes: &[SceneView], refined: bool) -> Result<ConfusionMatrix> {
    let classes = net.d.classes();
    let mut cm = ConfusionMatrix::new(classes);
    for s in scenes {
        let preds = net.predict(&s.full)?;
        let labels = if refined {
            &s.point_labels_refined
        } else {
            &s.point_labels
        };
        cm.add_all(&preds, labels)?;
    }
    Ok(cm)
}

/// Scores the 2D segmenter on every labelled pixel.
pub fn evaluate_pixels(net: &Network2D<f32>, scenes: &[SceneView], refined: bool) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.d.classes());
    for s in scenes {
        let preds = net.predict(&s.image)?;
        let labels = if refined {
            &s.pixel_labels_refined
        } else {
            &s.pixel_labels
        };
        cm.add_all(&preds, labels)?;
    }
    Ok(cm)
}

/// Zero-shot 3D segmentation: argmax prediction against ground truth on the
/// full validation clouds, including points the camera never sees.
pub fn zero_shot_eval(net: &Network3D<f32>, val: &[SceneView]) -> Result<MiouReport> {
    Ok(MiouReport::from(&evaluate_points(net, val, false)?))
}

/// The most frequent point class of `scenes`.
pub fn majority_class(scenes: &[SceneView], classes: usize) -> usize {
    let mut counts = vec![0u64; classes];
    for s in scenes {
        for &l in &s.point_labels {
            if l >= 0 && (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// mIoU of predicting `class` for every point.
pub fn constant_prediction_miou(scenes: &[SceneView], class: usize, classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    for s in scenes {
        cm.add_all(&vec![class; s.point_labels.len()], &s.point_labels)?;
    }
    Ok(MiouReport::from(&cm))
}

/// Number of leading training scenes used at `fraction`.
pub fn scenes_for_fraction(n: usize, fraction: f64) -> Result<usize> {
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        Argument,
        "label fraction must lie in (0, 1], got {}",
        fraction
    );
    let k = (fraction * n as f64).round() as usize;
    ensure!(k > 0, Argument, "fraction {} of {} scenes selects none", fraction, n);
    Ok(k.min(n))
}

/// Supervised 3D training of `k ∘ h` on a leading fraction of `train`, with
/// `h` initialised from `h_init` (random when `None`) and a fresh classifier.
pub fn finetune(
    h_init: Option<&Extractor3D<f32>>,
    train: &[SceneView],
    val: &[SceneView],
    fraction: f64,
    model: &ModelConfig,
    cfg: &DistillConfig,
    run: &RunOptions,
) -> Result<(Network3D<f32>, MiouReport, TrainReport)> {
    let k = scenes_for_fraction(train.len(), fraction)?;
    let mut net = Network3D::direct(model, cfg.seed, model.c_cls);
    if let Some(h) = h_init {
        net.h = h.clone();
        net.h.set_trainable(true);
    }
    let report = run_finetune(&mut net, &train[..k], cfg, run)?;
    let score = zero_shot_eval(&net, val)?;
    Ok((net, score, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub scenes: usize,
    pub miou: f64,
}

/// Fine-tunes once per fraction; a fraction of 0 scores `zero_shot` instead.
#[allow(clippy::too_many_arguments)]
pub fn annotation_sweep(
    h_init: Option<&Extractor3D<f32>>,
    zero_shot: Option<&Network3D<f32>>,
    fractions: &[f64],
    train: &[SceneView],
    val: &[SceneView],
    model: &ModelConfig,
    cfg: &DistillConfig,
) -> Result<Vec<SweepRow>> {
    ensure!(
        fractions.windows(2).all(|w| w[0] <= w[1]),
        Argument,
        "fractions must be sorted ascending"
    );
    let prov = Provenance::new("", cfg.seed);
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if f == 0.0 {
            let net = zero_shot.ok_or_else(|| Error::Argument("fraction 0 needs a zero-shot network".into()))?;
            rows.push(SweepRow {
                fraction: 0.0,
                scenes: 0,
                miou: zero_shot_eval(net, val)?.miou,
            });
            continue;
        }
        let (_, score, _) = finetune(h_init, train, val, f, model, cfg, &RunOptions::in_memory(prov.clone()))?;
        rows.push(SweepRow {
            fraction: f,
            scenes: scenes_for_fraction(train.len(), f)?,
            miou: score.miou,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: usize,
    pub name: String,
    pub iou_3d: Option<f64>,
    pub iou_2d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZsdaReport {
    /// New refined classes only.
    pub classes: Vec<ClassIou>,
    /// How many new classes reach a positive 3D IoU.
    pub positive_3d: usize,
    pub miou_3d_all: f64,
    pub miou_2d_all: f64,
}

/// Trains a refined-label classifier `d′` on the frozen 2D extractor of
/// `teacher`, plugs it onto `net` without touching `h` or `m`, and reports
/// per-class IoU of the new classes for both modalities.
pub fn zero_shot_da_eval(
    net: &Network3D<f32>,
    teacher: &Network2D<f32>,
    train: &[SceneView],
    val: &[SceneView],
    model: &ModelConfig,
    cfg: &DistillConfig,
    run: &RunOptions,
) -> Result<(ZsdaReport, SharedClassifier<f32>)> {
    let mut e = teacher.e.clone();
    e.set_trainable(false);
    let d = SharedClassifier::new(model.c_img, model.hidden, REFINED_CLASSES.len(), cfg.seed, "d_refined");
    let mut net2d = Network2D { e, d };
    train_2d(&mut net2d, train, true, cfg, run, "zsda2d")?;
    let d_refined = net2d.d.clone();
    let report = score_refined(net, &net2d, &d_refined, val)?;
    Ok((report, d_refined))
}

/// Per-class refined IoU of `d′ ∘ m ∘ h` and of the 2D segmenter `net2d`.
pub fn score_refined(
    net: &Network3D<f32>,
    net2d: &Network2D<f32>,
    d_refined: &SharedClassifier<f32>,
    val: &[SceneView],
) -> Result<ZsdaReport> {
    ensure!(
        d_refined.classes() == REFINED_CLASSES.len(),
        Data,
        "refined classifier has {} classes, labels have {}",
        d_refined.classes(),
        REFINED_CLASSES.len()
    );
    let swapped = swap_classifier(net, d_refined.clone())?;
    let cm3 = evaluate_points(&swapped, val, true)?;
    let cm2 = evaluate_pixels(net2d, val, true)?;
    let classes: Vec<ClassIou> = NEW_REFINED_CLASSES
        .iter()
        .map(|&c| ClassIou {
            class: c,
            name: REFINED_CLASSES[c].to_string(),
            iou_3d: cm3.iou(c),
            iou_2d: cm2.iou(c),
        })
        .collect();
    let positive_3d = classes.iter().filter(|c| c.iou_3d.is_some_and(|v| v > 0.0)).count();
    Ok(ZsdaReport {
        classes,
        positive_3d,
        miou_3d_all: cm3.miou(),
        miou_2d_all: cm2.miou(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub rows: usize,
    pub cols: usize,
    pub features: String,
    pub labels: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

/// Writes per-point `h` features of every full cloud as `<stem>.f32`
/// (rows x channels), labels as `<stem>.i32` and a JSON header.
pub fn export_features(
    h: &Extractor3D<f32>,
    scenes: &[SceneView],
    dir: &Path,
    stem: &str,
    provenance: &Provenance,
) -> Result<ExportHeader> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for s in scenes {
        let g = crate::autodiff::Graph::new();
        let v = h.forward_points(&g, &s.full)?;
        feats.extend_from_slice(g.value(v).data());
        labels.extend_from_slice(&s.point_labels);
    }
    let header = ExportHeader {
        rows: labels.len(),
        cols: h.out_channels(),
        features: format!("{stem}.f32"),
        labels: format!("{stem}.i32"),
        provenance: provenance.clone(),
    };
    write_f32(&dir.join(&header.features), feats.into_iter())?;
    write_i32(&dir.join(&header.labels), &labels)?;
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
    Ok(header)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub miou: f64,
    /// Final training loss (InfoNCE for UDAKD rows).
    pub final_loss: f64,
}

/// The five FSKD rows: full method and one drop per component.
pub fn fskd_ablation(
    train: &[SceneView],
    val: &[SceneView],
    teacher: &Network2D<f32>,
    model: &ModelConfig,
    cfg: &DistillConfig,
) -> Result<Vec<AblationRow>> {
    let cells: [(&str, fn(&mut DistillConfig)); 5] = [
        ("FSKD", |_| {}),
        ("w/o soft labels", |c| c.use_soft_labels = false),
        ("w/o feature KD", |c| c.use_feat_kd = false),
        ("w/o semantic KD", |c| c.use_sem_kd = false),
        ("w/o DA", |c| c.use_da = false),
    ];
    let prov = Provenance::new("", cfg.seed);
    let mut rows = Vec::new();
    for (name, tweak) in cells {
        let mut c = cfg.clone();
        tweak(&mut c);
        let (net, report) = train_fskd(train, teacher, model, &c, &RunOptions::in_memory(prov.clone()))?;
        rows.push(AblationRow {
            name: name.to_string(),
            miou: zero_shot_eval(&net, val)?.miou,
            final_loss: report.final_loss().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// The four UDAKD rows over {superpixels, DA}; each is scored by fine-tuning
/// at `fraction`.
pub fn udakd_ablation(
    train: &[SceneView],
    val: &[SceneView],
    fraction: f64,
    model: &ModelConfig,
    cfg: &DistillConfig,
) -> Result<Vec<AblationRow>> {
    let prov = Provenance::new("", cfg.seed);
    let mut rows = Vec::new();
    for (sp, da) in [(true, true), (false, true), (true, false), (false, false)] {
        let mut c = cfg.clone();
        c.use_superpixels = sp;
        c.use_da = da;
        let (m, report) = train_udakd(train, model, &c, &RunOptions::in_memory(prov.clone()))?;
        let (_, score, _) = finetune(Some(&m.h), train, val, fraction, model, cfg, &RunOptions::in_memory(prov.clone()))?;
        let name = match (sp, da) {
            (true, true) => "UDAKD",
            (false, true) => "w/o sp.",
            (true, false) => "w/o DA",
            (false, false) => "w/o sp. & DA",
        };
        rows.push(AblationRow {
            name: name.to_string(),
            miou: score.miou,
            final_loss: report.final_component("infonce").unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// JSON summary of one metric with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metric: String,
    pub value: f64,
    #[serde(flatten)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(path, e))
}

/// CSV with a provenance comment line ahead of the header.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], provenance: &Provenance) -> Result<()> {
    let mut out = format!(
        "# config_hash={} seed={} version={}\n{}\n",
        provenance.config_hash,
        provenance.seed,
        provenance.version,
        header.join(",")
    );
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Names of the coarse classes, for reports.
pub fn class_names() -> &'static [&'static str] {
    &COARSE_CLASSES
}
