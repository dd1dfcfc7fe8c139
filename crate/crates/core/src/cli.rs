//! Command implementations behind the `xmd` binary.

use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Provenance};
use crate::distill::{
    prepare_scenes, pretrain_2d, train_fskd, train_pseudolabel_baseline, train_udakd, RunOptions, SceneView,
    TrainReport, UdakdModels, Trainable,
};
use crate::error::{Error, Result};
use crate::eval::{
    annotation_sweep, constant_prediction_miou, export_features, finetune, fskd_ablation, majority_class,
    udakd_ablation, write_csv, write_summary, zero_shot_da_eval, zero_shot_eval, Summary,
};
use crate::models::{load_checkpoint, save_checkpoint, Module, Network2D, Network3D};
use crate::scenegen::{generate_dataset, read_dataset, write_dataset, COARSE_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainMode {
    Pretrain2d,
    Udakd,
    Fskd,
    Pseudolabel,
}

impl TrainMode {
    pub fn dir_name(self) -> &'static str {
        match self {
            TrainMode::Pretrain2d => "pretrain2d",
            TrainMode::Udakd => "udakd",
            TrainMode::Fskd => "fskd",
            TrainMode::Pseudolabel => "pseudolabel",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Protocol {
    Zeroshot,
    Finetune,
    Sweep,
    Ablation,
    Zsda,
    Export,
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Generates the configured number of scenes into `out`.
pub fn cmd_scenegen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<PathBuf> {
    if dir_is_nonempty(out) {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let (train, val) = generate_dataset(&cfg.scene, cfg.seed, cfg.train_scenes, cfg.val_scenes)?;
    write_dataset(out, &cfg.scene, cfg.seed, &cfg.hash(), &train, &val)?;
    log::info!("wrote {} + {} scenes to {}", train.len(), val.len(), out.display());
    Ok(out.to_path_buf())
}

/// Train and validation scenes at network resolution.
pub fn load_scenes(cfg: &ExperimentConfig) -> Result<(Vec<SceneView>, Vec<SceneView>)> {
    let data = read_dataset(&cfg.data_dir)?;
    if data.manifest.spec != cfg.scene || data.manifest.seed != cfg.seed {
        log::warn!(
            "dataset in {} was generated with a different scene spec or seed",
            cfg.data_dir.display()
        );
    }
    let m = cfg.distill.crop_margin;
    Ok((prepare_scenes(&data.train, &cfg.model, m)?, prepare_scenes(&data.val, &cfg.model, m)?))
}

fn checkpoint_dir(cfg: &ExperimentConfig, mode: TrainMode) -> PathBuf {
    cfg.out_dir.join(mode.dir_name()).join("checkpoint")
}

fn require_checkpoint(cfg: &ExperimentConfig, mode: TrainMode) -> Result<PathBuf> {
    let dir = checkpoint_dir(cfg, mode);
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingArtifact {
            path: dir,
            hint: format!("run `xmd train --mode {}` with the same --out first", mode.dir_name()),
        });
    }
    Ok(dir)
}

pub fn load_network_2d(cfg: &ExperimentConfig) -> Result<Network2D<f32>> {
    let dir = require_checkpoint(cfg, TrainMode::Pretrain2d)?;
    let mut net = Network2D::new(&cfg.model, cfg.seed);
    load_checkpoint(&dir)?.assign(net.parameters_mut(), true)?;
    Ok(net)
}

pub fn load_network_fskd(cfg: &ExperimentConfig, teacher: &Network2D<f32>) -> Result<Network3D<f32>> {
    let dir = require_checkpoint(cfg, TrainMode::Fskd)?;
    let mut net = Network3D::new(&cfg.model, cfg.seed, cfg.distill.use_da, teacher.d.clone())?;
    load_checkpoint(&dir)?.assign(net.parameters_mut(), true)?;
    Ok(net)
}

pub fn load_udakd(cfg: &ExperimentConfig) -> Result<UdakdModels> {
    let dir = require_checkpoint(cfg, TrainMode::Udakd)?;
    let mut m = UdakdModels::new(&cfg.model, cfg.seed, cfg.distill.use_da)?;
    load_checkpoint(&dir)?.assign(m.params_mut(), true)?;
    Ok(m)
}

fn summary(metric: &str, value: f64, prov: &Provenance, details: serde_json::Value) -> Summary {
    Summary {
        metric: metric.to_string(),
        value,
        provenance: prov.clone(),
        details: Some(details),
    }
}

fn write_report(dir: &Path, report: &TrainReport, prov: &Provenance) -> Result<()> {
    let s = summary(
        "final_loss",
        report.final_loss().unwrap_or(f64::NAN),
        prov,
        serde_json::to_value(report)?,
    );
    write_summary(&dir.join("summary.json"), &s)
}

/// Runs one trainer and writes its checkpoint, log and summary under
/// `<out_dir>/<mode>/`.
pub fn cmd_train(cfg: &ExperimentConfig, mode: TrainMode, resume: bool, force: bool) -> Result<TrainReport> {
    let prov = cfg.provenance();
    let dir = cfg.out_dir.join(mode.dir_name());
    if dir.join("state.json").exists() && !resume {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume to continue or --force to restart",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let teacher = match mode {
        TrainMode::Fskd | TrainMode::Pseudolabel => Some(load_network_2d(cfg)?),
        _ => None,
    };
    let (train, _) = load_scenes(cfg)?;
    let mut run = RunOptions::in_dir(&dir, prov.clone());
    run.resume = resume;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&dir, e))?;
    let report = match mode {
        TrainMode::Pretrain2d => pretrain_2d(&train, &cfg.model, &cfg.distill, &run)?.1,
        TrainMode::Udakd => train_udakd(&train, &cfg.model, &cfg.distill, &run)?.1,
        TrainMode::Fskd => {
            let t = teacher.as_ref().expect("teacher loaded");
            train_fskd(&train, t, &cfg.model, &cfg.distill, &run)?.1
        }
        TrainMode::Pseudolabel => {
            let t = teacher.as_ref().expect("teacher loaded");
            train_pseudolabel_baseline(&train, t, &cfg.model, &cfg.distill, &run)?.1
        }
    };
    write_report(&dir, &report, &prov)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "".to_string(), |x| format!("{x:.6}"))
}

/// Runs one evaluation protocol; reports go to `<out_dir>/eval/`.
pub fn cmd_eval(cfg: &ExperimentConfig, protocol: Protocol) -> Result<Vec<PathBuf>> {
    let prov = cfg.provenance();
    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    let memory = RunOptions::in_memory(prov.clone());
    match protocol {
        Protocol::Zeroshot => {
            let teacher = load_network_2d(cfg)?;
            let net = load_network_fskd(cfg, &teacher)?;
            let (train, val) = load_scenes(cfg)?;
            let score = zero_shot_eval(&net, &val)?;
            let classes = COARSE_CLASSES.len();
            let maj = constant_prediction_miou(&val, majority_class(&train, classes), classes)?;
            let mut details = serde_json::to_value(&score)?;
            details["majority_miou"] = maj.miou.into();
            let path = dir.join("zeroshot.json");
            write_summary(&path, &summary("zero_shot_miou", score.miou, &prov, details))?;
            written.push(path);
            let rows: Vec<Vec<String>> = score
                .per_class
                .iter()
                .enumerate()
                .map(|(c, v)| vec![COARSE_CLASSES[c].to_string(), fmt_opt(*v)])
                .collect();
            let path = dir.join("zeroshot.csv");
            write_csv(&path, &["class", "iou"], &rows, &prov)?;
            written.push(path);
        }
        Protocol::Finetune => {
            let init = if cfg.finetune_from_udakd {
                Some(load_udakd(cfg)?.h)
            } else {
                None
            };
            let (train, val) = load_scenes(cfg)?;
            let (_, score, report) = finetune(
                init.as_ref(),
                &train,
                &val,
                cfg.finetune_fraction,
                &cfg.model,
                &cfg.distill,
                &memory,
            )?;
            let mut details = serde_json::to_value(&score)?;
            details["fraction"] = cfg.finetune_fraction.into();
            details["init"] = if init.is_some() { "udakd" } else { "random" }.into();
            details["final_loss"] = report.final_loss().unwrap_or(f64::NAN).into();
            let path = dir.join("finetune.json");
            write_summary(&path, &summary("finetune_miou", score.miou, &prov, details))?;
            written.push(path);
        }
        Protocol::Sweep => {
            let init = if cfg.finetune_from_udakd {
                Some(load_udakd(cfg)?.h)
            } else {
                None
            };
            let zero = if cfg.fractions.contains(&0.0) {
                let teacher = load_network_2d(cfg)?;
                Some(load_network_fskd(cfg, &teacher)?)
            } else {
                None
            };
            let (train, val) = load_scenes(cfg)?;
            let rows = annotation_sweep(
                init.as_ref(),
                zero.as_ref(),
                &cfg.fractions,
                &train,
                &val,
                &cfg.model,
                &cfg.distill,
            )?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![r.fraction.to_string(), r.scenes.to_string(), format!("{:.6}", r.miou)])
                .collect();
            let path = dir.join("sweep.csv");
            write_csv(&path, &["fraction", "scenes", "miou"], &table, &prov)?;
            written.push(path);
        }
        Protocol::Ablation => {
            let teacher = load_network_2d(cfg)?;
            let (train, val) = load_scenes(cfg)?;
            let fskd = fskd_ablation(&train, &val, &teacher, &cfg.model, &cfg.distill)?;
            let udakd = udakd_ablation(&train, &val, cfg.finetune_fraction, &cfg.model, &cfg.distill)?;
            for (name, rows) in [("ablation_fskd.csv", fskd), ("ablation_udakd.csv", udakd)] {
                let table: Vec<Vec<String>> = rows
                    .iter()
                    .map(|r| vec![r.name.clone(), format!("{:.6}", r.miou), format!("{:.6}", r.final_loss)])
                    .collect();
                let path = dir.join(name);
                write_csv(&path, &["row", "miou", "final_loss"], &table, &prov)?;
                written.push(path);
            }
        }
        Protocol::Zsda => {
            let teacher = load_network_2d(cfg)?;
            let net = load_network_fskd(cfg, &teacher)?;
            let (train, val) = load_scenes(cfg)?;
            let (report, d_refined) = zero_shot_da_eval(&net, &teacher, &train, &val, &cfg.model, &cfg.distill, &memory)?;
            save_checkpoint(&dir.join("zsda_classifier"), "zsda2d", &prov, d_refined.parameters(), false)?;
            let path = dir.join("zsda.json");
            write_summary(
                &path,
                &summary("new_classes_positive_3d", report.positive_3d as f64, &prov, serde_json::to_value(&report)?),
            )?;
            written.push(path);
            let rows: Vec<Vec<String>> = report
                .classes
                .iter()
                .map(|c| vec![c.name.clone(), fmt_opt(c.iou_3d), fmt_opt(c.iou_2d)])
                .collect();
            let path = dir.join("zsda.csv");
            write_csv(&path, &["class", "iou_3d", "iou_2d"], &rows, &prov)?;
            written.push(path);
        }
        Protocol::Export => {
            let h = match require_checkpoint(cfg, TrainMode::Fskd) {
                Ok(_) => load_network_fskd(cfg, &load_network_2d(cfg)?)?.h,
                Err(_) => load_udakd(cfg)?.h,
            };
            let (_, val) = load_scenes(cfg)?;
            export_features(&h, &val, &dir, "features", &prov)?;
            written.push(dir.join("features.json"));
        }
    }
    Ok(written)
}
