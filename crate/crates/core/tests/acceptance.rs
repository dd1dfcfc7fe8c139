//! Acceptance criteria, one PASS/FAIL line each. Runs the full-scale pipeline
//! (64 training and 16 validation scenes, seed 0, default configuration).

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmd_core::autodiff::Graph;
use xmd_core::config::{ExperimentConfig, Provenance};
use xmd_core::distill::{
    kl_rows, loss_feat_mse, loss_infonce, loss_sem_kl, lovasz_softmax, prepare_scenes, pretrain_2d, train_fskd,
    KlDirection, RunOptions,
};
use xmd_core::eval::{
    constant_prediction_miou, finetune, fskd_ablation, majority_class, udakd_ablation, zero_shot_da_eval,
    zero_shot_eval,
};
use xmd_core::geometry::{joint_visible_mask, project, CorrespondenceMap};
use xmd_core::scenegen::{generate_dataset, generate_scene, COARSE_CLASSES};
use xmd_core::sparse3d::sparse_conv;
use xmd_core::superpixel::slic;
use xmd_core::tensor::Tensor;

mod common;
use common::dense::{dense_conv, full_sites, max_diff_against, random_dense, to_sparse};
use common::grads::{Checks, GROUPS, TOL};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(n: usize, title: &str, o: &Outcome) {
    println!("{} criterion {n} ({title}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut c = Checks::default();
    for g in GROUPS {
        g(&mut c);
    }
    let (name, worst) = c.worst();
    let dt = t.elapsed();
    outcome(
        worst <= TOL && dt < Duration::from_secs(60),
        format!("{} cases, worst {name} at {worst:.2e}, {:.1}s", c.0.len(), dt.as_secs_f64()),
    )
}

fn sparse_vs_dense() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for side in 1..=6 {
        for _ in 0..20 {
            let cin = rng.random_range(1..5);
            let cout = rng.random_range(1..5);
            let input = random_dense(&mut rng, side, cin);
            let w: Vec<f64> = (0..27 * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt = Tensor::new(vec![27, cin, cout], w.clone()).unwrap();
            let sparse = to_sparse(&input, &full_sites(side));
            for stride in [1, 2] {
                let got = sparse_conv(&sparse, &wt, stride as u32).unwrap();
                let want = dense_conv(&input, &w, cout, stride);
                if got.coords.len() != (want.side * want.side * want.side) as usize {
                    return outcome(false, format!("side {side} stride {stride}: wrong output sites"));
                }
                worst = worst.max(max_diff_against(&got, &want));
                trials += 1;
            }
        }
    }
    let dt = t.elapsed();
    outcome(
        worst <= 1e-10 && dt < Duration::from_secs(30),
        format!("{trials} convolutions, max abs diff {worst:.2e}, {:.1}s", dt.as_secs_f64()),
    )
}

fn losses() -> Outcome {
    let tv = |shape: &[usize], v: &[f64]| Tensor::from_f64(shape, v).unwrap();
    let g = Graph::<f64>::new();
    let tau = 0.07;
    let e = g.constant(tv(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let nce = g.value(loss_infonce(&g, e, e, tau).unwrap()).item();
    let nce_want = 2.0 * (1.0 + (-1.0f64 / tau).exp()).ln();

    let mut onehot = vec![0.0; 8];
    onehot[5] = 1.0;
    let kl = g
        .value(kl_rows(&g, g.constant(tv(&[1, 8], &onehot)), g.constant(tv(&[1, 8], &[0.125; 8]))).unwrap())
        .item();

    let corr = CorrespondenceMap {
        uv: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
        depth: vec![1.0; 3],
        valid: vec![true; 3],
        width: 2,
        height: 2,
    };
    // channel-major 2x2x2 map whose pixels 0, 1 and 3 equal the point rows
    let fm = g.constant(tv(&[2, 2, 2], &[0.5, -1.0, 9.0, 2.0, 1.5, 0.25, 9.0, -3.0]));
    let pts = g.constant(tv(&[3, 2], &[0.5, 1.5, -1.0, 0.25, 2.0, -3.0]));
    let mse = g.value(loss_feat_mse(&g, pts, fm, &corr, &[0, 1, 2]).unwrap().unwrap()).item();
    let p = tv(&[3, 4], &[0.1, 0.2, 0.3, 0.4, 0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]);
    let kl_same = g.value(kl_rows(&g, g.constant(p.clone()), g.constant(p.clone())).unwrap()).item();
    let s = tv(
        &[4, 4],
        &[0.1, 0.2, 0.3, 0.4, 0.0, 1.0, 0.0, 0.0, 0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25],
    );
    let sem = g
        .value(
            loss_sem_kl(&g, g.constant(p.clone()), g.constant(s), &corr, &[0, 1, 2], KlDirection::StudentFirst)
                .unwrap()
                .unwrap(),
        )
        .item();
    let perfect = tv(&[3, 3], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let lovasz = g.value(lovasz_softmax(&g, g.constant(perfect), &[2, 0, 1]).unwrap()).item();

    let pass = (nce - nce_want).abs() <= 1e-9
        && (kl - 8f64.ln()).abs() <= 1e-9
        && mse == 0.0
        && kl_same.abs() <= 1e-7
        && sem.abs() <= 1e-7
        && lovasz == 0.0;
    outcome(
        pass,
        format!(
            "InfoNCE {nce:.12} vs {nce_want:.12}, KL {kl:.12} vs ln 8, zero cases mse {mse} kl {kl_same:.1e} sem {sem:.1e} lovasz {lovasz}"
        ),
    )
}

fn labels_and_superpixels(cfg: &ExperimentConfig) -> Outcome {
    let d = &cfg.distill;
    let (mut agree, mut total, mut max_segments) = (0usize, 0usize, 0usize);
    let mut covered = true;
    for seed in 0..50 {
        let s = generate_scene(&cfg.scene, seed).unwrap();
        let corr = project(&s.cloud, &s.camera).unwrap();
        let px = s.pixel_labels(false);
        let pts = s.point_labels(false);
        for i in joint_visible_mask(&corr) {
            total += 1;
            agree += usize::from(px[corr.pixel_index(i).unwrap()] == pts[i]);
        }
        let small = s.downscaled(cfg.model.image_downscale).unwrap();
        let part = slic(&small.image, d.superpixels, d.compactness, d.slic_iters).unwrap();
        let (h, w) = (small.image.shape()[1], small.image.shape()[2]);
        covered &= part.labels.len() == h * w && part.labels.iter().all(|&l| l < part.segments);
        max_segments = max_segments.max(part.segments);
    }
    let rate = agree as f64 / total as f64;
    outcome(
        rate >= 0.99 && covered && max_segments <= 150,
        format!("label agreement {rate:.5} over {total} points, full coverage {covered}, at most {max_segments} segments"),
    )
}

struct Pipeline {
    fskd: Outcome,
    ablation: Outcome,
    zsda: Outcome,
    fskd_miou: f64,
    ablation_fskd_miou: f64,
    fskd_loss: f64,
    ablation_fskd_loss: f64,
}

fn pipeline(cfg: &ExperimentConfig) -> Pipeline {
    let (model, d) = (&cfg.model, &cfg.distill);
    let run = RunOptions::in_memory(Provenance::new("acceptance", cfg.seed));
    let t = Instant::now();
    let (tr, va) = generate_dataset(&cfg.scene, cfg.seed, cfg.train_scenes, cfg.val_scenes).unwrap();
    let train = prepare_scenes(&tr, model, d.crop_margin).unwrap();
    let val = prepare_scenes(&va, model, d.crop_margin).unwrap();
    let (teacher, _) = pretrain_2d(&train, model, d, &run).unwrap();
    let (net, fskd_report) = train_fskd(&train, &teacher, model, d, &run).unwrap();
    let score = zero_shot_eval(&net, &val).unwrap();
    let classes = COARSE_CLASSES.len();
    let majority = constant_prediction_miou(&val, majority_class(&train, classes), classes).unwrap().miou;
    let dt = t.elapsed();
    let per_class: Vec<String> = score.per_class.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.3}"))).collect();
    let fskd = outcome(
        score.miou >= majority + 0.20 && dt < Duration::from_secs(15 * 60),
        format!(
            "zero-shot mIoU {:.4} vs majority {majority:.4} (+{:.1} points), per class [{}], {:.0}s",
            score.miou,
            100.0 * (score.miou - majority),
            per_class.join(" "),
            dt.as_secs_f64()
        ),
    );

    let rows = fskd_ablation(&train, &val, &teacher, model, d).unwrap();
    let full = rows[0].miou;
    let fskd_ok = rows[1..].iter().all(|r| full >= r.miou + 0.02);
    let urows = udakd_ablation(&train, &val, cfg.finetune_fraction, model, d).unwrap();
    let with_da = urows.iter().find(|r| r.name == "UDAKD").unwrap();
    let without_da = urows.iter().find(|r| r.name == "w/o DA").unwrap();
    let nce_ok = with_da.final_loss <= without_da.final_loss;
    let (_, random, _) = finetune(None, &train, &val, cfg.finetune_fraction, model, d, &run).unwrap();
    let init_ok = with_da.miou >= random.miou + 0.02;
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.name, r.miou)).collect();
    let utable: Vec<String> = urows
        .iter()
        .map(|r| format!("{} {:.4} (InfoNCE {:.4})", r.name, r.miou, r.final_loss))
        .collect();
    let ablation = outcome(
        fskd_ok && nce_ok && init_ok,
        format!(
            "FSKD rows [{}]; UDAKD rows [{}]; random init {:.4} at fraction {}",
            table.join(", "),
            utable.join(", "),
            random.miou,
            cfg.finetune_fraction
        ),
    );

    let before: Vec<Vec<f32>> = net.parameters().iter().map(|p| p.value().data().to_vec()).collect();
    let (zr, _) = zero_shot_da_eval(&net, &teacher, &train, &val, model, d, &run).unwrap();
    let after: Vec<Vec<f32>> = net.parameters().iter().map(|p| p.value().data().to_vec()).collect();
    let frozen = before == after;
    let ious: Vec<String> = zr
        .classes
        .iter()
        .map(|c| format!("{} {}", c.name, c.iou_3d.map_or("-".into(), |x| format!("{x:.3}"))))
        .collect();
    let zsda = outcome(
        2 * zr.positive_3d >= zr.classes.len() && frozen,
        format!(
            "{}/{} new classes with positive 3D IoU [{}], 3D parameters unchanged {frozen}",
            zr.positive_3d,
            zr.classes.len(),
            ious.join(", ")
        ),
    );

    Pipeline {
        fskd,
        ablation,
        zsda,
        fskd_miou: score.miou,
        ablation_fskd_miou: full,
        fskd_loss: fskd_report.final_loss().unwrap_or(f64::NAN),
        ablation_fskd_loss: rows[0].final_loss,
    }
}

const TINY: &str = r#"
seed = 1
train_scenes = 4
val_scenes = 2
fractions = [0.0, 0.5]
finetune_fraction = 0.5

[scene]
image_height = 64
image_width = 96
lidar_azimuth_steps = 120
lidar_elevation_steps = 8

[distill]
epochs_pretrain = 1
epochs_udakd = 1
epochs_fskd = 2
epochs_finetune = 1
batch_pretrain = 2
batch_udakd = 2
batch_fskd = 2
batch_finetune = 2
pixels_per_image = 128
superpixels = 12
slic_iters = 2
"#;

const COMMANDS: &[&[&str]] = &[
    &["--out", "data", "scenegen"],
    &["--data", "data", "--out", "run", "train", "--mode", "pretrain2d"],
    &["--data", "data", "--out", "run", "train", "--mode", "fskd"],
    &["--data", "data", "--out", "run", "train", "--mode", "udakd"],
    &["--data", "data", "--out", "run", "train", "--mode", "pseudolabel"],
    &["--data", "data", "--out", "run", "eval", "--protocol", "zeroshot"],
    &["--data", "data", "--out", "run", "eval", "--protocol", "finetune"],
    &["--data", "data", "--out", "run", "eval", "--protocol", "sweep"],
    &["--data", "data", "--out", "run", "eval", "--protocol", "ablation"],
    &["--data", "data", "--out", "run", "eval", "--protocol", "zsda"],
    &["--data", "data", "--out", "run", "eval", "--protocol", "export"],
];

fn run_all_commands(dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    for args in COMMANDS {
        let out = Command::new(env!("CARGO_BIN_EXE_xmd"))
            .arg("--config")
            .arg("tiny.toml")
            .args(*args)
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        if !out.status.success() {
            return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(p: &Pipeline) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        if let Err(e) = run_all_commands(d.path()) {
            return outcome(false, e);
        }
    }
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    let mut differing = Vec::new();
    if fa != fb {
        differing.push("file lists differ".to_string());
    }
    for f in &fa {
        if std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let full_scale = p.fskd_miou.to_bits() == p.ablation_fskd_miou.to_bits()
        && p.fskd_loss.to_bits() == p.ablation_fskd_loss.to_bits();
    outcome(
        differing.is_empty() && full_scale,
        format!(
            "{} command outputs ({} files) identical across two runs: {}; full-scale FSKD rerun mIoU {:.6} == {:.6}: {full_scale}",
            COMMANDS.len(),
            fa.len(),
            if differing.is_empty() { "yes".to_string() } else { differing.join(", ") },
            p.fskd_miou,
            p.ablation_fskd_miou
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let cfg = ExperimentConfig::default();
    let mut results = Vec::new();
    let mut record = |n: usize, title: &str, o: Outcome| {
        report(n, title, &o);
        results.push(o.pass);
    };
    record(1, "gradient checks", gradients());
    record(2, "sparse vs dense convolution", sparse_vs_dense());
    record(3, "loss closed forms", losses());
    record(4, "projection labels and superpixels", labels_and_superpixels(&cfg));
    let p = pipeline(&cfg);
    let repro = reproducibility(&p);
    let Pipeline { fskd, ablation, zsda, .. } = p;
    record(5, "zero-shot FSKD", fskd);
    record(6, "ablation orderings", ablation);
    record(7, "zero-shot domain adaptation", zsda);
    record(8, "bitwise reproducibility", repro);
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
