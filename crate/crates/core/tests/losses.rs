//! Closed-form values and invariants of the losses and metrics.

use proptest::prelude::*;
use xmd_core::autodiff::Graph;
use xmd_core::distill::{
    cross_entropy, kl_rows, loss_feat_mse, loss_fskd_total, loss_infonce, loss_sem_kl, lovasz_softmax, KlDirection,
    KL_EPS,
};
use xmd_core::eval::{miou, ConfusionMatrix};
use xmd_core::geometry::CorrespondenceMap;
use xmd_core::tensor::Tensor;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn scalar(g: &Graph<f64>, v: xmd_core::autodiff::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn infonce_orthonormal_pair() {
    let tau = 0.07;
    let g = Graph::new();
    let e = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let l = scalar(&g, loss_infonce(&g, e, e, tau).unwrap());
    let want = 2.0 * (1.0 + (-1.0f64 / tau).exp()).ln();
    assert!((l - want).abs() <= 1e-9, "{l} vs {want}");
}

#[test]
fn infonce_matches_direct_sum() {
    let f = [0.3, -0.2, 0.9, 0.1, -0.5, 0.4];
    let h = [0.7, 0.1, -0.3, 0.8, 0.2, -0.6];
    let tau = 0.5;
    let g = Graph::new();
    let l = scalar(
        &g,
        loss_infonce(&g, g.constant(t(&[3, 2], &f)), g.constant(t(&[3, 2], &h)), tau).unwrap(),
    );
    let mut want = 0.0;
    for i in 0..3 {
        let s: Vec<f64> = (0..3).map(|j| (h[2 * i] * f[2 * j] + h[2 * i + 1] * f[2 * j + 1]) / tau).collect();
        let lse = s.iter().map(|x| x.exp()).sum::<f64>().ln();
        want += lse - s[i];
    }
    assert!((l - want).abs() <= 1e-12);
}

#[test]
fn infonce_needs_two_pairs() {
    let g = Graph::new();
    let e = g.constant(t(&[1, 2], &[1.0, 0.0]));
    assert!(matches!(loss_infonce(&g, e, e, 0.07), Err(xmd_core::Error::Argument(_))));
}

#[test]
fn kl_one_hot_vs_uniform() {
    let g = Graph::new();
    let mut p = vec![0.0; 8];
    p[3] = 1.0;
    let kl = kl_rows(&g, g.constant(t(&[1, 8], &p)), g.constant(t(&[1, 8], &[0.125; 8]))).unwrap();
    assert!((scalar(&g, kl) - 8f64.ln()).abs() <= 1e-9);
}

fn corr_2x2() -> CorrespondenceMap {
    CorrespondenceMap {
        uv: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        depth: vec![1.0; 3],
        valid: vec![true; 3],
        width: 2,
        height: 2,
    }
}

#[test]
fn zero_cases() {
    let g = Graph::new();
    let corr = corr_2x2();
    // Feature map whose pixels equal the point rows exactly.
    let fm = g.constant(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 0.0, -1.0, 0.5, 4.0, 0.0]));
    let pts = g.constant(t(&[3, 2], &[1.0, -1.0, 2.0, 0.5, 3.0, 4.0]));
    let mse = loss_feat_mse(&g, pts, fm, &corr, &[0, 1, 2]).unwrap().unwrap();
    assert_eq!(scalar(&g, mse), 0.0);

    let p = t(&[3, 3], &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.6, 0.3, 0.1]);
    let kl = kl_rows(&g, g.constant(p.clone()), g.constant(p.clone())).unwrap();
    assert!(scalar(&g, kl).abs() <= 1e-7);

    let s = t(&[4, 3], &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.6, 0.3, 0.1, 0.3, 0.3, 0.4]);
    for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
        let kl = loss_sem_kl(&g, g.constant(p.clone()), g.constant(s.clone()), &corr, &[0, 1, 2], dir)
            .unwrap()
            .unwrap();
        assert!(scalar(&g, kl).abs() <= 1e-7);
    }

    let one_hot = t(&[3, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let lv = lovasz_softmax(&g, g.constant(one_hot), &[1, 0, 2]).unwrap();
    assert_eq!(scalar(&g, lv), 0.0);
}

#[test]
fn empty_point_sets_give_no_term() {
    let g = Graph::new();
    let corr = corr_2x2();
    let fm = g.constant(Tensor::zeros(&[2, 2, 2]));
    let pts = g.constant(Tensor::zeros(&[3, 2]));
    assert!(loss_feat_mse(&g, pts, fm, &corr, &[]).unwrap().is_none());
    let total = loss_fskd_total::<f64>(&g, None, None, 10.0, 1.0).unwrap();
    assert!(total.is_none());
    let one = g.constant(Tensor::scalar(2.0));
    let only_sem = loss_fskd_total(&g, None, Some(one), 10.0, 3.0).unwrap().unwrap();
    assert_eq!(scalar(&g, only_sem), 6.0);
}

#[test]
fn fskd_total_is_weighted_sum() {
    let g = Graph::new();
    let f = g.constant(Tensor::scalar(0.25));
    let s = g.constant(Tensor::scalar(1.5));
    let l = loss_fskd_total(&g, Some(f), Some(s), 10.0, 1.0).unwrap().unwrap();
    assert_eq!(scalar(&g, l), 4.0);
    assert!(loss_fskd_total(&g, Some(f), Some(s), -1.0, 1.0).is_err());
}

#[test]
fn kl_floors_zero_teacher_mass() {
    let g = Graph::new();
    let p = g.constant(t(&[1, 2], &[0.5, 0.5]));
    let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
    let kl = scalar(&g, kl_rows(&g, p, q).unwrap());
    let want = 0.5 * (0.5f64.ln() - 0.0) + 0.5 * (0.5f64.ln() - KL_EPS.ln());
    assert!((kl - want).abs() <= 1e-12);
}

#[test]
fn cross_entropy_uniform_logits() {
    let g = Graph::new();
    let ce = cross_entropy(&g, g.constant(Tensor::zeros(&[4, 5])), &[0, 1, 2, 4]).unwrap();
    assert!((scalar(&g, ce) - 5f64.ln()).abs() <= 1e-12);
}

/// Jaccard loss of mispredicted set `m` for class members `fg`:
/// `|m| / |fg ∪ m|`.
fn jaccard_loss(fg: &[bool], m: &[bool]) -> f64 {
    let miss = m.iter().filter(|&&b| b).count() as f64;
    let union = fg.iter().zip(m).filter(|(&a, &b)| a || b).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        miss / union
    }
}

/// Lovász extension evaluated from its definition: errors sorted in
/// decreasing order, each weighted by the Jaccard-loss increment.
fn lovasz_reference(probs: &[f64], c: usize, labels: &[usize]) -> f64 {
    let m = labels.len();
    let present: Vec<usize> = (0..c).filter(|k| labels.contains(k)).collect();
    let mut total = 0.0;
    for &k in &present {
        let fg: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let err: Vec<f64> = (0..m).map(|i| if fg[i] { 1.0 - probs[i * c + k] } else { probs[i * c + k] }).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| err[b].partial_cmp(&err[a]).unwrap());
        let mut set = vec![false; m];
        let mut prev = 0.0;
        for &i in &order {
            set[i] = true;
            let cur = jaccard_loss(&fg, &set);
            total += err[i] * (cur - prev);
            prev = cur;
        }
    }
    total / present.len() as f64
}

#[test]
fn lovasz_hand_case() {
    // Hard predictions [0, 0, 1, 1] against labels [0, 1, 1, 1]: class 0
    // IoU 1/2, class 1 IoU 2/3, so the loss is 1 - (1/2 + 2/3) / 2.
    let probs = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
    let g = Graph::new();
    let l = scalar(&g, lovasz_softmax(&g, g.constant(t(&[4, 2], &probs)), &[0, 1, 1, 1]).unwrap());
    let want = 1.0 - (0.5 + 2.0 / 3.0) / 2.0;
    assert!((l - want).abs() <= 1e-12, "{l} vs {want}");
}

#[test]
fn miou_hand_case() {
    // truth 0 0 1 1 2 2 ; pred 0 1 1 1 2 0
    // class 0: tp 1, fp 1, fn 1 -> 1/3 ; class 1: tp 2, fp 1 -> 2/3 ; class 2: tp 1, fn 1 -> 1/2
    let r = miou(&[0, 1, 1, 1, 2, 0], &[0, 0, 1, 1, 2, 2], 4).unwrap();
    let want = (1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3.0;
    assert!((r.miou - want).abs() <= 1e-12);
    assert_eq!(r.per_class[3], None);
    assert_eq!(r.points, 6);
}

#[test]
fn confusion_skips_negative_labels() {
    let mut cm = ConfusionMatrix::new(3);
    cm.add_all(&[0, 1, 2], &[0, -1, 2]).unwrap();
    assert_eq!(cm.total(), 2);
    assert_eq!(cm.miou(), 1.0);
    assert!(cm.add(3, 0).is_err());
}

fn simplex_rows(rows: usize, c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, rows * c).prop_map(move |mut v| {
        for r in v.chunks_mut(c) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lovasz_matches_definition(
        probs in simplex_rows(7, 3),
        labels in prop::collection::vec(0usize..3, 7),
    ) {
        let g = Graph::new();
        let l = scalar(&g, lovasz_softmax(&g, g.constant(t(&[7, 3], &probs)), &labels).unwrap());
        prop_assert!((l - lovasz_reference(&probs, 3, &labels)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn kl_is_non_negative(p in simplex_rows(4, 5), q in simplex_rows(4, 5)) {
        let g = Graph::new();
        let kl = scalar(&g, kl_rows(&g, g.constant(t(&[4, 5], &p)), g.constant(t(&[4, 5], &q))).unwrap());
        prop_assert!(kl >= -1e-12);
    }

    /// The matched pair is the most similar, so InfoNCE on identical
    /// normalised rows never exceeds `k log k`.
    #[test]
    fn infonce_identical_rows_bounded(v in prop::collection::vec(-1.0f64..1.0, 12), tau in 0.05f64..2.0) {
        let g = Graph::new();
        let x = g.l2_normalize_rows(g.constant(t(&[4, 3], &v)), 1e-12).unwrap();
        let l = scalar(&g, loss_infonce(&g, x, x, tau).unwrap());
        prop_assert!(l >= 0.0);
        prop_assert!(l <= 4.0 * 4f64.ln() + 1e-9);
    }

    #[test]
    fn miou_in_unit_interval(
        preds in prop::collection::vec(0usize..4, 1..40),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = preds.iter().enumerate().map(|(i, &p)| ((seed >> (i % 60)) as usize + p) % 4).collect();
        let r = miou(&preds, &labels, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        prop_assert_eq!(miou(&labels, &labels, 4).unwrap().miou, 1.0);
        prop_assert_eq!(r.miou == 1.0, preds == labels);
    }
}
