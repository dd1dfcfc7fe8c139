//! Distillation and segmentation losses as graph operations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::geometry::CorrespondenceMap;
use crate::tensor::{Real, Tensor};

/// Floor applied inside logarithms of probabilities.
pub const KL_EPS: f64 = 1e-8;

/// Contrastive loss between paired rows: with `s = g fᵀ / tau`,
/// `-Σ_i log softmax(s_i)_i`. Summed, not averaged, over the `k` pairs.
pub fn loss_infonce<T: Real>(graph: &Graph<T>, f: Var, g: Var, tau: f64) -> Result<Var> {
    let fs = graph.shape(f);
    let gs = graph.shape(g);
    ensure!(fs.len() == 2 && fs == gs, Shape, "paired rows must match: {:?} vs {:?}", fs, gs);
    ensure!(fs[0] >= 2, Argument, "contrastive loss needs at least two pairs, got {}", fs[0]);
    ensure!(tau.is_finite() && tau > 0.0, Argument, "temperature must be positive, got {}", tau);
    let sim = graph.matmul(g, graph.transpose(f)?)?;
    let logits = graph.scale(sim, T::from_f64_lossy(1.0 / tau));
    let lsm = graph.log_softmax_rows(logits)?;
    let diag: Vec<usize> = (0..fs[0]).collect();
    Ok(graph.neg(graph.sum(graph.pick_rows(lsm, &diag)?)))
}

/// Mean over listed points and channels of `(G′ − F(uv))²`, with `F`
/// sampled at each point's nearest pixel. `None` when `points` is empty.
pub fn loss_feat_mse<T: Real>(
    graph: &Graph<T>,
    point_features: Var,
    image_features: Var,
    corr: &CorrespondenceMap,
    points: &[usize],
) -> Result<Option<Var>> {
    if points.is_empty() {
        return Ok(None);
    }
    let gp = graph.gather_rows(point_features, points)?;
    let f = graph.sample_image_features(image_features, corr, points)?;
    let d = graph.sub(gp, f)?;
    Ok(Some(graph.mean(graph.square(d))))
}

/// Which distribution leads the divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(T ‖ S)`: the 3D prediction weights the log-ratio.
    #[default]
    StudentFirst,
    /// `KL(S ‖ T)`. Experimental.
    TeacherFirst,
}

/// `Σ_c p_c (log p_c − log q_c)` averaged over rows, logs floored at
/// [`KL_EPS`].
pub fn kl_rows<T: Real>(graph: &Graph<T>, p: Var, q: Var) -> Result<Var> {
    let eps = T::from_f64_lossy(KL_EPS);
    let ratio = graph.sub(graph.log_floor(p, eps), graph.log_floor(q, eps))?;
    let n = graph.shape(p)[0].max(1);
    let total = graph.sum(graph.mul(p, ratio)?);
    Ok(graph.scale(total, T::from_f64_lossy(1.0 / n as f64)))
}

/// Semantic divergence between per-point 3D predictions `t` (`n x c`) and
/// per-pixel 2D predictions `s` (`hw x c`, row-major pixels), over the
/// listed points. `None` when `points` is empty.
pub fn loss_sem_kl<T: Real>(
    graph: &Graph<T>,
    t: Var,
    s: Var,
    corr: &CorrespondenceMap,
    points: &[usize],
    direction: KlDirection,
) -> Result<Option<Var>> {
    if points.is_empty() {
        return Ok(None);
    }
    let (ts, ss) = (graph.shape(t), graph.shape(s));
    ensure!(ts.len() == 2 && ss.len() == 2 && ts[1] == ss[1], Shape, "class counts differ: {:?} vs {:?}", ts, ss);
    ensure!(ss[0] == corr.width * corr.height, Shape, "{} pixel rows for a {}x{} image", ss[0], corr.height, corr.width);
    let mut pixels = Vec::with_capacity(points.len());
    for &i in points {
        let px = corr
            .pixel_index(i)
            .ok_or_else(|| crate::Error::Index(format!("point {i} is not visible")))?;
        pixels.push(px);
    }
    let tp = graph.gather_rows(t, points)?;
    let sp = graph.gather_rows(s, &pixels)?;
    let kl = match direction {
        KlDirection::StudentFirst => kl_rows(graph, tp, sp)?,
        KlDirection::TeacherFirst => kl_rows(graph, sp, tp)?,
    };
    Ok(Some(kl))
}

/// `a · feat + b · sem`; a missing term contributes nothing.
pub fn loss_fskd_total<T: Real>(graph: &Graph<T>, feat: Option<Var>, sem: Option<Var>, a: f64, b: f64) -> Result<Option<Var>> {
    ensure!(a >= 0.0 && b >= 0.0, Argument, "loss weights must be non-negative");
    let fa = feat.map(|f| graph.scale(f, T::from_f64_lossy(a)));
    let sb = sem.map(|s| graph.scale(s, T::from_f64_lossy(b)));
    Ok(match (fa, sb) {
        (Some(x), Some(y)) => Some(graph.add(x, y)?),
        (x, y) => x.or(y),
    })
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy<T: Real>(graph: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    ensure!(!labels.is_empty(), Argument, "cross-entropy over zero rows");
    let lsm = graph.log_softmax_rows(logits)?;
    let picked = graph.pick_rows(lsm, labels)?;
    Ok(graph.neg(graph.mean(picked)))
}

/// Gradient of the Lovász extension of the Jaccard loss at a sorted
/// ground-truth indicator.
pub fn lovasz_grad(sorted_fg: &[f64]) -> Vec<f64> {
    let gts: f64 = sorted_fg.iter().sum();
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut jac = Vec::with_capacity(sorted_fg.len());
    for &f in sorted_fg {
        cum_fg += f;
        cum_bg += 1.0 - f;
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        jac.push(1.0 - inter / union);
    }
    for i in (1..jac.len()).rev() {
        jac[i] -= jac[i - 1];
    }
    jac
}

/// Lovász-softmax over rows of `probs` (`m x c`), averaged over the classes
/// present in `labels`.
pub fn lovasz_softmax<T: Real>(graph: &Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let pv = graph.value(probs);
    let (m, c) = pv.dims2()?;
    ensure!(labels.len() == m, Shape, "{} labels for {} rows", labels.len(), m);
    ensure!(m > 0, Argument, "Lovász loss over zero rows");
    for &l in labels {
        ensure!(l < c, Index, "label {} out of {} classes", l, c);
    }
    let mut present = vec![false; c];
    for &l in labels {
        present[l] = true;
    }
    let classes: Vec<usize> = (0..c).filter(|&k| present[k]).collect();
    let inv = 1.0 / classes.len() as f64;
    let mut loss = 0.0;
    // d loss / d probs, fixed by the sort order at this point.
    let mut dprobs = vec![0.0f64; m * c];
    let mut order: Vec<usize> = (0..m).collect();
    for &k in &classes {
        let err: Vec<f64> = (0..m)
            .map(|i| {
                let p = pv.data()[i * c + k].as_f64();
                if labels[i] == k {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        let fg: Vec<f64> = order.iter().map(|&i| (labels[i] == k) as u8 as f64).collect();
        let grad = lovasz_grad(&fg);
        for (r, &i) in order.iter().enumerate() {
            loss += inv * err[i] * grad[r];
            let sign = if labels[i] == k { -1.0 } else { 1.0 };
            dprobs[i * c + k] += inv * sign * grad[r];
        }
    }
    let dprobs: Vec<T> = dprobs.into_iter().map(T::from_f64_lossy).collect();
    Ok(graph.push(Tensor::scalar(T::from_f64_lossy(loss)), &[probs], move |grad, sink| {
        let go = grad.data()[0];
        sink.accumulate(probs, |g| {
            for (gi, &d) in g.iter_mut().zip(&dprobs) {
                *gi += go * d;
            }
        });
    }))
}
