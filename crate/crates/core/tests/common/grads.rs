//! Central-difference cases at f64 for every differentiable op, every loss
//! and the full modules.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmd_core::autodiff::{Graph, Var};
use xmd_core::distill::{
    cross_entropy, kl_rows, loss_feat_mse, loss_fskd_total, loss_infonce, loss_sem_kl, lovasz_softmax, KlDirection,
};
use xmd_core::geometry::CorrespondenceMap;
use xmd_core::gradcheck::{grad_check, grad_check_sampled};
use xmd_core::models::{
    DaModule, Extractor2D, Extractor3D, Module, ScConv3d, SharedClassifier, VoxelInput,
};
use xmd_core::optim::Parameter;
use xmd_core::sparse3d::{Coord, Rulebook, VoxelPyramid};
use xmd_core::superpixel::{SuperpixelPartition, SuperpointGroups};
use xmd_core::tensor::Tensor;
use xmd_core::Result;

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product::<usize>();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Scalar `Σ w ⊙ y` with fixed pseudo-random `w`, so every output entry
/// contributes a distinct weight.
fn reduce(g: &Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let n = shape.iter().product::<usize>();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0).collect();
    let w = g.constant(Tensor::from_f64(&shape, &w)?);
    Ok(g.sum(g.mul(y, w)?))
}

/// Collected `(case, max relative error)` pairs.
#[derive(Default)]
pub struct Checks(pub Vec<(String, f64)>);

impl Checks {
    pub fn check<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F)
    where
        F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
    {
        let err = grad_check(f, inputs, EPS).unwrap();
        self.0.push((name.to_string(), err));
    }

    /// Differentiates `forward` with respect to every trainable parameter of
    /// a module by overriding the bound parameter names.
    pub fn module<F>(&mut self, name: &str, params: Vec<&Parameter<f64>>, max_entries: usize, forward: F)
    where
        F: Fn(&Graph<f64>) -> Result<Var>,
    {
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        let values: Vec<Tensor<f64>> = params.iter().map(|p| p.value().clone()).collect();
        let err = grad_check_sampled(
            |g, v| {
                for (n, &var) in names.iter().zip(v) {
                    g.override_param(n, var);
                }
                reduce(g, forward(g)?)
            },
            &values,
            EPS,
            max_entries,
        )
        .unwrap();
        self.0.push((name.to_string(), err));
    }

    pub fn worst(&self) -> (String, f64) {
        self.0
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }

    pub fn assert_within(&self) {
        for (name, err) in &self.0 {
            assert!(*err <= TOL, "{name}: max relative error {err:e}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

pub fn elementwise_ops(c: &mut Checks) {
    let mut r = rng();
    let a = rand_t(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_t(&mut r, &[3, 4], -2.0, 2.0);
    let pos = rand_t(&mut r, &[3, 4], 0.1, 2.0);
    c.check("add", &[a.clone(), b.clone()], |g, v| reduce(g, g.add(v[0], v[1])?));
    c.check("sub", &[a.clone(), b.clone()], |g, v| reduce(g, g.sub(v[0], v[1])?));
    c.check("mul", &[a.clone(), b.clone()], |g, v| reduce(g, g.mul(v[0], v[1])?));
    c.check("scale", &[a.clone()], |g, v| reduce(g, g.scale(v[0], -1.7)));
    c.check("add_scalar", &[a.clone()], |g, v| reduce(g, g.add_scalar(v[0], 0.3)));
    c.check("neg", &[a.clone()], |g, v| reduce(g, g.neg(v[0])));
    c.check("square", &[a.clone()], |g, v| reduce(g, g.square(v[0])));
    c.check("relu", &[a.clone()], |g, v| reduce(g, g.relu(v[0])));
    c.check("sigmoid", &[a.clone()], |g, v| reduce(g, g.sigmoid(v[0])));
    c.check("exp", &[a.clone()], |g, v| reduce(g, g.exp(v[0])));
    c.check("log_floor", &[pos], |g, v| reduce(g, g.log_floor(v[0], 1e-8)));
    c.check("sum", &[a.clone()], |g, v| Ok(g.sum(g.square(v[0]))));
    c.check("mean", &[a], |g, v| Ok(g.mean(g.square(v[0]))));
}

pub fn matrix_ops(c: &mut Checks) {
    let mut r = rng();
    let x = rand_t(&mut r, &[5, 3], -1.0, 1.0);
    let w = rand_t(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut r, &[4], -1.0, 1.0);
    c.check("matmul", &[x.clone(), w.clone()], |g, v| reduce(g, g.matmul(v[0], v[1])?));
    c.check("transpose", &[x.clone()], |g, v| reduce(g, g.transpose(v[0])?));
    c.check("add_bias_rows", &[w.clone(), b.clone()], |g, v| reduce(g, g.add_bias_rows(v[0], v[1])?));
    c.check("linear", &[x.clone(), w, b], |g, v| reduce(g, g.linear(v[0], v[1], v[2])?));
    c.check("softmax_rows", &[x.clone()], |g, v| reduce(g, g.softmax_rows(v[0])?));
    c.check("log_softmax_rows", &[x.clone()], |g, v| reduce(g, g.log_softmax_rows(v[0])?));
    c.check("l2_normalize_rows", &[x.clone()], |g, v| reduce(g, g.l2_normalize_rows(v[0], 1e-12)?));
    c.check("pick_rows", &[x.clone()], |g, v| reduce(g, g.pick_rows(v[0], &[0, 2, 1, 1, 0])?));
    c.check("gather_rows", &[x.clone()], |g, v| reduce(g, g.gather_rows(v[0], &[4, 0, 0, 2])?));
    c.check("gather_rows_or_zero", &[x.clone()], |g, v| {
        reduce(g, g.gather_rows_or_zero(v[0], &[Some(1), None, Some(1), Some(3)])?)
    });
    c.check("segment_mean_rows", &[x.clone()], |g, v| {
        reduce(g, g.segment_mean_rows(v[0], &[Some(0), Some(2), None, Some(0), Some(2)], 3)?)
    });
    let y = rand_t(&mut r, &[5, 2], -1.0, 1.0);
    c.check("concat_cols", &[x.clone(), y], |g, v| reduce(g, g.concat_cols(v[0], v[1])?));
    c.check("slice_cols", &[x.clone()], |g, v| reduce(g, g.slice_cols(v[0], 1, 3)?));
    c.check("reshape", &[x], |g, v| reduce(g, g.reshape(v[0], &[3, 5])?));
}

pub fn image_ops(c: &mut Checks) {
    let mut r = rng();
    let x = rand_t(&mut r, &[2, 6, 8], -1.0, 1.0);
    let w = rand_t(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = rand_t(&mut r, &[3], -0.5, 0.5);
    for stride in [1, 2] {
        c.check("conv2d", &[x.clone(), w.clone(), b.clone()], |g, v| {
            reduce(g, g.conv2d(v[0], v[1], v[2], stride)?)
        });
    }
    let b2 = rand_t(&mut r, &[2], -0.5, 0.5);
    c.check("add_bias_channels", &[x.clone(), b2], |g, v| reduce(g, g.add_bias_channels(v[0], v[1])?));
    c.check("avg_pool2d", &[x.clone()], |g, v| reduce(g, g.avg_pool2d(v[0], 2)?));
    c.check("upsample_bilinear", &[x.clone()], |g, v| reduce(g, g.upsample_bilinear(v[0], 11, 13)?));
    c.check("gather_pixels", &[x.clone()], |g, v| reduce(g, g.gather_pixels(v[0], &[0, 47, 13, 13])?));
    let labels: Vec<usize> = (0..48).map(|p| (p / 5) % 4).collect();
    c.check("segment_mean_pixels", &[x.clone()], |g, v| reduce(g, g.segment_mean_pixels(v[0], &labels, 5)?));
    c.check("pixels_as_rows", &[x], |g, v| reduce(g, g.pixels_as_rows(v[0])?));
}

fn random_sites(rng: &mut ChaCha8Rng, n: usize, side: i32) -> Vec<Coord> {
    let mut set = std::collections::BTreeSet::new();
    while set.len() < n {
        set.insert([0, rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..side)]);
    }
    set.into_iter().collect()
}

pub fn sparse_conv_op(c: &mut Checks) {
    let mut r = rng();
    let sites = random_sites(&mut r, 20, 4);
    let x = rand_t(&mut r, &[20, 3], -1.0, 1.0);
    let w = rand_t(&mut r, &[27, 3, 2], -0.5, 0.5);
    let subm = Rc::new(Rulebook::build(&sites, &sites, 3, 1).unwrap());
    c.check("sparse_conv subm", &[x.clone(), w.clone()], |g, v| reduce(g, g.sparse_conv(v[0], v[1], &subm)?));
    let coarse: Vec<Coord> = {
        let mut s: Vec<Coord> = sites.iter().map(|c| [c[0], c[1] / 2, c[2] / 2, c[3] / 2]).collect();
        s.sort();
        s.dedup();
        s
    };
    let down = Rc::new(Rulebook::build(&sites, &coarse, 3, 2).unwrap());
    c.check("sparse_conv stride 2", &[x, w], |g, v| reduce(g, g.sparse_conv(v[0], v[1], &down)?));
}

fn small_corr() -> CorrespondenceMap {
    CorrespondenceMap {
        uv: vec![[0.2, 0.1], [3.6, 2.4], [f64::NAN, f64::NAN], [1.0, 2.9], [3.2, 0.4]],
        depth: vec![1.0, 2.0, -1.0, 3.0, 1.5],
        valid: vec![true, true, false, true, true],
        width: 4,
        height: 3,
    }
}

pub fn correspondence_and_pooling_ops(c: &mut Checks) {
    let mut r = rng();
    let corr = small_corr();
    let f = rand_t(&mut r, &[2, 3, 4], -1.0, 1.0);
    c.check("sample_image_features", &[f.clone()], |g, v| {
        reduce(g, g.sample_image_features(v[0], &corr, &[0, 1, 3, 4])?)
    });
    let part = SuperpixelPartition {
        labels: vec![0, 0, 1, 1, 0, 2, 2, 1, 3, 3, 2, 2],
        height: 3,
        width: 4,
        segments: 4,
    };
    c.check("pool_pixels", &[f], |g, v| reduce(g, g.pool_pixels(v[0], &part, &[0, 2, 3])?));
    let pts = rand_t(&mut r, &[5, 2], -1.0, 1.0);
    let groups = SuperpointGroups {
        groups: vec![vec![0, 4], vec![], vec![1, 3]],
    };
    c.check("pool_points", &[pts], |g, v| reduce(g, g.pool_points(v[0], &groups, &[0, 2])?));
}

fn prob_rows(g: &Graph<f64>, logits: Var) -> Result<Var> {
    g.softmax_rows(logits)
}

pub fn losses(c: &mut Checks) {
    let mut r = rng();
    let f = rand_t(&mut r, &[6, 4], -1.0, 1.0);
    let h = rand_t(&mut r, &[6, 4], -1.0, 1.0);
    c.check("infonce", &[f.clone(), h.clone()], |g, v| {
        let a = g.l2_normalize_rows(v[0], 1e-12)?;
        let b = g.l2_normalize_rows(v[1], 1e-12)?;
        loss_infonce(g, a, b, 0.07)
    });
    c.check("infonce raw", &[f, h], |g, v| loss_infonce(g, v[0], v[1], 0.5));

    let corr = small_corr();
    let pts = [0usize, 1, 3, 4];
    let gp = rand_t(&mut r, &[5, 2], -1.0, 1.0);
    let fm = rand_t(&mut r, &[2, 3, 4], -1.0, 1.0);
    c.check("feat mse", &[gp.clone(), fm.clone()], |g, v| {
        Ok(loss_feat_mse(g, v[0], v[1], &corr, &pts)?.unwrap())
    });

    let tl = rand_t(&mut r, &[5, 3], -2.0, 2.0);
    let sl = rand_t(&mut r, &[12, 3], -2.0, 2.0);
    for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
        c.check("sem kl", &[tl.clone(), sl.clone()], |g, v| {
            let t = prob_rows(g, v[0])?;
            let s = prob_rows(g, v[1])?;
            Ok(loss_sem_kl(g, t, s, &corr, &pts, dir)?.unwrap())
        });
    }
    c.check("kl rows", &[tl.clone(), tl.clone()], |g, v| {
        let p = prob_rows(g, v[0])?;
        let q = prob_rows(g, g.scale(v[1], 0.5))?;
        kl_rows(g, p, q)
    });
    c.check("fskd total", &[gp, fm, tl.clone(), sl], |g, v| {
        let feat = loss_feat_mse(g, v[0], v[1], &corr, &pts)?;
        let t = prob_rows(g, v[2])?;
        let s = prob_rows(g, v[3])?;
        let sem = loss_sem_kl(g, t, s, &corr, &pts, KlDirection::StudentFirst)?;
        Ok(loss_fskd_total(g, feat, sem, 10.0, 1.0)?.unwrap())
    });

    let labels = [2usize, 0, 1, 1, 2];
    c.check("cross entropy", &[tl.clone()], |g, v| cross_entropy(g, v[0], &labels));
    c.check("lovasz", &[tl], |g, v| {
        let p = prob_rows(g, v[0])?;
        lovasz_softmax(g, p, &labels)
    });
}

fn tiny_cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let mut v = Vec::with_capacity(4 * n);
    for _ in 0..n {
        v.extend([
            rng.random_range(0.0..0.8),
            rng.random_range(0.0..0.8),
            rng.random_range(0.0..0.8),
            rng.random_range(0.0..1.0),
        ]);
    }
    Tensor::from_f64(&[n, 4], &v).unwrap()
}

pub fn self_calibrated_conv_module(c: &mut Checks) {
    let mut r = rng();
    let sites = random_sites(&mut r, 40, 5);
    let pyramid = VoxelPyramid::build(&sites, 2).unwrap();
    let x = rand_t(&mut r, &[40, 4], -1.0, 1.0);
    for identity in [false, true] {
        let layer = ScConv3d::<f64>::new("sc", 4, identity, &mut r).unwrap();
        c.module("scconv params", layer.parameters(), 40, |g| {
            layer.forward(g, g.constant(x.clone()), &pyramid)
        });
        c.check("scconv input", &[x.clone()], |g, v| reduce(g, layer.forward(g, v[0], &pyramid)?));
    }
}

pub fn adapter_and_classifier_modules(c: &mut Checks) {
    let mut r = rng();
    let sites = random_sites(&mut r, 30, 5);
    let pyramid = VoxelPyramid::build(&sites, 2).unwrap();
    let x = rand_t(&mut r, &[30, 6], -1.0, 1.0);
    let da = DaModule::<f64>::new(6, 4, 2, true, 3).unwrap();
    c.module("da", da.parameters(), 30, |g| da.forward_voxels(g, g.constant(x.clone()), &pyramid));
    let d = SharedClassifier::<f64>::new(6, 8, 3, 1, "d");
    c.module("classifier", d.parameters(), 30, |g| d.probs(g, g.constant(x.clone())));
}

pub fn extractor3d_module(c: &mut Checks) {
    let mut r = rng();
    let cloud = tiny_cloud(&mut r, 60);
    let input = VoxelInput::from_cloud(&cloud, 0.1, 0.25).unwrap();
    let h = Extractor3D::<f64>::new(4, 9);
    c.module("extractor3d", h.parameters(), 12, |g| h.forward_points(g, &input));
}

pub fn extractor2d_module(c: &mut Checks) {
    let mut r = rng();
    let image = rand_t(&mut r, &[3, 8, 12], 0.0, 1.0);
    let e = Extractor2D::<f64>::new(4, 5);
    c.module("extractor2d", e.parameters(), 8, |g| e.forward(g, g.constant(image.clone())));
}

pub const GROUPS: [fn(&mut Checks); 10] = [
    elementwise_ops,
    matrix_ops,
    image_ops,
    sparse_conv_op,
    correspondence_and_pooling_ops,
    losses,
    self_calibrated_conv_module,
    adapter_and_classifier_modules,
    extractor3d_module,
    extractor2d_module,
];
