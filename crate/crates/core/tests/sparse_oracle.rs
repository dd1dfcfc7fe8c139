//! Sparse convolution against a dense zero-padded 3D convolution.

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmd_core::autodiff::Graph;
use xmd_core::models::ScConv3d;
use xmd_core::sparse3d::{sparse_conv, Coord, Rulebook, SparseTensor3D, VoxelPyramid};

mod common;
use common::dense::*;
use xmd_core::tensor::Tensor;

#[test]
fn full_grids_match_dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for side in 1..=6 {
        for _ in 0..20 {
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(1..4);
            let input = random_dense(&mut rng, side, cin);
            let w: Vec<f64> = (0..27 * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt = Tensor::new(vec![27, cin, cout], w.clone()).unwrap();
            let sparse = to_sparse(&input, &full_sites(side));
            for stride in [1, 2] {
                let want = dense_conv(&input, &w, cout, stride);
                let got = sparse_conv(&sparse, &wt, stride as u32).unwrap();
                assert_eq!(got.coords.len(), (want.side * want.side * want.side) as usize);
                assert_eq!(got.stride, stride as u32);
                let err = max_diff_against(&got, &want);
                assert!(err <= 1e-10, "side {side} stride {stride}: {err:e}");
            }
        }
    }
}

#[test]
fn graph_op_equals_standalone_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sites = full_sites(4);
    let input = random_dense(&mut rng, 4, 3);
    let w: Vec<f64> = (0..27 * 3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wt = Tensor::new(vec![27, 3, 2], w).unwrap();
    let st = to_sparse(&input, &sites);
    let want = sparse_conv(&st, &wt, 1).unwrap();
    let g = Graph::new();
    let rb = Rc::new(Rulebook::build(&sites, &sites, 3, 1).unwrap());
    let y = g.sparse_conv(g.constant(st.features.clone()), g.constant(wt), &rb).unwrap();
    assert_eq!(g.value(y).data(), want.features.data());
}

/// Dense reference of the self-calibrated layer on a fully occupied grid of
/// even side: mean-pool by 2, conv on the coarse grid, nearest upsample.
fn dense_scconv(x: &Dense, layer: &ScConv3d<f64>) -> Dense {
    let h = x.c / 2;
    let side = x.side;
    let split = |lo: usize| {
        let mut d = Dense::zeros(side, h);
        for (dst, src) in d.data.chunks_mut(h).zip(x.data.chunks(x.c)) {
            dst.copy_from_slice(&src[lo..lo + h]);
        }
        d
    };
    let (x1, x2) = (split(0), split(h));
    let w = |c: &xmd_core::models::SparseConv<f64>| c.weight.value().data().to_vec();

    let cs = side / 2;
    let mut pooled = Dense::zeros(cs, h);
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let v = x1.at(x, y, z).unwrap().to_vec();
                let p = pooled.at_mut(x / 2, y / 2, z / 2);
                for (a, b) in p.iter_mut().zip(&v) {
                    *a += b / 8.0;
                }
            }
        }
    }
    let t = dense_conv(&pooled, &w(&layer.k2), h, 1);
    let k3 = dense_conv(&x1, &w(&layer.k3), h, 1);
    let mut gated = Dense::zeros(side, h);
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                let a = t.at(x / 2, y / 2, z / 2).unwrap().to_vec();
                let xv = x1.at(x, y, z).unwrap().to_vec();
                let kv = k3.at(x, y, z).unwrap().to_vec();
                let o = gated.at_mut(x, y, z);
                for i in 0..h {
                    o[i] = kv[i] / (1.0 + (-(xv[i] + a[i])).exp());
                }
            }
        }
    }
    let y1 = dense_conv(&gated, &w(&layer.k4), h, 1);
    let y2 = dense_conv(&x2, &w(&layer.k1), h, 1);
    let mut out = Dense::zeros(side, x.c);
    for ((o, a), b) in out.data.chunks_mut(x.c).zip(y1.data.chunks(h)).zip(y2.data.chunks(h)) {
        for i in 0..h {
            o[i] = a[i].max(0.0);
            o[h + i] = b[i].max(0.0);
        }
    }
    out
}

#[test]
fn self_calibrated_conv_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for side in [2, 4, 6] {
        for identity in [false, true] {
            let layer = ScConv3d::<f64>::new("sc", 6, identity, &mut rng).unwrap();
            let x = random_dense(&mut rng, side, 6);
            let sites = full_sites(side);
            let pyramid = VoxelPyramid::build(&sites, 2).unwrap();
            let st = to_sparse(&x, &sites);
            let g = Graph::new();
            let y = layer.forward(&g, g.constant(st.features.clone()), &pyramid).unwrap();
            let got = SparseTensor3D::new(sites.clone(), (*g.value(y)).clone(), 1).unwrap();
            let want = dense_scconv(&x, &layer);
            let err = max_diff_against(&got, &want);
            assert!(err <= 1e-10, "side {side}: {err:e}");
        }
    }
}

fn occupancy() -> impl Strategy<Value = (Vec<bool>, u64)> {
    (prop::collection::vec(any::<bool>(), 64), any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// On a partially occupied 4^3 grid, sparse output equals the dense
    /// convolution of the zero-filled volume at every occupied site.
    #[test]
    fn partial_occupancy_matches_masked_dense((mask, seed) in occupancy()) {
        prop_assume!(mask.iter().any(|&b| b));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = random_dense(&mut rng, 4, 2);
        let sites: Vec<Coord> = full_sites(4)
            .into_iter()
            .zip(&mask)
            .filter_map(|(s, &m)| m.then_some(s))
            .collect();
        for (s, &m) in full_sites(4).iter().zip(&mask) {
            if !m {
                input.at_mut(s[1], s[2], s[3]).fill(0.0);
            }
        }
        let w: Vec<f64> = (0..27 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = Tensor::new(vec![27, 2, 3], w.clone()).unwrap();
        let got = sparse_conv(&to_sparse(&input, &sites), &wt, 1).unwrap();
        prop_assert_eq!(&got.coords, &sites);
        let want = dense_conv(&input, &w, 3, 1);
        prop_assert!(max_diff_against(&got, &want) <= 1e-10);
    }

    /// Rulebook pairs are symmetric for submanifold convolution: offset `d`
    /// pairs `(i, o)` iff offset `-d` pairs `(o, i)`.
    #[test]
    fn submanifold_rulebook_is_symmetric((mask, _seed) in occupancy()) {
        let sites: Vec<Coord> = full_sites(4)
            .into_iter()
            .zip(&mask)
            .filter_map(|(s, &m)| m.then_some(s))
            .collect();
        prop_assume!(!sites.is_empty());
        let rb = Rulebook::build(&sites, &sites, 3, 1).unwrap();
        for t in 0..27 {
            let mut fwd: Vec<(usize, usize)> = rb.offsets[t].inputs.iter().copied().zip(rb.offsets[t].outputs.iter().copied()).collect();
            let mut back: Vec<(usize, usize)> = rb.offsets[26 - t].outputs.iter().copied().zip(rb.offsets[26 - t].inputs.iter().copied()).collect();
            fwd.sort_unstable();
            back.sort_unstable();
            prop_assert_eq!(fwd, back);
        }
        prop_assert!(rb.offsets[13].identity);
    }
}
