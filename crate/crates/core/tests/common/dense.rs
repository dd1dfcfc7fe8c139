//! Dense zero-padded 3D convolution used as the sparse oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xmd_core::sparse3d::{Coord, SparseTensor3D};
use xmd_core::tensor::Tensor;

/// Dense volume `side^3 x c`, indexed `((x * side + y) * side + z) * c + ch`.
pub struct Dense {
    pub side: i32,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(side: i32, c: usize) -> Self {
        Self { side, c, data: vec![0.0; (side * side * side) as usize * c] }
    }

    pub fn at(&self, x: i32, y: i32, z: i32) -> Option<&[f64]> {
        let s = self.side;
        if x < 0 || y < 0 || z < 0 || x >= s || y >= s || z >= s {
            return None;
        }
        let i = (((x * s + y) * s + z) as usize) * self.c;
        Some(&self.data[i..i + self.c])
    }

    pub fn at_mut(&mut self, x: i32, y: i32, z: i32) -> &mut [f64] {
        let s = self.side;
        let i = (((x * s + y) * s + z) as usize) * self.c;
        &mut self.data[i..i + self.c]
    }
}

/// `out[o] = Σ_{d ∈ {-1,0,1}^3} W[d] · in[stride * o + d]` with zero padding;
/// the tap of offset `d` is `(dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)`.
pub fn dense_conv(input: &Dense, w: &[f64], cout: usize, stride: i32) -> Dense {
    let cin = input.c;
    let out_side = (input.side + stride - 1) / stride;
    let mut out = Dense::zeros(out_side, cout);
    for x in 0..out_side {
        for y in 0..out_side {
            for z in 0..out_side {
                let mut acc = vec![0.0; cout];
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let tap = ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize;
                            if let Some(v) = input.at(stride * x + dx, stride * y + dy, stride * z + dz) {
                                for (i, &vi) in v.iter().enumerate() {
                                    for (o, a) in acc.iter_mut().enumerate() {
                                        *a += vi * w[(tap * cin + i) * cout + o];
                                    }
                                }
                            }
                        }
                    }
                }
                out.at_mut(x, y, z).copy_from_slice(&acc);
            }
        }
    }
    out
}

pub fn random_dense(rng: &mut ChaCha8Rng, side: i32, c: usize) -> Dense {
    let mut d = Dense::zeros(side, c);
    d.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    d
}

pub fn full_sites(side: i32) -> Vec<Coord> {
    let mut v = Vec::new();
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                v.push([0, x, y, z]);
            }
        }
    }
    v
}

pub fn to_sparse(d: &Dense, sites: &[Coord]) -> SparseTensor3D<f64> {
    let mut rows = Vec::with_capacity(sites.len() * d.c);
    for s in sites {
        rows.extend_from_slice(d.at(s[1], s[2], s[3]).unwrap());
    }
    SparseTensor3D::new(sites.to_vec(), Tensor::new(vec![sites.len(), d.c], rows).unwrap(), 1).unwrap()
}

pub fn max_diff_against(out: &SparseTensor3D<f64>, dense: &Dense) -> f64 {
    let mut worst = 0.0f64;
    for (s, row) in out.coords.iter().zip(out.features.data().chunks(dense.c)) {
        let want = dense.at(s[1], s[2], s[3]).unwrap();
        for (a, b) in row.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

