//! Sparse voxel tensors and the convolution, pooling, and upsampling
//! primitives of the 3D extractor and the domain-adaptation module.
//!
//! Coordinates are stored in the units of their own level: a tensor produced by
//! a stride-2 convolution or an `r`-pooling carries `floor(coord / r)` sites and
//! records the cumulative factor in [`SparseTensor3D::stride`].
//!
//! Neighbour lookups go through a hash map keyed on `(batch, x, y, z)`. The
//! pairs of (input row, output row) touched by every kernel offset are
//! collected once into a [`Rulebook`] and reused by every layer that shares
//! the same site sets. Kernel offsets are enumerated in lexicographic
//! `(dx, dy, dz)` order so accumulation order is fixed.

use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

/// Voxel site `(batch, x, y, z)`.
pub type Coord = [i32; 4];

/// Sites plus one feature row per site.
#[derive(Clone, Debug)]
pub struct SparseTensor3D<T: Real> {
    pub coords: Vec<Coord>,
    pub features: Tensor<T>,
    pub stride: u32,
}

impl<T: Real> SparseTensor3D<T> {
    pub fn new(coords: Vec<Coord>, features: Tensor<T>, stride: u32) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        ensure!(
            rows == coords.len(),
            Shape,
            "{} feature rows for {} sites",
            rows,
            coords.len()
        );
        ensure!(stride >= 1, Argument, "stride must be positive");
        let index = site_index(&coords);
        ensure!(index.len() == coords.len(), Argument, "duplicate voxel sites");
        Ok(Self {
            coords,
            features,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Per-point voxel row, linking a cloud to its voxelization.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    pub point_rows: Vec<usize>,
    pub voxel_size: f64,
}

pub fn site_index(coords: &[Coord]) -> HashMap<Coord, usize> {
    coords.iter().enumerate().map(|(i, &c)| (c, i)).collect()
}

fn voxel_coord(x: f64, y: f64, z: f64, size: f64) -> Coord {
    [
        0,
        (x / size).floor() as i32,
        (y / size).floor() as i32,
        (z / size).floor() as i32,
    ]
}

/// Quantizes an `n x d` cloud (`x, y, z`, then features) into voxels.
///
/// Voxel rows are sorted by coordinate. Each voxel carries the mean of the
/// feature columns `3..d` of its points.
pub fn voxelize<T: Real>(cloud: &Tensor<T>, voxel_size: f64) -> Result<(SparseTensor3D<T>, VoxelMap)> {
    let (n, d) = cloud.dims2()?;
    ensure!(n > 0, Argument, "cannot voxelize an empty cloud");
    ensure!(d >= 3, Shape, "cloud needs at least x, y, z columns, got {}", d);
    ensure!(voxel_size > 0.0, Argument, "voxel size must be positive");
    let pts = cloud.data();
    let point_coords: Vec<Coord> = pts
        .chunks(d)
        .map(|p| voxel_coord(p[0].as_f64(), p[1].as_f64(), p[2].as_f64(), voxel_size))
        .collect();
    let mut coords = point_coords.clone();
    coords.sort_unstable();
    coords.dedup();
    let index = site_index(&coords);
    let point_rows: Vec<usize> = point_coords.iter().map(|c| index[c]).collect();

    let c = d - 3;
    let mut feats = vec![T::zero(); coords.len() * c];
    let mut counts = vec![0usize; coords.len()];
    for (p, &row) in pts.chunks(d).zip(&point_rows) {
        counts[row] += 1;
        for (f, &v) in feats[row * c..(row + 1) * c].iter_mut().zip(&p[3..]) {
            *f += v;
        }
    }
    for (row, &k) in feats.chunks_mut(c.max(1)).zip(&counts) {
        if c > 0 {
            let inv = T::one() / T::from_usize(k).unwrap();
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    let features = Tensor::new(vec![coords.len(), c], feats)?;
    Ok((
        SparseTensor3D {
            coords,
            features,
            stride: 1,
        },
        VoxelMap {
            point_rows,
            voxel_size,
        },
    ))
}

/// Unique `floor(coord / r)` parents (sorted) and each child's parent row.
pub fn downsample_coords(coords: &[Coord], r: i32) -> (Vec<Coord>, Vec<usize>) {
    let parent_of = |c: &Coord| {
        [
            c[0],
            c[1].div_euclid(r),
            c[2].div_euclid(r),
            c[3].div_euclid(r),
        ]
    };
    let mut parents: Vec<Coord> = coords.iter().map(parent_of).collect();
    parents.sort_unstable();
    parents.dedup();
    let index = site_index(&parents);
    let map = coords.iter().map(|c| index[&parent_of(c)]).collect();
    (parents, map)
}

/// Input/output row pairs of one kernel offset.
#[derive(Clone, Debug, Default)]
pub struct OffsetPairs {
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
    /// Pairs are exactly `(i, i)` for every row; gathers can be skipped.
    pub identity: bool,
}

/// Precomputed neighbour pairs for a sparse convolution.
#[derive(Clone, Debug)]
pub struct Rulebook {
    pub kernel: usize,
    pub stride: i32,
    pub n_in: usize,
    pub n_out: usize,
    pub offsets: Vec<OffsetPairs>,
}

impl Rulebook {
    /// Pairs for output sites `out_coords` reading input sites at
    /// `site * stride + offset`.
    pub fn build(
        in_coords: &[Coord],
        out_coords: &[Coord],
        kernel: usize,
        stride: i32,
    ) -> Result<Self> {
        ensure!(kernel % 2 == 1, Argument, "kernel size must be odd, got {}", kernel);
        ensure!(stride >= 1, Argument, "stride must be positive");
        let index = site_index(in_coords);
        let half = (kernel / 2) as i32;
        let mut offsets = Vec::with_capacity(kernel.pow(3));
        for dx in -half..=half {
            for dy in -half..=half {
                for dz in -half..=half {
                    let mut pairs = OffsetPairs::default();
                    for (o, c) in out_coords.iter().enumerate() {
                        let src = [
                            c[0],
                            c[1] * stride + dx,
                            c[2] * stride + dy,
                            c[3] * stride + dz,
                        ];
                        if let Some(&i) = index.get(&src) {
                            pairs.inputs.push(i);
                            pairs.outputs.push(o);
                        }
                    }
                    pairs.identity = pairs.inputs.len() == in_coords.len()
                        && in_coords.len() == out_coords.len()
                        && pairs.inputs.iter().enumerate().all(|(k, &i)| i == k)
                        && pairs.outputs.iter().enumerate().all(|(k, &o)| o == k);
                    offsets.push(pairs);
                }
            }
        }
        Ok(Self {
            kernel,
            stride,
            n_in: in_coords.len(),
            n_out: out_coords.len(),
            offsets,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.offsets.iter().map(|o| o.inputs.len()).sum()
    }
}

fn gather<T: Real>(src: &[T], rows: &[usize], c: usize, dst: &mut Vec<T>) {
    dst.clear();
    dst.reserve(rows.len() * c);
    for &r in rows {
        dst.extend_from_slice(&src[r * c..(r + 1) * c]);
    }
}

fn scatter_add<T: Real>(dst: &mut [T], rows: &[usize], c: usize, src: &[T]) {
    for (&r, row) in rows.iter().zip(src.chunks(c)) {
        for (d, &v) in dst[r * c..(r + 1) * c].iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// `out = sum_k scatter(gather(x, in_k) * W_k, out_k)`; `x` is `n_in x cin`,
/// `weights` is `k^3 x cin x cout` flattened.
fn conv_forward<T: Real>(x: &[T], weights: &[T], rb: &Rulebook, cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rb.n_out * cout];
    let mut buf_in = Vec::new();
    let mut buf_out = Vec::new();
    for (k, pairs) in rb.offsets.iter().enumerate() {
        let p = pairs.inputs.len();
        if p == 0 {
            continue;
        }
        let w = &weights[k * cin * cout..(k + 1) * cin * cout];
        if pairs.identity {
            T::gemm(
                p, cin, cout, T::one(), x, cin as isize, 1, w, cout as isize, 1, T::one(),
                &mut out, cout as isize, 1,
            );
            continue;
        }
        gather(x, &pairs.inputs, cin, &mut buf_in);
        buf_out.clear();
        buf_out.resize(p * cout, T::zero());
        T::gemm(
            p, cin, cout, T::one(), &buf_in, cin as isize, 1, w, cout as isize, 1, T::zero(),
            &mut buf_out, cout as isize, 1,
        );
        scatter_add(&mut out, &pairs.outputs, cout, &buf_out);
    }
    out
}

/// Sparse convolution on a standalone tensor.
///
/// `weights` is `k^3 x cin x cout`. With `stride == 1` the output sites are the
/// input sites; with `stride == 2` they are the unique `floor(coord / 2)`.
pub fn sparse_conv<T: Real>(
    st: &SparseTensor3D<T>,
    weights: &Tensor<T>,
    stride: u32,
) -> Result<SparseTensor3D<T>> {
    let (kv, cin, cout) = conv_weight_dims(weights)?;
    ensure!(
        cin == st.channels(),
        Shape,
        "weights expect {} input channels, tensor has {}",
        cin,
        st.channels()
    );
    let k = kernel_side(kv)?;
    let out_coords = if stride == 1 {
        st.coords.clone()
    } else {
        downsample_coords(&st.coords, stride as i32).0
    };
    let rb = Rulebook::build(&st.coords, &out_coords, k, stride as i32)?;
    let out = conv_forward(st.features.data(), weights.data(), &rb, cin, cout);
    Ok(SparseTensor3D {
        features: Tensor::new(vec![out_coords.len(), cout], out)?,
        coords: out_coords,
        stride: st.stride * stride,
    })
}

fn conv_weight_dims<T: Real>(w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    ensure!(
        w.shape().len() == 3,
        Shape,
        "sparse conv weights must be k^3 x cin x cout, got {:?}",
        w.shape()
    );
    Ok((w.shape()[0], w.shape()[1], w.shape()[2]))
}

fn kernel_side(volume: usize) -> Result<usize> {
    let k = (volume as f64).cbrt().round() as usize;
    ensure!(
        k * k * k == volume && k % 2 == 1,
        Shape,
        "kernel volume {} is not an odd cube",
        volume
    );
    Ok(k)
}

/// Mean of occupied children per `floor(coord / r)` parent.
pub fn sparse_avg_pool<T: Real>(st: &SparseTensor3D<T>, r: u32) -> Result<SparseTensor3D<T>> {
    ensure!(r >= 2, Argument, "pooling factor must be at least 2, got {}", r);
    let (parents, map) = downsample_coords(&st.coords, r as i32);
    let g = Graph::new();
    let x = g.constant(st.features.clone());
    let seg: Vec<Option<usize>> = map.into_iter().map(Some).collect();
    let y = g.segment_mean_rows(x, &seg, parents.len())?;
    let features = (*g.value(y)).clone();
    Ok(SparseTensor3D {
        coords: parents,
        features,
        stride: st.stride * r,
    })
}

/// Parent row (in `coarse`) of each target site, if present.
pub fn parent_rows(coarse: &[Coord], targets: &[Coord], r: i32) -> Vec<Option<usize>> {
    let index = site_index(coarse);
    targets
        .iter()
        .map(|c| {
            let p = [
                c[0],
                c[1].div_euclid(r),
                c[2].div_euclid(r),
                c[3].div_euclid(r),
            ];
            index.get(&p).copied()
        })
        .collect()
}

/// Copies each parent's feature to its children at `target_coords`; targets
/// without a parent receive zeros.
pub fn sparse_upsample_nearest<T: Real>(
    coarse: &SparseTensor3D<T>,
    target_coords: &[Coord],
    r: u32,
) -> Result<SparseTensor3D<T>> {
    ensure!(r >= 1, Argument, "upsampling factor must be positive");
    let rows = parent_rows(&coarse.coords, target_coords, r as i32);
    let g = Graph::new();
    let x = g.constant(coarse.features.clone());
    let y = g.gather_rows_or_zero(x, &rows)?;
    Ok(SparseTensor3D {
        coords: target_coords.to_vec(),
        features: (*g.value(y)).clone(),
        stride: (coarse.stride / r).max(1),
    })
}

/// Per-point features from the point's voxel row.
pub fn devoxelize<T: Real>(st: &SparseTensor3D<T>, map: &VoxelMap) -> Result<Tensor<T>> {
    st.features.select_rows(&map.point_rows)
}

impl<T: Real> Graph<T> {
    /// Sparse convolution of row features `x` (`n_in x cin`) with `weights`
    /// (`k^3 x cin x cout`) along a prebuilt rulebook.
    pub fn sparse_conv(&self, x: Var, weights: Var, rb: &Rc<Rulebook>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let (n, cin) = xv.dims2()?;
        let (kv, wcin, cout) = conv_weight_dims(&wv)?;
        ensure!(
            wcin == cin,
            Shape,
            "sparse conv expects {} channels, got {}",
            wcin,
            cin
        );
        ensure!(n == rb.n_in, Shape, "rulebook built for {} sites, got {}", rb.n_in, n);
        ensure!(
            kv == rb.offsets.len(),
            Shape,
            "kernel volume {} vs rulebook {}",
            kv,
            rb.offsets.len()
        );
        let out = conv_forward(xv.data(), wv.data(), rb, cin, cout);
        let out = Tensor::new(vec![rb.n_out, cout], out)?;
        let rb = rb.clone();
        Ok(self.push(out, &[x, weights], move |grad, sink| {
            let go = grad.data();
            let want_x = sink.wants(x);
            let want_w = sink.wants(weights);
            let mut buf_in = Vec::new();
            let mut buf_go = Vec::new();
            let mut buf_gx = Vec::new();
            let mut gx = if want_x { vec![T::zero(); n * cin] } else { Vec::new() };
            let mut gw = if want_w { vec![T::zero(); kv * cin * cout] } else { Vec::new() };
            for (k, pairs) in rb.offsets.iter().enumerate() {
                let p = pairs.inputs.len();
                if p == 0 {
                    continue;
                }
                let w = &wv.data()[k * cin * cout..(k + 1) * cin * cout];
                let (xin, gout): (&[T], &[T]) = if pairs.identity {
                    (xv.data(), go)
                } else {
                    gather(go, &pairs.outputs, cout, &mut buf_go);
                    if want_w {
                        gather(xv.data(), &pairs.inputs, cin, &mut buf_in);
                    }
                    (&buf_in, &buf_go)
                };
                if want_w {
                    // dW_k += X_k^T * dY_k
                    T::gemm(
                        cin, p, cout, T::one(), xin, 1, cin as isize, gout, cout as isize, 1,
                        T::one(), &mut gw[k * cin * cout..(k + 1) * cin * cout], cout as isize, 1,
                    );
                }
                if want_x {
                    // dX_k = dY_k * W_k^T
                    if pairs.identity {
                        T::gemm(
                            p, cout, cin, T::one(), gout, cout as isize, 1, w, 1, cout as isize,
                            T::one(), &mut gx, cin as isize, 1,
                        );
                    } else {
                        buf_gx.clear();
                        buf_gx.resize(p * cin, T::zero());
                        T::gemm(
                            p, cout, cin, T::one(), gout, cout as isize, 1, w, 1, cout as isize,
                            T::zero(), &mut buf_gx, cin as isize, 1,
                        );
                        scatter_add(&mut gx, &pairs.inputs, cin, &buf_gx);
                    }
                }
            }
            if want_x {
                sink.accumulate(x, |g| {
                    for (a, b) in g.iter_mut().zip(&gx) {
                        *a += *b;
                    }
                });
            }
            if want_w {
                sink.accumulate(weights, |g| {
                    for (a, b) in g.iter_mut().zip(&gw) {
                        *a += *b;
                    }
                });
            }
        }))
    }

    /// Rows selected by index, zero rows where the index is `None`.
    pub fn gather_rows_or_zero(&self, x: Var, rows: &[Option<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = xv.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            match *r {
                Some(i) => {
                    ensure!(i < m, Index, "row {} out of {}", i, m);
                    data.extend_from_slice(xv.row(i));
                }
                None => data.extend(std::iter::repeat_n(T::zero(), c)),
            }
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        let rows = rows.to_vec();
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (r, go) in rows.iter().zip(grad.data().chunks(c)) {
                    if let Some(i) = *r {
                        for (gi, &v) in g[i * c..(i + 1) * c].iter_mut().zip(go) {
                            *gi += v;
                        }
                    }
                }
            });
        }))
    }
}

/// Site sets and rulebooks of a three-level voxel pyramid, built once per
/// cloud and shared by the U-Net and the domain-adaptation module.
#[derive(Clone, Debug)]
pub struct VoxelPyramid {
    pub levels: Vec<PyramidLevel>,
}

#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub coords: Vec<Coord>,
    /// 3x3x3 stride-1 rulebook on this level.
    pub subm: Rc<Rulebook>,
    /// 3x3x3 stride-2 rulebook from this level to the next (absent on the last).
    pub down: Option<Rc<Rulebook>>,
    /// Row of each site's parent on the next level (empty on the last).
    pub parent: Vec<usize>,
}

impl VoxelPyramid {
    pub fn build(base: &[Coord], depth: usize) -> Result<Self> {
        ensure!(depth >= 1, Argument, "pyramid needs at least one level");
        ensure!(!base.is_empty(), Argument, "pyramid over an empty site set");
        let mut levels = Vec::with_capacity(depth);
        let mut coords = base.to_vec();
        for d in 0..depth {
            let subm = Rc::new(Rulebook::build(&coords, &coords, 3, 1)?);
            if d + 1 < depth {
                let (next, parent) = downsample_coords(&coords, 2);
                let down = Rc::new(Rulebook::build(&coords, &next, 3, 2)?);
                levels.push(PyramidLevel {
                    coords,
                    subm,
                    down: Some(down),
                    parent,
                });
                coords = next;
            } else {
                levels.push(PyramidLevel {
                    coords: std::mem::take(&mut coords),
                    subm,
                    down: None,
                    parent: Vec::new(),
                });
            }
        }
        Ok(Self { levels })
    }
}
