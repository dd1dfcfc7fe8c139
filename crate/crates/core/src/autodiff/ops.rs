//! Elementwise, reduction, matrix, and row-indexed operations.
//!
//! Row-indexed ops treat a rank-2 tensor as `rows x channels`; per-point and
//! per-voxel features use that layout throughout the crate.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "{}: {:?} vs {:?}",
        op,
        a.shape(),
        b.shape()
    );
    Ok(())
}

impl<T: Real> Graph<T> {
    fn unary(
        &self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = xv.map(f);
        let out_rc = Rc::new(out.clone());
        let keep = out_rc.clone();
        self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |gx| {
                for ((g, &go), (&xi, &yi)) in gx
                    .iter_mut()
                    .zip(grad.data())
                    .zip(xv.data().iter().zip(keep.data()))
                {
                    *g += go * df(xi, yi);
                }
            });
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "add")?;
        let mut out = (*av).clone();
        out.add_assign(&bv);
        Ok(self.push(out, &[a, b], move |grad, sink| {
            for v in [a, b] {
                sink.accumulate(v, |g| {
                    for (gi, &go) in g.iter_mut().zip(grad.data()) {
                        *gi += go;
                    }
                });
            }
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "sub")?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], move |grad, sink| {
            sink.accumulate(a, |g| {
                for (gi, &go) in g.iter_mut().zip(grad.data()) {
                    *gi += go;
                }
            });
            sink.accumulate(b, |g| {
                for (gi, &go) in g.iter_mut().zip(grad.data()) {
                    *gi -= go;
                }
            });
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "mul")?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], move |grad, sink| {
            sink.accumulate(a, |g| {
                for ((gi, &go), &y) in g.iter_mut().zip(grad.data()).zip(bv.data()) {
                    *gi += go * y;
                }
            });
            sink.accumulate(b, |g| {
                for ((gi, &go), &x) in g.iter_mut().zip(grad.data()).zip(av.data()) {
                    *gi += go * x;
                }
            });
        }))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v + s, |_, _| T::one())
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn square(&self, x: Var) -> Var {
        let two = T::one() + T::one();
        self.unary(x, |v| v * v, move |xi, _| two * xi)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |xi, _| if xi > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn log_floor(&self, x: Var, floor: T) -> Var {
        self.unary(
            x,
            move |v| v.max(floor).ln(),
            move |xi, _| {
                if xi > floor {
                    T::one() / xi
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let total: T = xv.data().iter().copied().sum();
        self.push(Tensor::scalar(total), &[x], move |grad, sink| {
            let go = grad.item();
            sink.accumulate(x, |g| g.iter_mut().for_each(|gi| *gi += go));
        })
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Row-major matrix product `a (m x k) * b (k x n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        let (m, k) = av.dims2()?;
        let n = bv.dims2()?.1;
        Ok(self.push(out, &[a, b], move |grad, sink| {
            let go = grad.data();
            // dA = dC * B^T
            sink.accumulate(a, |ga| {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    go,
                    n as isize,
                    1,
                    bv.data(),
                    1,
                    n as isize,
                    T::one(),
                    ga,
                    k as isize,
                    1,
                );
            });
            // dB = A^T * dC
            sink.accumulate(b, |gb| {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    av.data(),
                    1,
                    k as isize,
                    go,
                    n as isize,
                    1,
                    T::one(),
                    gb,
                    n as isize,
                    1,
                );
            });
        }))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let src = xv.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, &[x], move |grad, sink| {
            let go = grad.data();
            sink.accumulate(x, |g| {
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += go[j * m + i];
                    }
                }
            });
        }))
    }

    /// Adds a per-column bias `b` (shape `[c]`) to every row of `x`.
    pub fn add_bias_rows(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (m, c) = xv.dims2()?;
        ensure!(
            bv.len() == c,
            Shape,
            "bias of {} for {} columns",
            bv.len(),
            c
        );
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bi) in row.iter_mut().zip(bv.data()) {
                *o += bi;
            }
        }
        Ok(self.push(out, &[x, b], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (gi, &go) in g.iter_mut().zip(grad.data()) {
                    *gi += go;
                }
            });
            sink.accumulate(b, |g| {
                for row in grad.data().chunks(c).take(m) {
                    for (gi, &go) in g.iter_mut().zip(row) {
                        *gi += go;
                    }
                }
            });
        }))
    }

    /// `x * w + b` for row features `x (m x cin)`, `w (cin x cout)`, `b [cout]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias_rows(y, b)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = xv.dims2()?;
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let yv = Rc::new(out.clone());
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for ((grow, gorow), yrow) in g
                    .chunks_mut(c)
                    .zip(grad.data().chunks(c))
                    .zip(yv.data().chunks(c))
                {
                    let dot: T = gorow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((gi, &go), &y) in grow.iter_mut().zip(gorow).zip(yrow) {
                        *gi += y * (go - dot);
                    }
                }
            });
        }))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = xv.dims2()?;
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = mx + z.ln();
            for v in row.iter_mut() {
                *v -= lz;
            }
        }
        let yv = Rc::new(out.clone());
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for ((grow, gorow), yrow) in g
                    .chunks_mut(c)
                    .zip(grad.data().chunks(c))
                    .zip(yv.data().chunks(c))
                {
                    let total: T = gorow.iter().copied().sum();
                    for ((gi, &go), &y) in grow.iter_mut().zip(gorow).zip(yrow) {
                        *gi += go - y.exp() * total;
                    }
                }
            });
        }))
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` use `eps`.
    pub fn l2_normalize_rows(&self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = xv.dims2()?;
        let norms: Vec<T> = xv
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let mut out = (*xv).clone();
        for (row, &n) in out.data_mut().chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        let yv = Rc::new(out.clone());
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (((grow, gorow), yrow), &n) in g
                    .chunks_mut(c)
                    .zip(grad.data().chunks(c))
                    .zip(yv.data().chunks(c))
                    .zip(&norms)
                {
                    let clamped = n <= eps;
                    let dot: T = gorow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((gi, &go), &y) in grow.iter_mut().zip(gorow).zip(yrow) {
                        *gi += if clamped { go / n } else { (go - y * dot) / n };
                    }
                }
            });
        }))
    }

    /// `out[i] = x[i, cols[i]]`, shape `[rows]`.
    pub fn pick_rows(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = xv.dims2()?;
        ensure!(cols.len() == m, Shape, "{} picks for {} rows", cols.len(), m);
        let mut data = Vec::with_capacity(m);
        for (i, &j) in cols.iter().enumerate() {
            ensure!(j < c, Index, "column {} out of {}", j, c);
            data.push(xv.data()[i * c + j]);
        }
        let cols = cols.to_vec();
        Ok(self.push(Tensor::new(vec![m], data)?, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (i, (&j, &go)) in cols.iter().zip(grad.data()).enumerate() {
                    g[i * c + j] += go;
                }
            });
        }))
    }

    /// Rows of `x` selected by `rows` (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = xv.dims2()?;
        let out = xv.select_rows(rows)?;
        let rows = rows.to_vec();
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                debug_assert_eq!(g.len(), m * c);
                for (&r, go) in rows.iter().zip(grad.data().chunks(c)) {
                    for (gi, &v) in g[r * c..(r + 1) * c].iter_mut().zip(go) {
                        *gi += v;
                    }
                }
            });
        }))
    }

    /// Mean of the rows of `x` per segment. `segment[i]` is the segment of row
    /// `i` or `None` to skip it. Empty segments produce zero rows.
    pub fn segment_mean_rows(
        &self,
        x: Var,
        segment: &[Option<usize>],
        n_segments: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = xv.dims2()?;
        ensure!(
            segment.len() == m,
            Shape,
            "{} segment ids for {} rows",
            segment.len(),
            m
        );
        let mut counts = vec![0usize; n_segments];
        for s in segment.iter().flatten() {
            ensure!(*s < n_segments, Index, "segment {} out of {}", s, n_segments);
            counts[*s] += 1;
        }
        let mut out = Tensor::zeros(&[n_segments, c]);
        {
            let od = out.data_mut();
            for (row, s) in xv.data().chunks(c).zip(segment) {
                if let Some(s) = *s {
                    for (o, &v) in od[s * c..(s + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            for (s, &n) in counts.iter().enumerate() {
                if n > 0 {
                    let inv = T::one() / T::from_usize(n).unwrap();
                    od[s * c..(s + 1) * c].iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        let segment = segment.to_vec();
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (grow, s) in g.chunks_mut(c).zip(&segment) {
                    if let Some(s) = *s {
                        let inv = T::one() / T::from_usize(counts[s]).unwrap();
                        for (gi, &go) in grow.iter_mut().zip(&grad.data()[s * c..(s + 1) * c]) {
                            *gi += go * inv;
                        }
                    }
                }
            });
        }))
    }

    /// Column concatenation of two row-feature matrices with equal row counts.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, ca) = av.dims2()?;
        let (mb, cb) = bv.dims2()?;
        ensure!(m == mb, Shape, "concat rows {} vs {}", m, mb);
        let c = ca + cb;
        let mut data = Vec::with_capacity(m * c);
        for (ra, rb) in av.data().chunks(ca.max(1)).zip(bv.data().chunks(cb.max(1))) {
            data.extend_from_slice(&ra[..ca]);
            data.extend_from_slice(&rb[..cb]);
        }
        let out = Tensor::new(vec![m, c], data)?;
        Ok(self.push(out, &[a, b], move |grad, sink| {
            sink.accumulate(a, |g| {
                for (grow, gorow) in g.chunks_mut(ca).zip(grad.data().chunks(c)) {
                    for (gi, &go) in grow.iter_mut().zip(&gorow[..ca]) {
                        *gi += go;
                    }
                }
            });
            sink.accumulate(b, |g| {
                for (grow, gorow) in g.chunks_mut(cb).zip(grad.data().chunks(c)) {
                    for (gi, &go) in grow.iter_mut().zip(&gorow[ca..]) {
                        *gi += go;
                    }
                }
            });
        }))
    }

    /// Columns `[start, end)` of a row-feature matrix.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = xv.dims2()?;
        ensure!(
            start < end && end <= c,
            Shape,
            "column slice {}..{} of {}",
            start,
            end,
            c
        );
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (grow, gorow) in g.chunks_mut(c).zip(grad.data().chunks(w)) {
                    for (gi, &go) in grow[start..end].iter_mut().zip(gorow) {
                        *gi += go;
                    }
                }
            });
        }))
    }
}
