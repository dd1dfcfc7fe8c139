//! Operations on `C x H x W` feature maps.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

/// Output extent of a convolution with "same"-style padding `k / 2`.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Visits every (column row, output pixel, input offset) triple of the
    /// unfolded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, pad) = (self.k, self.pad());
        let p_total = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (ci * self.h + iy as usize) * self.w + ix as usize;
                            f(row * p_total + oy * self.wo + ox, src, row);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// 2D convolution with zero padding `k / 2`.
    ///
    /// `x` is `cin x h x w`, `weight` is `cout x cin x k x k`, `bias` is `[cout]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let (cin, h, w) = xv.dims3()?;
        ensure!(
            wv.shape().len() == 4 && wv.shape()[2] == wv.shape()[3],
            Shape,
            "conv weight must be cout x cin x k x k, got {:?}",
            wv.shape()
        );
        let (cout, wcin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        ensure!(
            wcin == cin,
            Shape,
            "conv expects {} input channels, got {}",
            wcin,
            cin
        );
        ensure!(bv.len() == cout, Shape, "conv bias {} vs {}", bv.len(), cout);
        ensure!(stride >= 1 && k % 2 == 1, Argument, "odd kernel, stride >= 1");
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            ho: conv2d_output_size(h, k, stride),
            wo: conv2d_output_size(w, k, stride),
        };
        let p = geom.ho * geom.wo;
        let ck = cin * k * k;

        let mut cols = vec![T::zero(); ck * p];
        let xd = xv.data();
        geom.for_each_tap(|dst, src, _| cols[dst] = xd[src]);

        let mut out = vec![T::zero(); cout * p];
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = bv.data()[co]);
        }
        T::gemm(
            cout,
            ck,
            p,
            T::one(),
            wv.data(),
            ck as isize,
            1,
            &cols,
            p as isize,
            1,
            T::one(),
            &mut out,
            p as isize,
            1,
        );
        let out = Tensor::new(vec![cout, geom.ho, geom.wo], out)?;
        let cols = Rc::new(cols);
        Ok(self.push(out, &[x, weight, bias], move |grad, sink| {
            let go = grad.data();
            sink.accumulate(bias, |gb| {
                for (gbi, row) in gb.iter_mut().zip(go.chunks(p)) {
                    *gbi += row.iter().copied().sum::<T>();
                }
            });
            sink.accumulate(weight, |gw| {
                T::gemm(
                    cout,
                    p,
                    ck,
                    T::one(),
                    go,
                    p as isize,
                    1,
                    &cols,
                    1,
                    p as isize,
                    T::one(),
                    gw,
                    ck as isize,
                    1,
                );
            });
            if sink.wants(x) {
                let mut dcols = vec![T::zero(); ck * p];
                T::gemm(
                    ck,
                    cout,
                    p,
                    T::one(),
                    wv.data(),
                    1,
                    ck as isize,
                    go,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                sink.accumulate(x, |gx| {
                    geom.for_each_tap(|dst, src, _| gx[src] += dcols[dst]);
                });
            }
        }))
    }

    /// Per-channel bias for `c x h x w` maps.
    pub fn add_bias_channels(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (c, h, w) = xv.dims3()?;
        ensure!(bv.len() == c, Shape, "bias {} for {} channels", bv.len(), c);
        let hw = h * w;
        let mut out = (*xv).clone();
        for (row, &bi) in out.data_mut().chunks_mut(hw).zip(bv.data()) {
            row.iter_mut().for_each(|v| *v += bi);
        }
        Ok(self.push(out, &[x, b], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (gi, &go) in g.iter_mut().zip(grad.data()) {
                    *gi += go;
                }
            });
            sink.accumulate(b, |g| {
                for (gi, row) in g.iter_mut().zip(grad.data().chunks(hw)) {
                    *gi += row.iter().copied().sum::<T>();
                }
            });
        }))
    }

    /// Non-overlapping `r x r` average pooling; `h` and `w` must divide by `r`.
    pub fn avg_pool2d(&self, x: Var, r: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3()?;
        ensure!(
            r >= 1 && h % r == 0 && w % r == 0,
            Shape,
            "avg_pool2d factor {} does not divide {}x{}",
            r,
            h,
            w
        );
        let (ho, wo) = (h / r, w / r);
        let inv = T::one() / T::from_usize(r * r).unwrap();
        let mut out = vec![T::zero(); c * ho * wo];
        let xd = xv.data();
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ci * ho + y / r) * wo + xx / r] += xd[(ci * h + y) * w + xx] * inv;
                }
            }
        }
        let out = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(out, &[x], move |grad, sink| {
            let go = grad.data();
            sink.accumulate(x, |g| {
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            g[(ci * h + y) * w + xx] += go[(ci * ho + y / r) * wo + xx / r] * inv;
                        }
                    }
                }
            });
        }))
    }

    /// Bilinear resize with half-pixel centers (`align_corners = false`).
    pub fn upsample_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3()?;
        ensure!(out_h > 0 && out_w > 0, Argument, "empty upsample target");
        let ys = Rc::new(interp_table(h, out_h));
        let xs = Rc::new(interp_table(w, out_w));
        let xd = xv.data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out[(ci * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], out)?;
        Ok(self.push(out, &[x], move |grad, sink| {
            let go = grad.data();
            sink.accumulate(x, |g| {
                for ci in 0..c {
                    let plane = &mut g[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        let fy = T::from_f64_lossy(fy);
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let fx = T::from_f64_lossy(fx);
                            let v = go[(ci * out_h + oy) * out_w + ox];
                            let top = v * (T::one() - fy);
                            let bot = v * fy;
                            plane[y0 * w + x0] += top * (T::one() - fx);
                            plane[y0 * w + x1] += top * fx;
                            plane[y1 * w + x0] += bot * (T::one() - fx);
                            plane[y1 * w + x1] += bot * fx;
                        }
                    }
                }
            });
        }))
    }

    /// Feature vectors at flat pixel indices: `c x h x w` -> `n x c`.
    pub fn gather_pixels(&self, x: Var, pixels: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3()?;
        let hw = h * w;
        let xd = xv.data();
        let mut out = Vec::with_capacity(pixels.len() * c);
        for &p in pixels {
            ensure!(p < hw, Index, "pixel {} out of {}", p, hw);
            out.extend((0..c).map(|ci| xd[ci * hw + p]));
        }
        let out = Tensor::new(vec![pixels.len(), c], out)?;
        let pixels = pixels.to_vec();
        Ok(self.push(out, &[x], move |grad, sink| {
            sink.accumulate(x, |g| {
                for (&p, row) in pixels.iter().zip(grad.data().chunks(c)) {
                    for (ci, &v) in row.iter().enumerate() {
                        g[ci * hw + p] += v;
                    }
                }
            });
        }))
    }

    /// Mean feature per pixel segment: `c x h x w` -> `k x c`.
    /// Empty segments produce zero rows.
    pub fn segment_mean_pixels(&self, x: Var, labels: &[usize], k: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3()?;
        let hw = h * w;
        ensure!(labels.len() == hw, Shape, "{} labels for {} pixels", labels.len(), hw);
        let mut counts = vec![0usize; k];
        for &l in labels {
            ensure!(l < k, Index, "segment {} out of {}", l, k);
            counts[l] += 1;
        }
        let inv: Vec<T> = counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    T::zero()
                } else {
                    T::one() / T::from_usize(n).unwrap()
                }
            })
            .collect();
        let xd = xv.data();
        let mut out = vec![T::zero(); k * c];
        for ci in 0..c {
            for (p, &l) in labels.iter().enumerate() {
                out[l * c + ci] += xd[ci * hw + p];
            }
        }
        for (row, &s) in out.chunks_mut(c).zip(&inv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(vec![k, c], out)?;
        let labels = labels.to_vec();
        Ok(self.push(out, &[x], move |grad, sink| {
            let go = grad.data();
            sink.accumulate(x, |g| {
                for ci in 0..c {
                    for (p, &l) in labels.iter().enumerate() {
                        g[ci * hw + p] += go[l * c + ci] * inv[l];
                    }
                }
            });
        }))
    }

    /// Reinterprets a `c x h x w` map as rows of pixels: `(h*w) x c`.
    pub fn pixels_as_rows(&self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let flat = self.reshape(x, &[c, h * w])?;
        self.transpose(flat)
    }

    /// Shape-only view change; the gradient is reshaped back.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape)?;
        Ok(self.push(out, &[x], move |grad, sink| {
            debug_assert_eq!(grad.len(), old.iter().product::<usize>());
            sink.accumulate(x, |g| {
                for (gi, &go) in g.iter_mut().zip(grad.data()) {
                    *gi += go;
                }
            });
        }))
    }
}

/// `(lo, hi, frac)` source taps for each output coordinate.
fn interp_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0;
        let w = g.constant(Tensor::from_f64(&[1, 1, 3, 3], &wk).unwrap());
        let b = g.constant(Tensor::from_f64(&[1], &[0.5]).unwrap());
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn conv_stride_two_shape() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[3, 64, 96]));
        let w = g.constant(Tensor::zeros(&[16, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[16]));
        let y = g.conv2d(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), vec![16, 32, 48]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d(x, w, b, 1).is_err());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 3, 5], 0.25));
        let y = g.upsample_bilinear(x, 12, 20).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn avg_pool_means_blocks() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2, 2], &[1., 2., 3., 6.]).unwrap());
        let y = g.avg_pool2d(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }
}
