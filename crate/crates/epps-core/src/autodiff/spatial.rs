//! Spatial operations on `[B, C, H, W]` tensors: convolution (im2col + GEMM),
//! batch normalization, pooling, bilinear resampling, and the broadcasting
//! multiplies used by attention gates.

use super::{Op, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a strided window sweep.
fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        extent + 2 * pad >= k,
        "window {k} larger than padded extent {}",
        extent + 2 * pad
    );
    (extent + 2 * pad - k) / stride + 1
}

/// Expand one input plane set into columns: `cols[(c*k+i)*k+j, oy*ow+ox] =
/// x[c, oy*s+i-pad, ox*s+j-pad]`, zero outside the frame.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [S],
) {
    let ospatial = oh * ow;
    debug_assert_eq!(cols.len(), cin * k * k * ospatial);
    let mut row = 0usize;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ospatial..(row + 1) * ospatial];
                let mut idx = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[idx..idx + ow].fill(S::zero());
                        idx += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[idx] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            plane[base + ix as usize]
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate column gradients back onto the input plane.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let ospatial = oh * ow;
    let mut row = 0usize;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ospatial..(row + 1) * ospatial];
                let mut idx = 0usize;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Sampling table for bilinear interpolation along one axis
/// (half-pixel-centre convention, edges clamped).
fn bilinear_axis(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = (floor as isize).clamp(0, input as isize - 1) as usize;
            let i1 = (floor as isize + 1).clamp(0, input as isize - 1) as usize;
            (i0, i1, t)
        })
        .collect()
}

impl<S: Scalar> Tape<S> {
    /// 2-d convolution with zero padding: `x: [B, Cin, H, W]`,
    /// `w: [Cout, Cin, K, K]`, optional `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (bsz, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be 4-d");
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(k, k2, "conv kernels are square");
        assert_eq!(cin, wcin, "conv input channels {cin} != weight channels {wcin}");
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(wd, k, stride, pad);
        let ospatial = oh * ow;
        let krows = cin * k * k;

        let mut out = vec![S::zero(); bsz * cout * ospatial];
        let mut cols = vec![S::zero(); krows * ospatial];
        let xv = self.value(x).as_slice();
        let wv = self.value(w).as_slice();
        for bi in 0..bsz {
            im2col(&xv[bi * cin * h * wd..], cin, h, wd, k, stride, pad, oh, ow, &mut cols);
            S::gemm(
                cout,
                krows,
                ospatial,
                S::one(),
                wv,
                false,
                &cols,
                false,
                S::zero(),
                &mut out[bi * cout * ospatial..(bi + 1) * cout * ospatial],
            );
        }
        if let Some(bias) = b {
            let bv = self.value(bias).as_slice().to_vec();
            assert_eq!(bv.len(), cout, "conv bias length mismatch");
            for bi in 0..bsz {
                for (c, &add) in bv.iter().enumerate() {
                    let start = (bi * cout + c) * ospatial;
                    for o in &mut out[start..start + ospatial] {
                        *o += add;
                    }
                }
            }
        }
        let v = Tensor::new(vec![bsz, cout, oh, ow], out);
        let mut parents = vec![x, w];
        if let Some(bias) = b {
            parents.push(bias);
        }
        self.push_op(v, Op::Conv2d { x, w, b, stride, pad }, &parents)
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn conv2d_backward(
        &self,
        id: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) {
        let (bsz, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape();
        let (cout, k) = (ws[0], ws[2]);
        let (_, _, oh, ow) = self.nodes[id].value.dims4();
        let ospatial = oh * ow;
        let krows = cin * k * k;
        let gv = g.as_slice();
        let xv = self.value(x).as_slice();
        let wv = self.value(w).as_slice();

        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut cols = vec![S::zero(); krows * ospatial];
        let mut dw = if want_w {
            Some(Tensor::zeros(ws.to_vec()))
        } else {
            None
        };
        let mut dx = if want_x {
            Some(Tensor::zeros(self.value(x).shape().to_vec()))
        } else {
            None
        };
        let mut dcols = if want_x {
            vec![S::zero(); krows * ospatial]
        } else {
            Vec::new()
        };

        for bi in 0..bsz {
            let gout = &gv[bi * cout * ospatial..(bi + 1) * cout * ospatial];
            if want_w {
                im2col(&xv[bi * cin * h * wd..], cin, h, wd, k, stride, pad, oh, ow, &mut cols);
                // dW += dY_b @ cols_b^T : [Cout, OS] x [OS, krows]
                S::gemm(
                    cout,
                    ospatial,
                    krows,
                    S::one(),
                    gout,
                    false,
                    &cols,
                    true,
                    S::one(),
                    dw.as_mut().expect("dw allocated").make_mut(),
                );
            }
            if want_x {
                // dcols = W^T @ dY_b : [krows, Cout] x [Cout, OS]
                S::gemm(
                    krows,
                    cout,
                    ospatial,
                    S::one(),
                    wv,
                    true,
                    gout,
                    false,
                    S::zero(),
                    &mut dcols,
                );
                col2im_acc(
                    &dcols,
                    cin,
                    h,
                    wd,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut dx.as_mut().expect("dx allocated").make_mut()[bi * cin * h * wd..],
                );
            }
        }
        if let Some(dw) = dw {
            self.acc(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.acc(grads, x, dx);
        }
        if let Some(bias) = b {
            if self.wants(bias) {
                let mut db = vec![S::zero(); cout];
                for bi in 0..bsz {
                    for (c, d) in db.iter_mut().enumerate() {
                        let start = (bi * cout + c) * ospatial;
                        *d += gv[start..start + ospatial].iter().copied().sum();
                    }
                }
                self.acc(grads, bias, Tensor::new(vec![cout], db));
            }
        }
    }

    /// Batch normalization using statistics of the current batch. Returns the
    /// normalized output plus the per-channel batch mean and biased variance
    /// so the caller can maintain running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> (Var, Tensor<S>, Tensor<S>) {
        let (bsz, c, h, w) = self.value(x).dims4();
        let n = bsz * h * w;
        let nf = S::cast_usize(n);
        let xv = self.value(x).as_slice();
        let plane = h * w;

        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ci in 0..c {
            let mut sum = S::zero();
            for bi in 0..bsz {
                let start = (bi * c + ci) * plane;
                sum += xv[start..start + plane].iter().copied().sum();
            }
            let m = sum / nf;
            let mut sq = S::zero();
            for bi in 0..bsz {
                let start = (bi * c + ci) * plane;
                for &v in &xv[start..start + plane] {
                    let d = v - m;
                    sq += d * d;
                }
            }
            mean[ci] = m;
            var[ci] = sq / nf;
        }
        let mean = Tensor::new(vec![c], mean);
        let var = Tensor::new(vec![c], var);
        let inv_std = var.map(|v| S::one() / (v + eps).sqrt());
        let out = self.batch_norm_apply(x, gamma, beta, mean.clone(), inv_std, true);
        (out, mean, var)
    }

    /// Batch normalization with frozen statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        eps: S,
    ) -> Var {
        let inv_std = running_var.map(|v| S::one() / (v + eps).sqrt());
        self.batch_norm_apply(x, gamma, beta, running_mean.clone(), inv_std, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<S>,
        inv_std: Tensor<S>,
        batch_stats: bool,
    ) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).numel(), c, "batch norm gamma length mismatch");
        assert_eq!(self.value(beta).numel(), c, "batch norm beta length mismatch");
        let plane = h * w;
        let xv = self.value(x).as_slice();
        let gv = self.value(gamma).as_slice();
        let bv = self.value(beta).as_slice();
        let mv = mean.as_slice();
        let sv = inv_std.as_slice();
        let mut out = vec![S::zero(); xv.len()];
        for bi in 0..bsz {
            for ci in 0..c {
                let start = (bi * c + ci) * plane;
                let (m, istd, ga, be) = (mv[ci], sv[ci], gv[ci], bv[ci]);
                for i in start..start + plane {
                    out[i] = ga * (xv[i] - m) * istd + be;
                }
            }
        }
        let v = Tensor::new(vec![bsz, c, h, w], out);
        self.push_op(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batch_norm_backward(
        &self,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<S>,
        inv_std: &Tensor<S>,
        batch_stats: bool,
    ) {
        let (bsz, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let n = S::cast_usize(bsz * plane);
        let xv = self.value(x).as_slice();
        let gv = g.as_slice();
        let gammav = self.value(gamma).as_slice();
        let mv = mean.as_slice();
        let sv = inv_std.as_slice();

        // Per-channel sums of dy and dy * x_hat feed every gradient below.
        let mut sum_dy = vec![S::zero(); c];
        let mut sum_dy_xhat = vec![S::zero(); c];
        for bi in 0..bsz {
            for ci in 0..c {
                let start = (bi * c + ci) * plane;
                let (m, istd) = (mv[ci], sv[ci]);
                let mut s0 = S::zero();
                let mut s1 = S::zero();
                for i in start..start + plane {
                    s0 += gv[i];
                    s1 += gv[i] * (xv[i] - m) * istd;
                }
                sum_dy[ci] += s0;
                sum_dy_xhat[ci] += s1;
            }
        }
        if self.wants(beta) {
            self.acc(grads, beta, Tensor::new(vec![c], sum_dy.clone()));
        }
        if self.wants(gamma) {
            self.acc(grads, gamma, Tensor::new(vec![c], sum_dy_xhat.clone()));
        }
        if self.wants(x) {
            let mut dx = Tensor::zeros(self.value(x).shape().to_vec());
            {
                let dst = dx.make_mut();
                for bi in 0..bsz {
                    for ci in 0..c {
                        let start = (bi * c + ci) * plane;
                        let (m, istd, ga) = (mv[ci], sv[ci], gammav[ci]);
                        if batch_stats {
                            let mean_dy = sum_dy[ci] / n;
                            let mean_dy_xhat = sum_dy_xhat[ci] / n;
                            for i in start..start + plane {
                                let xhat = (xv[i] - m) * istd;
                                dst[i] = ga * istd * (gv[i] - mean_dy - xhat * mean_dy_xhat);
                            }
                        } else {
                            for i in start..start + plane {
                                dst[i] = ga * istd * gv[i];
                            }
                        }
                    }
                }
            }
            self.acc(grads, x, dx);
        }
    }

    /// Max pooling; padding cells never win the max.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let oh = conv_out(h, k, stride, pad);
        let ow = conv_out(w, k, stride, pad);
        let xv = self.value(x).as_slice();
        let mut out = Vec::with_capacity(bsz * c * oh * ow);
        let mut argmax = Vec::with_capacity(bsz * c * oh * ow);
        for bi in 0..bsz {
            for ci in 0..c {
                let plane_start = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ki in 0..k {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = plane_start + iy as usize * w + ix as usize;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        assert!(best_idx != usize::MAX, "max pool window fell entirely in padding");
                        out.push(best);
                        argmax.push(best_idx as u32);
                    }
                }
            }
        }
        let v = Tensor::new(vec![bsz, c, oh, ow], out);
        self.push_op(v, Op::MaxPool { x, argmax }, &[x])
    }

    /// Adaptive average pooling to a fixed output grid. Output cells average
    /// the input bin `[floor(i*in/out), ceil((i+1)*in/out))`, which also
    /// handles outputs larger than the input by repeating cells.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).as_slice();
        let mut out = Vec::with_capacity(bsz * c * oh * ow);
        for bi in 0..bsz {
            for ci in 0..c {
                let plane_start = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    let (y0, y1) = pool_bin(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = pool_bin(ox, w, ow);
                        let mut sum = S::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                sum += xv[plane_start + iy * w + ix];
                            }
                        }
                        out.push(sum / S::cast_usize((y1 - y0) * (x1 - x0)));
                    }
                }
            }
        }
        let v = Tensor::new(vec![bsz, c, oh, ow], out);
        self.push_op(v, Op::AvgPoolAdaptive { x, oh, ow }, &[x])
    }

    pub(super) fn adaptive_avg_pool_backward(
        &self,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        x: Var,
        oh: usize,
        ow: usize,
    ) {
        if !self.wants(x) {
            return;
        }
        let (bsz, c, h, w) = self.value(x).dims4();
        let gv = g.as_slice();
        let mut dx = Tensor::zeros(self.value(x).shape().to_vec());
        {
            let dst = dx.make_mut();
            let mut out_i = 0usize;
            for bi in 0..bsz {
                for ci in 0..c {
                    let plane_start = (bi * c + ci) * h * w;
                    for oy in 0..oh {
                        let (y0, y1) = pool_bin(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = pool_bin(ox, w, ow);
                            let share = gv[out_i] / S::cast_usize((y1 - y0) * (x1 - x0));
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    dst[plane_start + iy * w + ix] += share;
                                }
                            }
                            out_i += 1;
                        }
                    }
                }
            }
        }
        self.acc(grads, x, dx);
    }

    /// Global average pooling to `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (bsz, c, _, _) = self.value(x).dims4();
        let pooled = self.adaptive_avg_pool(x, 1, 1);
        self.reshape(pooled, vec![bsz, c])
    }

    /// Global max pooling to `[B, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).as_slice();
        let plane = h * w;
        let mut out = Vec::with_capacity(bsz * c);
        let mut argmax = Vec::with_capacity(bsz * c);
        for pc in 0..bsz * c {
            let start = pc * plane;
            let mut best = xv[start];
            let mut best_idx = start;
            for i in start + 1..start + plane {
                if xv[i] > best {
                    best = xv[i];
                    best_idx = i;
                }
            }
            out.push(best);
            argmax.push(best_idx as u32);
        }
        let v = Tensor::new(vec![bsz, c], out);
        self.push_op(v, Op::GlobalMaxPool { x, argmax }, &[x])
    }

    /// Mean across channels: `[B, C, H, W] -> [B, 1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).as_slice();
        let plane = h * w;
        let cf = S::cast_usize(c);
        let mut out = vec![S::zero(); bsz * plane];
        for bi in 0..bsz {
            for ci in 0..c {
                let start = (bi * c + ci) * plane;
                let dst = &mut out[bi * plane..(bi + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(&xv[start..start + plane]) {
                    *d += v;
                }
            }
        }
        for v in &mut out {
            *v /= cf;
        }
        let v = Tensor::new(vec![bsz, 1, h, w], out);
        self.push_op(v, Op::ChannelMean(x), &[x])
    }

    pub(super) fn channel_mean_backward(&self, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>], x: Var) {
        if !self.wants(x) {
            return;
        }
        let (bsz, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let cf = S::cast_usize(c);
        let gv = g.as_slice();
        let delta = Tensor::from_fn(vec![bsz, c, h, w], |i| {
            let bi = i / (c * plane);
            let pos = i % plane;
            gv[bi * plane + pos] / cf
        });
        self.acc(grads, x, delta);
    }

    /// Max across channels: `[B, C, H, W] -> [B, 1, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).as_slice();
        let plane = h * w;
        let mut out = Vec::with_capacity(bsz * plane);
        let mut argmax = Vec::with_capacity(bsz * plane);
        for bi in 0..bsz {
            for pos in 0..plane {
                let mut best = xv[bi * c * plane + pos];
                let mut best_idx = bi * c * plane + pos;
                for ci in 1..c {
                    let idx = (bi * c + ci) * plane + pos;
                    if xv[idx] > best {
                        best = xv[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
        let v = Tensor::new(vec![bsz, 1, h, w], out);
        self.push_op(v, Op::ChannelMax { x, argmax }, &[x])
    }

    /// Bilinear resize to `(oh, ow)` with half-pixel-centre sampling.
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        if (oh, ow) == (h, w) {
            // Still record a node so gradients route cleanly.
            let v = self.value(x).clone();
            return self.push_op(v, Op::Reshape(x), &[x]);
        }
        let ys = bilinear_axis(oh, h);
        let xs = bilinear_axis(ow, w);
        let xv = self.value(x).as_slice();
        let plane = h * w;
        let mut out = Vec::with_capacity(bsz * c * oh * ow);
        for pc in 0..bsz * c {
            let src = &xv[pc * plane..(pc + 1) * plane];
            for &(y0, y1, ty) in &ys {
                let ty = S::cast(ty);
                for &(x0, x1, tx) in &xs {
                    let tx = S::cast(tx);
                    let v00 = src[y0 * w + x0];
                    let v01 = src[y0 * w + x1];
                    let v10 = src[y1 * w + x0];
                    let v11 = src[y1 * w + x1];
                    let top = v00 + (v01 - v00) * tx;
                    let bot = v10 + (v11 - v10) * tx;
                    out.push(top + (bot - top) * ty);
                }
            }
        }
        let v = Tensor::new(vec![bsz, c, oh, ow], out);
        self.push_op(v, Op::Bilinear { x }, &[x])
    }

    pub(super) fn bilinear_backward(
        &self,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        x: Var,
        oh: usize,
        ow: usize,
    ) {
        if !self.wants(x) {
            return;
        }
        let (bsz, c, h, w) = self.value(x).dims4();
        let ys = bilinear_axis(oh, h);
        let xs = bilinear_axis(ow, w);
        let gv = g.as_slice();
        let plane = h * w;
        let mut dx = Tensor::zeros(self.value(x).shape().to_vec());
        {
            let dst = dx.make_mut();
            let one = S::one();
            let mut gi = 0usize;
            for pc in 0..bsz * c {
                let dplane = &mut dst[pc * plane..(pc + 1) * plane];
                for &(y0, y1, ty) in &ys {
                    let ty = S::cast(ty);
                    for &(x0, x1, tx) in &xs {
                        let tx = S::cast(tx);
                        let gout = gv[gi];
                        gi += 1;
                        dplane[y0 * w + x0] += gout * (one - ty) * (one - tx);
                        dplane[y0 * w + x1] += gout * (one - ty) * tx;
                        dplane[y1 * w + x0] += gout * ty * (one - tx);
                        dplane[y1 * w + x1] += gout * ty * tx;
                    }
                }
            }
        }
        self.acc(grads, x, dx);
    }

    /// Per-channel gate: `x: [B, C, H, W]` scaled by `w: [B, C]`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Var {
        let (bsz, c, h, wd) = self.value(x).dims4();
        let (wb, wc) = self.value(w).dims2();
        assert_eq!((wb, wc), (bsz, c), "scale_channels gate shape mismatch");
        let xv = self.value(x).as_slice();
        let wv = self.value(w).as_slice();
        let plane = h * wd;
        let out = Tensor::from_fn(vec![bsz, c, h, wd], |i| xv[i] * wv[i / plane]);
        self.push_op(out, Op::ScaleChannels { x, w }, &[x, w])
    }

    pub(super) fn scale_channels_backward(
        &self,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        x: Var,
        w: Var,
    ) {
        let (bsz, c, h, wd) = self.value(x).dims4();
        let plane = h * wd;
        let gv = g.as_slice();
        let xv = self.value(x).as_slice();
        let wv = self.value(w).as_slice();
        if self.wants(x) {
            let delta = Tensor::from_fn(vec![bsz, c, h, wd], |i| gv[i] * wv[i / plane]);
            self.acc(grads, x, delta);
        }
        if self.wants(w) {
            let mut dw = vec![S::zero(); bsz * c];
            for (bc, d) in dw.iter_mut().enumerate() {
                let start = bc * plane;
                let mut sum = S::zero();
                for i in start..start + plane {
                    sum += gv[i] * xv[i];
                }
                *d = sum;
            }
            self.acc(grads, w, Tensor::new(vec![bsz, c], dw));
        }
    }

    /// Per-position gate: `x: [B, C, H, W]` scaled by `m: [B, 1, H, W]`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Var {
        let (bsz, c, h, w) = self.value(x).dims4();
        let ms = self.value(m).shape();
        assert_eq!(ms, &[bsz, 1, h, w], "scale_spatial gate shape mismatch");
        let xv = self.value(x).as_slice();
        let mv = self.value(m).as_slice();
        let plane = h * w;
        let out = Tensor::from_fn(vec![bsz, c, h, w], |i| {
            let bi = i / (c * plane);
            xv[i] * mv[bi * plane + i % plane]
        });
        self.push_op(out, Op::ScaleSpatial { x, m }, &[x, m])
    }

    pub(super) fn scale_spatial_backward(
        &self,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        x: Var,
        m: Var,
    ) {
        let (bsz, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let gv = g.as_slice();
        let xv = self.value(x).as_slice();
        let mv = self.value(m).as_slice();
        if self.wants(x) {
            let delta = Tensor::from_fn(vec![bsz, c, h, w], |i| {
                let bi = i / (c * plane);
                gv[i] * mv[bi * plane + i % plane]
            });
            self.acc(grads, x, delta);
        }
        if self.wants(m) {
            let mut dm = vec![S::zero(); bsz * plane];
            for bi in 0..bsz {
                for ci in 0..c {
                    let start = (bi * c + ci) * plane;
                    let dst = &mut dm[bi * plane..(bi + 1) * plane];
                    for (pos, d) in dst.iter_mut().enumerate() {
                        *d += gv[start + pos] * xv[start + pos];
                    }
                }
            }
            self.acc(grads, m, Tensor::new(vec![bsz, 1, h, w], dm));
        }
    }
}

/// Input span covered by adaptive-pool output cell `i` of `out` over `input`.
fn pool_bin(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end.max(start + 1).min(input.max(1)))
}
