//! Raw compute kernels over flat f32 buffers.
//!
//! Convolution runs as im2col + sgemm. Pooling, upsampling and batch norm
//! are direct loops; batch-norm moments and loss reductions accumulate in
//! f64. Everything here is single-threaded and bit-deterministic.

/// Output extent of a convolution/pooling axis (floor semantics).
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

fn sgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one [C, H, W] image into a [C*kh*kw, OH*OW] patch matrix.
fn im2col(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [f32],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    col.fill(0.0);
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for r in 0..kh {
            for s in 0..kw {
                let row = ((ci * kh + r) * kw + s) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    // ix = ox*stride + s - pad; contiguous when stride == 1
                    if stride == 1 {
                        let ix0 = s as isize - pad as isize;
                        let ox_lo = (-ix0).max(0) as usize;
                        let ox_hi = ow.min((w as isize - ix0).max(0) as usize);
                        if ox_lo < ox_hi {
                            let src0 = (ix0 + ox_lo as isize) as usize;
                            dst[ox_lo..ox_hi].copy_from_slice(
                                &plane[iy * w + src0..iy * w + src0 + (ox_hi - ox_lo)],
                            );
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + s) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = plane[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fold a [C*kh*kw, OH*OW] patch-gradient matrix back onto a [C, H, W] image.
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    input_grad: &mut [f32],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    for ci in 0..c {
        let plane = &mut input_grad[ci * h * w..(ci + 1) * h * w];
        for r in 0..kh {
            for s in 0..kw {
                let row = ((ci * kh + r) * kw + s) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + s) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out_extent(self.h, self.kh, self.stride, self.pad),
            conv_out_extent(self.w, self.kw, self.stride, self.pad),
        )
    }
}

pub fn conv2d_forward(s: &ConvShape, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (oh, ow) = s.out_hw();
    let k = s.cin * s.kh * s.kw;
    let n = oh * ow;
    let mut out = vec![0.0; s.batch * s.cout * n];
    let mut col = vec![0.0; k * n];
    for b in 0..s.batch {
        im2col(
            &input[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w],
            s.cin,
            s.h,
            s.w,
            s.kh,
            s.kw,
            s.stride,
            s.pad,
            &mut col,
        );
        let dst = &mut out[b * s.cout * n..(b + 1) * s.cout * n];
        sgemm_rowmajor(s.cout, k, n, weight, false, &col, false, 0.0, dst);
        if let Some(bias) = bias {
            for co in 0..s.cout {
                let bv = bias[co];
                for v in &mut dst[co * n..(co + 1) * n] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input, weight and bias. Any of the outputs may be None
/// when that gradient is not needed.
pub fn conv2d_backward(
    s: &ConvShape,
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    dinput: Option<&mut [f32]>,
    dweight: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
) {
    let (oh, ow) = s.out_hw();
    let k = s.cin * s.kh * s.kw;
    let n = oh * ow;
    let mut col = vec![0.0; k * n];
    let mut dcol = vec![0.0; k * n];
    let mut dinput = dinput;
    let mut dweight = dweight;
    let mut dbias = dbias;
    for b in 0..s.batch {
        let dout_b = &dout[b * s.cout * n..(b + 1) * s.cout * n];
        if let Some(db) = dbias.as_deref_mut() {
            for co in 0..s.cout {
                let mut acc = 0.0f64;
                for &g in &dout_b[co * n..(co + 1) * n] {
                    acc += g as f64;
                }
                db[co] += acc as f32;
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            im2col(
                &input[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w],
                s.cin,
                s.h,
                s.w,
                s.kh,
                s.kw,
                s.stride,
                s.pad,
                &mut col,
            );
            // dW[cout, k] += dOut[cout, n] * col[k, n]^T
            sgemm_rowmajor(s.cout, n, k, dout_b, false, &col, true, 1.0, dw);
        }
        if let Some(di) = dinput.as_deref_mut() {
            // dCol[k, n] = W[cout, k]^T * dOut[cout, n]
            sgemm_rowmajor(k, s.cout, n, weight, true, dout_b, false, 0.0, &mut dcol);
            col2im(
                &dcol,
                s.cin,
                s.h,
                s.w,
                s.kh,
                s.kw,
                s.stride,
                s.pad,
                &mut di[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w],
            );
        }
    }
}

/// Max pooling with -inf padding semantics. Returns the pooled values and,
/// per output element, the flat [H*W] plane index of its argmax (first hit
/// in row-major scan on ties).
pub fn maxpool2d_forward(
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: &[f32],
) -> (Vec<f32>, Vec<u32>) {
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    let mut out = vec![0.0; batch * c * oh * ow];
    let mut arg = vec![0u32; batch * c * oh * ow];
    for bc in 0..batch * c {
        let plane = &input[bc * h * w..(bc + 1) * h * w];
        let out_plane = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        let arg_plane = &mut arg[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                for r in 0..k {
                    let iy = (oy * stride + r) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for s in 0..k {
                        let ix = (ox * stride + s) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = plane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                out_plane[oy * ow + ox] = best;
                arg_plane[oy * ow + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward(
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    arg: &[u32],
    dout: &[f32],
    dinput: &mut [f32],
) {
    for bc in 0..batch * c {
        let dplane = &mut dinput[bc * h * w..(bc + 1) * h * w];
        let base = bc * oh * ow;
        for i in 0..oh * ow {
            dplane[arg[base + i] as usize] += dout[base + i];
        }
    }
}

/// Per-axis source indices and blend weight for 2x bilinear upsampling
/// (half-pixel centers, corners not aligned).
fn upsample_axis_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|o| {
            let src = (o as f32 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (n_in - 1) as f32);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample2x_forward(batch: usize, c: usize, h: usize, w: usize, input: &[f32]) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_axis_table(h, oh);
    let tx = upsample_axis_table(w, ow);
    let mut out = vec![0.0; batch * c * oh * ow];
    for bc in 0..batch * c {
        let src = &input[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                drow[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample2x_backward(batch: usize, c: usize, h: usize, w: usize, dout: &[f32], dinput: &mut [f32]) {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_axis_table(h, oh);
    let tx = upsample_axis_table(w, ow);
    for bc in 0..batch * c {
        let dsrc = &mut dinput[bc * h * w..(bc + 1) * h * w];
        let d==&dout[bc * oh * ow..(bc + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = d[oy * ow + ox];
                dsrc[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dsrc[y0 * w + x1] += g * (1.0 - fy) * fx;
                dsrc[y1 * w + x0] += g * fy * (1.0 - fx);
                dsrc[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel mean and inverse standard deviation cached for backward.
pub struct BnStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Training-mode batch norm over batch x spatial per channel. Updates the
/// running stats in place by exponential moving average.
pub fn batchnorm_train_forward(
    batch: usize,
    c: usize,
    hw: usize,
    input: &[f32],
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
) -> (Vec<f32>, BnStats) {
    let n = (batch * hw) as f64;
    let mut out = vec![0.0; input.len()];
    let mut stats = BnStats { mean: vec![0.0; c], inv_std: vec![0.0; c] };
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for b in 0..batch {
            let base = (b * c + ch) * hw;
            for &v in &input[base..base + hw] {
                let v = v as f64;
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + BN_EPS).sqrt();
        stats.mean[ch] = mean as f32;
        stats.inv_std[ch] = inv_std as f32;
        running_mean[ch] =
            ((1.0 - BN_MOMENTUM) * running_mean[ch] as f64 + BN_MOMENTUM * mean) as f32;
        running_var[ch] =
            ((1.0 - BN_MOMENTUM) * running_var[ch] as f64 + BN_MOMENTUM * var) as f32;
        let g = gamma[ch] * stats.inv_std[ch];
        let b0 = beta[ch] - stats.mean[ch] * g;
        for b in 0..batch {
            let base = (b * c + ch) * hw;
            for (o, &v) in out[base..base + hw].iter_mut().zip(&input[base..base + hw]) {
                *o = v * g + b0;
            }
        }
    }
    (out, stats)
}

/// Eval-mode batch norm using the running stats.
pub fn batchnorm_eval_forward(
    batch: usize,
    c: usize,
    hw: usize,
    input: &[f32],
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
) -> (Vec<f32>, BnStats) {
    let mut out = vec![0.0; input.len()];
    let mut stats = BnStats { mean: vec![0.0; c], inv_std: vec![0.0; c] };
    for ch in 0..c {
        let inv_std = 1.0 / ((running_var[ch] as f64 + BN_EPS).sqrt());
        stats.mean[ch] = running_mean[ch];
        stats.inv_std[ch] = inv_std as f32;
        let g = gamma[ch] * stats.inv_std[ch];
        let b0 = beta[ch] - running_mean[ch] * g;
        for b in 0..batch {
            let base = (b * c + ch) * hw;
            for (o, &v) in out[base..base + hw].iter_mut().zip(&input[base..base + hw]) {
                *o = v * g + b0;
            }
        }
    }
    (out, stats)
}

/// Backward for batch norm. `through_stats` is true in train mode, where the
/// batch statistics depend on the input.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    batch: usize,
    c: usize,
    hw: usize,
    input: &[f32],
    gamma: &[f32],
    stats: &BnStats,
    through_stats: bool,
    dout: &[f32],
    dinput: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let n = (batch * hw) as f64;
    for ch in 0..c {
        let mean = stats.mean[ch] as f64;
        let inv_std = stats.inv_std[ch] as f64;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..batch {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let dy = dout[base + i] as f64;
                let xhat = (input[base + i] as f64 - mean) * inv_std;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma[ch] += sum_dy_xhat as f32;
        dbeta[ch] += sum_dy as f32;
        let g = gamma[ch] as f64;
        if through_stats {
            let mean_dy = sum_dy / n;
            let mean_dy_xhat = sum_dy_xhat / n;
            for b in 0..batch {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    let dy = dout[base + i] as f64;
                    let xhat = (input[base + i] as f64 - mean) * inv_std;
                    dinput[base + i] +=
                        (g * inv_std * (dy - mean_dy - xhat * mean_dy_xhat)) as f32;
                }
            }
        } else {
            let scale = (g * inv_std) as f32;
            for b in 0..batch {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    dinput[base + i] += dout[base + i] * scale;
                }
            }
        }
    }
}

/// Mean binary cross-entropy on logits, computed in the stable form
/// max(x,0) - x*t + ln(1 + exp(-|x|)). Returns the mean loss.
pub fn sigmoid_bce_forward(logits: &[f32], target: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &t) in logits.iter().zip(target) {
        let x = x as f64;
        let t = t as f64;
        acc += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    }
    acc / logits.len() as f64
}

/// d(mean BCE)/d(logits) = (sigmoid(x) - t) / N, scaled by the upstream grad.
pub fn sigmoid_bce_backward(logits: &[f32], target: &[f32], upstream: f32, dlogits: &mut [f32]) {
    let inv_n = upstream as f64 / logits.len() as f64;
    for i in 0..logits.len() {
        let s = 1.0 / (1.0 + (-(logits[i] as f64)).exp());
        dlogits[i] += ((s - target[i] as f64) * inv_n) as f32;
    }
}

pub fn sigmoid_inplace(data: &mut [f32]) {
    for v in data.iter_mut() {
        *v = (1.0 / (1.0 + (-(*v as f64)).exp())) as f32;
    }
}
