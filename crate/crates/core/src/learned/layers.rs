//! Forward and backward kernels. Tensors are flat row-major `[n][c][h][w]`.

use super::linalg::{matmul, Real};

/// 3x3, stride 1, zero padding 1 patch matrix: `cols[(ci*9 + ky*3 + kx)][y*w + x]`.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx`.
pub fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

/// Shape of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    pub fn patch(&self) -> usize {
        self.cin * 9
    }
    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    pub fn out_len(&self) -> usize {
        self.cout * self.h * self.w
    }
}

/// `out[i] = weight (cout x cin*9) * im2col(x[i]) + bias`.
pub fn conv_forward<T: Real>(x: &[T], n: usize, s: ConvShape, weight: &[T], bias: &[T], out: &mut [T], cols: &mut Vec<T>) {
    let hw = s.h * s.w;
    cols.resize(s.patch() * hw, T::zero());
    for i in 0..n {
        im2col(&x[i * s.in_len()..(i + 1) * s.in_len()], s.cin, s.h, s.w, cols);
        let o = &mut out[i * s.out_len()..(i + 1) * s.out_len()];
        for (co, row) in o.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        matmul(weight, false, cols, false, o, s.cout, s.patch(), hw, T::one());
    }
}

/// Accumulates weight and bias gradients; writes the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    dz: &[T],
    n: usize,
    s: ConvShape,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dx: Option<&mut [T]>,
    cols: &mut Vec<T>,
    dcols: &mut Vec<T>,
) {
    let hw = s.h * s.w;
    cols.resize(s.patch() * hw, T::zero());
    if dx.is_some() {
        dcols.resize(s.patch() * hw, T::zero());
    }
    for i in 0..n {
        let g = &dz[i * s.out_len()..(i + 1) * s.out_len()];
        for (co, row) in g.chunks_exact(hw).enumerate() {
            dbias[co] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
        im2col(&x[i * s.in_len()..(i + 1) * s.in_len()], s.cin, s.h, s.w, cols);
        matmul(g, false, cols, true, dweight, s.cout, hw, s.patch(), T::one());
        if let Some(dx) = dx.as_deref_mut() {
            matmul(weight, true, g, false, dcols, s.patch(), s.cout, hw, T::zero());
            let d = &mut dx[i * s.in_len()..(i + 1) * s.in_len()];
            d.fill(T::zero());
            col2im_add(dcols, s.cin, s.h, s.w, d);
        }
    }
}

/// `y (n x out) = x (n x in) * weight^T + bias` with `weight` stored `out x in`.
pub fn linear_forward<T: Real>(x: &[T], n: usize, inp: usize, out: usize, weight: &[T], bias: &[T], y: &mut [T]) {
    for row in y.chunks_exact_mut(out).take(n) {
        row.copy_from_slice(bias);
    }
    matmul(x, false, weight, true, y, n, inp, out, T::one());
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    inp: usize,
    out: usize,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
) {
    matmul(dy, true, x, false, dweight, out, n, inp, T::one());
    for row in dy.chunks_exact(out).take(n) {
        for (b, &g) in dbias.iter_mut().zip(row) {
            *b += g;
        }
    }
    if let Some(dx) = dx {
        matmul(dy, false, weight, false, dx, n, out, inp, T::zero());
    }
}

/// Saved batch statistics for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training-mode batch norm over `[n][c][s]`, normalizing each channel across
/// the batch and `s` spatial positions. Updates the running statistics
/// (unbiased variance) with [`BN_MOMENTUM`].
#[allow(clippy::too_many_arguments)]
pub fn bn_forward_train<T: Real>(
    z: &[T],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    y: &mut [T],
) -> BnCache<T> {
    let m = (n * s) as f64;
    let eps = T::from_f64_lossy(BN_EPS);
    let mom = T::from_f64_lossy(BN_MOMENTUM);
    let mut xhat = vec![T::zero(); z.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |i: usize| (i * c + ch) * s..(i * c + ch + 1) * s;
        let mut sum = 0.0;
        for i in 0..n {
            sum += z[plane(i)].iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for i in 0..n {
            sq += z[plane(i)].iter().map(|v| (v.to_f64().unwrap_or(0.0) - mean).powi(2)).sum::<f64>();
        }
        let var = sq / m;
        let is = T::one() / (T::from_f64_lossy(var) + eps).sqrt();
        inv_std[ch] = is;
        let mean_t = T::from_f64_lossy(mean);
        for i in 0..n {
            let r = plane(i);
            for ((xh, out), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&z[r]) {
                *xh = (v - mean_t) * is;
                *out = gamma[ch] * *xh + beta[ch];
            }
        }
        let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
        running_mean[ch] = (T::one() - mom) * running_mean[ch] + mom * mean_t;
        running_var[ch] = (T::one() - mom) * running_var[ch] + mom * T::from_f64_lossy(unbiased);
    }
    BnCache { xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_forward_infer<T: Real>(
    z: &[T],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    y: &mut [T],
) {
    let eps = T::from_f64_lossy(BN_EPS);
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for i in 0..n {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            for (out, &v) in y[r.clone()].iter_mut().zip(&z[r]) {
                *out = v * scale + shift;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_backward<T: Real>(
    dy: &[T],
    cache: &BnCache<T>,
    n: usize,
    c: usize,
    s: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dz: &mut [T],
) {
    let m = T::from_usize(n * s).expect("count fits");
    for ch in 0..c {
        let plane = |i: usize| (i * c + ch) * s..(i * c + ch + 1) * s;
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for i in 0..n {
            let r = plane(i);
            for (&g, &xh) in dy[r.clone()].iter().zip(&cache.xhat[r]) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for i in 0..n {
            let r = plane(i);
            for ((d, &g), &xh) in dz[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&cache.xhat[r]) {
                *d = k * (m * g - sum_dy - xh * sum_dy_xhat);
            }
        }
    }
}

pub fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes gradients where the activation output was not positive.
pub fn relu_backward_in_place<T: Real>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with floor semantics over `planes` maps of `h x w`; `argmax`
/// receives the flat input index of each output's winner.
pub fn maxpool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T], argmax: &mut Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    argmax.resize(planes * oh * ow, 0);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = x[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub fn maxpool_backward<T: Real>(dout: &[T], argmax: &[u32], dx: &mut [T]) {
    dx.fill(T::zero());
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i as usize] += g;
    }
}
