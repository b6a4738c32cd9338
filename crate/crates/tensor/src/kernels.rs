//! Forward and backward kernels on raw C×H×W buffers. The tape wires these
//! together; they are also usable directly for inference-only code.

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation. `w` is `out_c × in_c × k × k`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let n = g.out_h() * g.out_w();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.out_c * n];
    if let Some(b) = b {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(
            g.out_c,
            kk,
            n,
            T::one(),
            w,
            kk as isize,
            1,
            x,
            n as isize,
            1,
            beta,
            &mut out,
            n as isize,
            1,
        );
    } else {
        let mut cols = vec![T::zero(); kk * n];
        im2col(g, x, &mut cols);
        T::gemm(
            g.out_c,
            kk,
            n,
            T::one(),
            w,
            kk as isize,
            1,
            &cols,
            n as isize,
            1,
            beta,
            &mut out,
            n as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each requested output is accumulated into.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.out_h() * g.out_w();
    let kk = g.patch_len();
    if let Some(db) = db {
        for (o, chunk) in grad_out.chunks(n).enumerate() {
            db[o] = db[o] + chunk.iter().copied().sum::<T>();
        }
    }
    let pointwise = g.is_pointwise();
    if let Some(dw) = dw {
        // dw += grad_out · cols^T
        if pointwise {
            T::gemm(
                g.out_c,
                n,
                kk,
                T::one(),
                grad_out,
                n as isize,
                1,
                x,
                1,
                n as isize,
                T::one(),
                dw,
                kk as isize,
                1,
            );
        } else {
            let mut cols = vec![T::zero(); kk * n];
            im2col(g, x, &mut cols);
            T::gemm(
                g.out_c,
                n,
                kk,
                T::one(),
                grad_out,
                n as isize,
                1,
                &cols,
                1,
                n as isize,
                T::one(),
                dw,
                kk as isize,
                1,
            );
        }
    }
    if let Some(dx) = dx {
        // dcols = w^T · grad_out
        if pointwise {
            T::gemm(
                kk,
                g.out_c,
                n,
                T::one(),
                w,
                1,
                kk as isize,
                grad_out,
                n as isize,
                1,
                T::one(),
                dx,
                n as isize,
                1,
            );
        } else {
            let mut dcols = vec![T::zero(); kk * n];
            T::gemm(
                kk,
                g.out_c,
                n,
                T::one(),
                w,
                1,
                kk as isize,
                grad_out,
                n as isize,
                1,
                T::zero(),
                &mut dcols,
                n as isize,
                1,
            );
            col2im(g, &dcols, dx);
        }
    }
}

/// Source taps for ×2 bilinear upsampling (half-pixel centres, edge clamped):
/// output index `o` reads `0.75·src[a] + 0.25·src[b]`.
#[inline]
fn up_taps(o: usize, n: usize) -> (usize, usize) {
    let i = o / 2;
    let j = if o.is_multiple_of(2) { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
    (i, j)
}

pub fn upsample2x_forward<T: Scalar>(c: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let near = T::lit(0.75);
    let far = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (ya, yb) = up_taps(oy, h);
            for ox in 0..ow {
                let (xa, xb) = up_taps(ox, w);
                let top = near * src[ya * w + xa] + far * src[ya * w + xb];
                let bot = near * src[yb * w + xa] + far * src[yb * w + xb];
                dst[oy * ow + ox] = near * top + far * bot;
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(c: usize, h: usize, w: usize, grad_out: &[T], dx: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    let near = T::lit(0.75);
    let far = T::lit(0.25);
    for ch in 0..c {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (ya, yb) = up_taps(oy, h);
            for ox in 0..ow {
                let (xa, xb) = up_taps(ox, w);
                let v = g[oy * ow + ox];
                d[ya * w + xa] = d[ya * w + xa] + near * near * v;
                d[ya * w + xb] = d[ya * w + xb] + near * far * v;
                d[yb * w + xa] = d[yb * w + xa] + far * near * v;
                d[yb * w + xb] = d[yb * w + xb] + far * far * v;
            }
        }
    }
}

/// 2×2 mean pooling; identical to ×½ bilinear resampling with half-pixel centres.
pub fn avgpool2x_forward<T: Scalar>(c: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (2 * oy, 2 * ox);
                let s = src[y * w + x] + src[y * w + x + 1] + src[(y + 1) * w + x] + src[(y + 1) * w + x + 1];
                out[(ch * oh + oy) * ow + ox] = s * quarter;
            }
        }
    }
    out
}

pub fn avgpool2x_backward<T: Scalar>(c: usize, h: usize, w: usize, grad_out: &[T], dx: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    for ch in 0..c {
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = grad_out[(ch * oh + oy) * ow + ox] * quarter;
                let (y, x) = (2 * oy, 2 * ox);
                for idx in [y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1] {
                    d[idx] = d[idx] + v;
                }
            }
        }
    }
}

/// Bilinear sample position along one axis with border clamping.
#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// false when the requested coordinate was clamped (zero derivative).
    live: bool,
}

#[inline]
fn tap<T: Scalar>(pos: T, n: usize) -> Tap<T> {
    let max = T::lit((n - 1) as f64);
    let (p, live) = if pos < T::zero() {
        (T::zero(), false)
    } else if pos > max {
        (max, false)
    } else if pos.is_nan() {
        (T::zero(), false)
    } else {
        (pos, true)
    };
    let lo = p.floor().as_f64() as usize;
    let lo = lo.min(n - 1);
    let hi = (lo + 1).min(n - 1);
    Tap {
        lo,
        hi,
        frac: p - T::lit(lo as f64),
        live,
    }
}

/// Backward warp: `out(c, y, x) = bilinear(img(c), x + u(y, x), y + v(y, x))`,
/// sample coordinates clamped to the image border.
pub fn warp_forward<T: Scalar>(c: usize, h: usize, w: usize, img: &[T], flow: &[T]) -> Vec<T> {
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = tap(T::lit(x as f64) + flow[p], w);
            let ty = tap(T::lit(y as f64) + flow[plane + p], h);
            let (ax, ay) = (T::one() - tx.frac, T::one() - ty.frac);
            for ch in 0..c {
                let s = &img[ch * plane..(ch + 1) * plane];
                let v00 = s[ty.lo * w + tx.lo];
                let v01 = s[ty.lo * w + tx.hi];
                let v10 = s[ty.hi * w + tx.lo];
                let v11 = s[ty.hi * w + tx.hi];
                out[ch * plane + p] = v00 * ax * ay + v01 * tx.frac * ay + v10 * ax * ty.frac + v11 * tx.frac * ty.frac;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn warp_backward<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    img: &[T],
    flow: &[T],
    grad_out: &[T],
    mut d_img: Option<&mut [T]>,
    mut d_flow: Option<&mut [T]>,
) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = tap(T::lit(x as f64) + flow[p], w);
            let ty = tap(T::lit(y as f64) + flow[plane + p], h);
            let (ax, ay) = (T::one() - tx.frac, T::one() - ty.frac);
            let mut du = T::zero();
            let mut dv = T::zero();
            for ch in 0..c {
                let g = grad_out[ch * plane + p];
                let s = &img[ch * plane..(ch + 1) * plane];
                let (i00, i01, i10, i11) = (ty.lo * w + tx.lo, ty.lo * w + tx.hi, ty.hi * w + tx.lo, ty.hi * w + tx.hi);
                if let Some(d) = d_img.as_deref_mut() {
                    let d = &mut d[ch * plane..(ch + 1) * plane];
                    d[i00] = d[i00] + g * ax * ay;
                    d[i01] = d[i01] + g * tx.frac * ay;
                    d[i10] = d[i10] + g * ax * ty.frac;
                    d[i11] = d[i11] + g * tx.frac * ty.frac;
                }
                du = du + g * ((s[i01] - s[i00]) * ay + (s[i11] - s[i10]) * ty.frac);
                dv = dv + g * ((s[i10] - s[i00]) * ax + (s[i11] - s[i01]) * tx.frac);
            }
            if let Some(d) = d_flow.as_deref_mut() {
                if tx.live {
                    d[p] = d[p] + du;
                }
                if ty.live {
                    d[plane + p] = d[plane + p] + dv;
                }
            }
        }
    }
}

/// Number of mask logits per coarse pixel for convex upsampling by `factor`.
pub fn convex_mask_channels(factor: usize) -> usize {
    9 * factor * factor
}

#[inline]
fn clamp_offset(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

/// Softmax weights over the 3×3 neighbourhood for coarse pixel `p`, sub-pixel `s`.
/// Mask channel layout is `j * factor² + s` (neighbour-major).
#[inline]
pub fn convex_weights<T: Scalar>(logits: &[T], plane: usize, ff: usize, s: usize, p: usize) -> [T; 9] {
    let mut wts = [T::zero(); 9];
    let mut max = T::neg_infinity();
    for (j, v) in wts.iter_mut().enumerate() {
        *v = logits[(j * ff + s) * plane + p];
        if *v > max {
            max = *v;
        }
    }
    let mut total = T::zero();
    for v in wts.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in wts.iter_mut() {
        *v = *v / total;
    }
    wts
}

/// Learned convex upsampling: every fine pixel is a softmax-weighted combination
/// of the factor-scaled 3×3 coarse neighbourhood (edge replicated).
pub fn convex_upsample_forward<T: Scalar>(c: usize, h: usize, w: usize, factor: usize, flow: &[T], logits: &[T]) -> Vec<T> {
    let plane = h * w;
    let ff = factor * factor;
    let (oh, ow) = (h * factor, w * factor);
    let scale = T::lit(factor as f64);
    let mut out = vec![T::zero(); c * oh * ow];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut nbr = [0usize; 9];
            for (j, n) in nbr.iter_mut().enumerate() {
                *n = clamp_offset(y, j as isize / 3 - 1, h) * w + clamp_offset(x, j as isize % 3 - 1, w);
            }
            for s in 0..ff {
                let wts = convex_weights(logits, plane, ff, s, p);
                let (oy, ox) = (y * factor + s / factor, x * factor + s % factor);
                for ch in 0..c {
                    let src = &flow[ch * plane..(ch + 1) * plane];
                    let mut acc = T::zero();
                    for j in 0..9 {
                        acc = acc + wts[j] * src[nbr[j]];
                    }
                    out[(ch * oh + oy) * ow + ox] = acc * scale;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn convex_upsample_backward<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    flow: &[T],
    logits: &[T],
    grad_out: &[T],
    mut d_flow: Option<&mut [T]>,
    mut d_logits: Option<&mut [T]>,
) {
    let plane = h * w;
    let ff = factor * factor;
    let (oh, ow) = (h * factor, w * factor);
    let scale = T::lit(factor as f64);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut nbr = [0usize; 9];
            for (j, n) in nbr.iter_mut().enumerate() {
                *n = clamp_offset(y, j as isize / 3 - 1, h) * w + clamp_offset(x, j as isize % 3 - 1, w);
            }
            for s in 0..ff {
                let wts = convex_weights(logits, plane, ff, s, p);
                let (oy, ox) = (y * factor + s / factor, x * factor + s % factor);
                // a_j = Σ_c g_c · scale · flow_c(nbr_j)
                let mut a = [T::zero(); 9];
                for ch in 0..c {
                    let g = grad_out[(ch * oh + oy) * ow + ox] * scale;
                    let src = &flow[ch * plane..(ch + 1) * plane];
                    for j in 0..9 {
                        a[j] = a[j] + g * src[nbr[j]];
                    }
                    if let Some(d) = d_flow.as_deref_mut() {
                        let d = &mut d[ch * plane..(ch + 1) * plane];
                        for j in 0..9 {
                            d[nbr[j]] = d[nbr[j]] + g * wts[j];
                        }
                    }
                }
                if let Some(d) = d_logits.as_deref_mut() {
                    let mean: T = (0..9).map(|j| wts[j] * a[j]).sum();
                    for j in 0..9 {
                        let idx = (j * ff + s) * plane + p;
                        d[idx] = d[idx] + wts[j] * (a[j] - mean);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let k = g.kernel;
        let mut out = vec![0.0; g.out_c * oh * ow];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..g.in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    acc += w[((o * g.in_c + c) * k + ky) * k + kx] * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for &(kernel, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 1)] {
            let g = ConvGeometry {
                in_c: 3,
                in_h: 8,
                in_w: 6,
                out_c: 4,
                kernel,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..3 * 8 * 6).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.5).collect();
            let w: Vec<f64> = (0..4 * 3 * kernel * kernel).map(|i| ((i * 13 % 7) as f64) / 5.0 - 0.6).collect();
            let b = [0.1, -0.2, 0.3, 0.0];
            let got = conv2d_forward(&g, &x, &w, Some(&b));
            let want = naive_conv(&g, &x, &w, &b);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={kernel} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = vec![2.5f64; 2 * 3 * 4];
        let y = upsample2x_forward(2, 3, 4, &x);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn avgpool_is_block_mean() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = avgpool2x_forward(1, 4, 4, &x);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
