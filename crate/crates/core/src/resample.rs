//! Resampling and pooling kernels on single row-major channels.
//!
//! Every forward kernel has a matching adjoint so the autograd tape and the
//! loss functions can route gradients through the same arithmetic.

/// One output coordinate of a linear interpolation along a single axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
}

/// Interpolation taps with half-pixel centers (align-corners disabled).
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; oh * ow];
    for (oy, ry) in ty.iter().enumerate() {
        let r0 = &src[ry.lo * w..ry.lo * w + w];
        let r1 = &src[ry.hi * w..ry.hi * w + w];
        let row = &mut out[oy * ow..oy * ow + ow];
        for (ox, cx) in tx.iter().enumerate() {
            let top = r0[cx.lo] * (1.0 - cx.frac) + r0[cx.hi] * cx.frac;
            let bottom = r1[cx.lo] * (1.0 - cx.frac) + r1[cx.hi] * cx.frac;
            row[ox] = top * (1.0 - ry.frac) + bottom * ry.frac;
        }
    }
    out
}

/// Adjoint of [`bilinear`]: scatters output gradients back onto the source grid.
pub fn bilinear_adjoint(grad: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return grad.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; h * w];
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, cx) in tx.iter().enumerate() {
            let g = grad[oy * ow + ox];
            let gt = g * (1.0 - ry.frac);
            let gb = g * ry.frac;
            out[ry.lo * w + cx.lo] += gt * (1.0 - cx.frac);
            out[ry.lo * w + cx.hi] += gt * cx.frac;
            out[ry.hi * w + cx.lo] += gb * (1.0 - cx.frac);
            out[ry.hi * w + cx.hi] += gb * cx.frac;
        }
    }
    out
}

/// Nearest-neighbour source index (floor of the scaled coordinate).
pub(crate) fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    ((o * in_len) / out_len).min(in_len - 1)
}

pub fn nearest<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = nearest_index(oy, h, oh);
        for ox in 0..ow {
            out.push(src[sy * w + nearest_index(ox, w, ow)]);
        }
    }
    out
}

/// Non-overlapping `k`x`k` average pooling; `h` and `w` must be multiples of `k`.
pub fn avg_pool(src: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh * k {
        let oy = y / k;
        for x in 0..ow * k {
            out[oy * ow + x / k] += src[y * w + x];
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

pub fn avg_pool_adjoint(grad: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let ow = w / k;
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = grad[(y / k) * ow + x / k] * norm;
        }
    }
    out
}

/// Stride-1 box mean over a `k`x`k` window with zero padding, always divided
/// by `k*k` (padding counts toward the window).
pub fn box_mean_zero_padded(src: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    // Summed-area table with a zero row/column prefix.
    let sw = w + 1;
    let mut sat = vec![0.0; (h + 1) * sw];
    for y in 0..h {
        let mut run = 0.0;
        for x in 0..w {
            run += src[y * w + x];
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + run;
        }
    }
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let s = sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0] + sat[y0 * sw + x0];
            out[y * w + x] = s * norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let src: Vec<f64> = (0..12).map(|v| v as f64 * 0.3).collect();
        assert_eq!(bilinear(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn upsample_by_two_matches_half_pixel_rule() {
        // 1-D ramp [0, 1] upsampled to 4 samples: taps at -0.25, 0.25, 0.75, 1.25.
        let out = bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let (h, w, oh, ow) = (5, 7, 11, 3);
        let x: Vec<f64> = (0..h * w)
            .map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.4)
            .collect();
        let g: Vec<f64> = (0..oh * ow)
            .map(|i| ((i * 13) % 11) as f64 / 11.0 - 0.5)
            .collect();
        let ax = bilinear(&x, h, w, oh, ow);
        let atg = bilinear_adjoint(&g, h, w, oh, ow);
        let lhs: f64 = ax.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&atg).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn box_mean_matches_direct_window_sum() {
        let (h, w, k) = (6, 5, 3);
        let src: Vec<f64> = (0..h * w).map(|i| (i % 4) as f64).collect();
        let fast = box_mean_zero_padded(&src, h, w, k);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            s += src[(yy as usize) * w + xx as usize];
                        }
                    }
                }
                assert!((fast[y as usize * w + x as usize] - s / 9.0).abs() < 1e-12);
            }
        }
    }
}
