//! Dense `f64` NCHW tensors and the convolution kernels behind the network.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::par;
use crate::plane::Plane;
use crate::resample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        contract!(
            data.len() == shape.numel(),
            "tensor {shape} needs {} values, got {}",
            shape.numel(),
            data.len()
        );
        Ok(Tensor { shape, data })
    }

    /// Stacks single-channel planes into an `N x 1 x H x W` batch.
    pub fn from_planes(planes: &[Plane<f64>]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Argument("cannot batch zero planes".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            contract!(p.dims() == (h, w), "batch planes must share dimensions");
            data.extend_from_slice(p.as_slice());
        }
        Ok(Tensor {
            shape: Shape::new(planes.len(), 1, h, w),
            data,
        })
    }

    /// Stacks tensors of identical `C x H x W` along the batch axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("cannot batch zero tensors".into()))?
            .shape();
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in parts {
            let s = t.shape;
            contract!(
                (s.c, s.h, s.w) == (first.c, first.h, first.w),
                "batch members must share C x H x W"
            );
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        contract!(
            shape.numel() == self.shape.numel(),
            "cannot reshape {} into {shape}",
            self.shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let len = self.shape.plane_len();
        let off = (n * self.shape.c + c) * len;
        &self.data[off..off + len]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> Plane<f64> {
        Plane::new(self.shape.h, self.shape.w, self.channel(n, c).to_vec())
            .expect("channel length matches shape")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        contract!(
            self.shape == other.shape,
            "elementwise shape mismatch {} vs {}",
            self.shape,
            other.shape
        );
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?
            .shape;
        let mut c = 0;
        for p in parts {
            contract!(
                p.shape.n == first.n && p.shape.h == first.h && p.shape.w == first.w,
                "concat mismatch {} vs {}",
                p.shape,
                first
            );
            c += p.shape.c;
        }
        let shape = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.sample(n));
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor> {
        let s = self.shape;
        let hw = s.plane_len();
        let mut outs: Vec<Tensor> = counts
            .iter()
            .map(|&c| Tensor::zeros(Shape::new(s.n, c, s.h, s.w)))
            .collect();
        for n in 0..s.n {
            let src = self.sample(n);
            let mut off = 0;
            for (o, &c) in outs.iter_mut().zip(counts) {
                let len = c * hw;
                o.data[n * len..(n + 1) * len].copy_from_slice(&src[off..off + len]);
                off += len;
            }
        }
        outs
    }

    /// Channels `start..start + count`.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let s = self.shape;
        contract!(
            start + count <= s.c,
            "channel range {start}+{count} outside {s}"
        );
        let hw = s.plane_len();
        let shape = Shape::new(s.n, count, s.h, s.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            let off = (n * s.c + start) * hw;
            data.extend_from_slice(&self.data[off..off + count * hw]);
        }
        Ok(Tensor { shape, data })
    }

    /// Adjoint of [`Tensor::narrow_channels`]: zero-pads back to `total` channels.
    pub fn widen_channels(&self, total: usize, start: usize) -> Tensor {
        let s = self.shape;
        let hw = s.plane_len();
        let mut out = Tensor::zeros(Shape::new(s.n, total, s.h, s.w));
        for n in 0..s.n {
            let off = (n * total + start) * hw;
            out.data[off..off + s.c * hw].copy_from_slice(self.sample(n));
        }
        out
    }

    /// Repeats a single channel `c` times.
    pub fn expand_channels(&self, c: usize) -> Result<Tensor> {
        contract!(
            self.shape.c == 1,
            "expand needs one channel, got {}",
            self.shape
        );
        let s = self.shape;
        let shape = Shape::new(s.n, c, s.h, s.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            for _ in 0..c {
                data.extend_from_slice(self.sample(n));
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Sums channels into one (adjoint of [`Tensor::expand_channels`]).
    pub fn sum_channels(&self) -> Tensor {
        let s = self.shape;
        let hw = s.plane_len();
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
        for n in 0..s.n {
            let dst = &mut out.data[n * hw..(n + 1) * hw];
            for c in 0..s.c {
                dst.iter_mut()
                    .zip(self.channel(n, c))
                    .for_each(|(d, v)| *d += v);
            }
        }
        out
    }

    fn per_plane(
        &self,
        oh: usize,
        ow: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Sync + Send,
    ) -> Tensor {
        let s = self.shape;
        let planes = par::map_range(s.n * s.c, |i| {
            let len = s.plane_len();
            f(&self.data[i * len..(i + 1) * len])
        });
        Tensor {
            shape: Shape::new(s.n, s.c, oh, ow),
            data: planes.concat(),
        }
    }

    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Tensor {
        let s = self.shape;
        if (s.h, s.w) == (oh, ow) {
            return self.clone();
        }
        self.per_plane(oh, ow, |p| resample::bilinear(p, s.h, s.w, oh, ow))
    }

    /// Adjoint of [`Tensor::resize_bilinear`]; `self` is the gradient at the output size.
    pub fn resize_bilinear_adjoint(&self, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        if (s.h, s.w) == (h, w) {
            return self.clone();
        }
        self.per_plane(h, w, |g| resample::bilinear_adjoint(g, h, w, s.h, s.w))
    }

    pub fn avg_pool(&self, k: usize) -> Result<Tensor> {
        let s = self.shape;
        contract!(
            k > 0 && s.h % k == 0 && s.w % k == 0,
            "avg_pool window {k} does not divide {}x{}",
            s.h,
            s.w
        );
        Ok(self.per_plane(s.h / k, s.w / k, |p| resample::avg_pool(p, s.h, s.w, k)))
    }

    pub fn avg_pool_adjoint(&self, k: usize) -> Tensor {
        let s = self.shape;
        let (h, w) = (s.h * k, s.w * k);
        self.per_plane(h, w, |g| resample::avg_pool_adjoint(g, h, w, k))
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// `k`x`k`, stride 1, size-preserving padding.
    pub const fn same(kernel: usize) -> Self {
        ConvGeometry::new(kernel, 1, kernel / 2)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel;
        contract!(
            h + 2 * self.padding >= k && w + 2 * self.padding >= k && self.stride > 0,
            "kernel {k} larger than padded input {h}x{w}"
        );
        Ok((
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    geo: ConvGeometry,
}

impl ConvDims {
    fn patch_len(&self) -> usize {
        self.c * self.geo.kernel * self.geo.kernel
    }
}

fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.geo.kernel;
    let (s, p) = (d.geo.stride as isize, d.geo.padding as isize);
    let cols = d.oh * d.ow;
    let mut out = vec![0.0; d.patch_len() * cols];
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            dst[oy * d.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.geo.kernel;
    let (s, p) = (d.geo.stride as isize, d.geo.padding as isize);
    let n_cols = d.oh * d.ow;
    let mut out = vec![0.0; d.c * d.h * d.w];
    for ci in 0..d.c {
        let plane = &mut out[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n` with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the (m, k, n) layout above.
    unsafe {
        matrixmultiply::dgemm(
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_dims(x: Shape, weight: Shape, geo: ConvGeometry) -> Result<ConvDims> {
    contract!(
        weight.c == x.c && weight.h == geo.kernel && weight.w == geo.kernel,
        "conv weight {weight} incompatible with input {x} and kernel {}",
        geo.kernel
    );
    let (oh, ow) = geo.output_dims(x.h, x.w)?;
    Ok(ConvDims {
        c: x.c,
        h: x.h,
        w: x.w,
        oh,
        ow,
        geo,
    })
}

/// 2-D cross-correlation. `weight` is `[out, in, k, k]`, `bias` is `[out, 1, 1, 1]`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    let d = conv_dims(xs, ws, geo)?;
    if let Some(b) = bias {
        contract!(
            b.shape().numel() == ws.n,
            "bias length must equal output channels"
        );
    }
    let co = ws.n;
    let cols = d.oh * d.ow;
    let samples = par::map_range(xs.n, |n| {
        let input = x.sample(n);
        let patches;
        let b_mat: &[f64] = if geo.is_pointwise() {
            input
        } else {
            patches = im2col(input, &d);
            &patches
        };
        let mut out = vec![0.0; co * cols];
        gemm(
            co,
            d.patch_len(),
            cols,
            weight.data(),
            false,
            b_mat,
            false,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                out[o * cols..(o + 1) * cols]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        out
    });
    Tensor::from_vec(Shape::new(xs.n, co, d.oh, d.ow), samples.concat())
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
) -> Result<ConvGrads> {
    let xs = x.shape();
    let ws = weight.shape();
    let d = conv_dims(xs, ws, geo)?;
    let co = ws.n;
    let cols = d.oh * d.ow;
    let gs = grad_out.shape();
    contract!(
        gs == Shape::new(xs.n, co, d.oh, d.ow),
        "conv grad shape {gs} does not match output"
    );
    let patch = d.patch_len();
    let per_sample = par::map_range(xs.n, |n| {
        let input = x.sample(n);
        let g = grad_out.sample(n);
        let patches;
        let b_mat: &[f64] = if geo.is_pointwise() {
            input
        } else {
            patches = im2col(input, &d);
            &patches
        };
        let mut dw = vec![0.0; co * patch];
        gemm(co, cols, patch, g, false, b_mat, true, &mut dw, false);
        let db: Vec<f64> = (0..co)
            .map(|o| g[o * cols..(o + 1) * cols].iter().sum())
            .collect();
        let mut dcols = vec![0.0; patch * cols];
        gemm(
            patch,
            co,
            cols,
            weight.data(),
            true,
            g,
            false,
            &mut dcols,
            false,
        );
        let dx = if geo.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, &d)
        };
        (dw, db, dx)
    });
    let mut dw = vec![0.0; co * patch];
    let mut db = vec![0.0; co];
    let mut dx = Vec::with_capacity(xs.numel());
    for (sw, sb, sx) in per_sample {
        dw.iter_mut().zip(&sw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&sb).for_each(|(a, b)| *a += b);
        dx.extend(sx);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(xs, dx)?,
        weight: Tensor::from_vec(ws, dw)?,
        bias: Tensor::from_vec(Shape::new(co, 1, 1, 1), db)?,
    })
}
