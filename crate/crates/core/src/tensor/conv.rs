//! Grouped 2-D convolution and its transpose, lowered to im2col + GEMM.
//!
//! Convention is cross-correlation (no kernel flip) with zero padding. A
//! kernel is laid out `out × in/groups × kH × kW`; the transposed convolution
//! reuses the same tensor so it maps `out` channels back to `in` channels and
//! is the exact adjoint of [`conv2d`] when both use the same kernel.

use std::borrow::Cow;

use super::{map_indices, Element, Tensor};
use crate::error::{Error, Result};

/// Stride, padding and group count of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// A convolution's weights together with its geometry.
#[derive(Debug, Clone)]
pub struct ConvParams<E: Element = f32> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<E: Element> ConvParams<E> {
    pub fn new(
        kernel: Tensor<E>,
        bias: Tensor<E>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let (out_ch, _, _, _) = kernel.dims4("conv params")?;
        check_spec("conv params", out_ch, ConvSpec::new(stride, padding, groups))?;
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.padding, self.groups)
    }

    /// `out·(in/groups)·kH·kW + |bias|`.
    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

fn check_spec(op: &'static str, out_ch: usize, spec: ConvSpec) -> Result<()> {
    if spec.stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if spec.groups == 0 || !out_ch.is_multiple_of(spec.groups) {
        return Err(Error::invalid(
            op,
            format!(
                "groups {} must divide output channels {out_ch}",
                spec.groups
            ),
        ));
    }
    Ok(())
}

/// `floor((input + 2·padding − kernel)/stride) + 1`.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if input + 2 * padding < kernel {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel extent {kernel} exceeds padded input {}", input + 2 * padding),
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// `(input − 1)·stride − 2·padding + kernel + output_padding` with
/// `output_padding = stride − 1`, so stride-2 layers exactly double the extent.
pub fn conv2d_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || input == 0 {
        return Err(Error::invalid("conv2d_transpose", "stride and input must be positive"));
    }
    let full = (input - 1) * stride + kernel + (stride - 1);
    if full <= 2 * padding {
        return Err(Error::invalid(
            "conv2d_transpose",
            format!("padding {padding} leaves no output"),
        ));
    }
    Ok(full - 2 * padding)
}

/// Index mapping between an image (`channels × img_h × img_w`) and its
/// column matrix (`channels·kH·kW × col_h·col_w`).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    img_h: usize,
    img_w: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    col_h: usize,
    col_w: usize,
}

impl Geometry {
    fn col_len(&self) -> usize {
        self.col_h * self.col_w
    }

    fn rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1
            && self.k_w == 1
            && self.stride == 1
            && self.pad == 0
            && self.col_h == self.img_h
            && self.col_w == self.img_w
    }

    /// Valid `[lo, hi)` range of column positions along one axis for kernel tap `k`.
    fn valid_range(&self, k: usize, img: usize, col: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let hi = if img + self.pad > k {
            ((img - 1 + self.pad - k) / s + 1).min(col)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<E: Element>(src: &[E], g: &Geometry, dst: &mut [E]) {
    let p = g.col_len();
    for c in 0..g.channels {
        let plane = &src[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..g.k_h {
            let (y_lo, y_hi) = g.valid_range(ki, g.img_h, g.col_h);
            for kj in 0..g.k_w {
                let (x_lo, x_hi) = g.valid_range(kj, g.img_w, g.col_w);
                let row = &mut dst[((c * g.k_h + ki) * g.k_w + kj) * p..][..p];
                for oy in 0..g.col_h {
                    let out = &mut row[oy * g.col_w..(oy + 1) * g.col_w];
                    if oy < y_lo || oy >= y_hi {
                        out.fill(E::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &plane[iy * g.img_w..(iy + 1) * g.img_w];
                    out[..x_lo].fill(E::zero());
                    out[x_hi..].fill(E::zero());
                    if g.stride == 1 {
                        let start = x_lo + kj - g.pad;
                        out[x_lo..x_hi].copy_from_slice(&line[start..start + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            out[ox] = line[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into an image buffer.
fn col2im<E: Element>(cols: &[E], g: &Geometry, dst: &mut [E]) {
    let p = g.col_len();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..g.k_h {
            let (y_lo, y_hi) = g.valid_range(ki, g.img_h, g.col_h);
            for kj in 0..g.k_w {
                let (x_lo, x_hi) = g.valid_range(kj, g.img_w, g.col_w);
                let row = &cols[((c * g.k_h + ki) * g.k_w + kj) * p..][..p];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &mut plane[iy * g.img_w..(iy + 1) * g.img_w];
                    let src = &row[oy * g.col_w..(oy + 1) * g.col_w];
                    for ox in x_lo..x_hi {
                        line[ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn add_bias<E: Element>(out: &mut [E], bias: &[E], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sum of `dy` over batch and space, accumulated in 64-bit.
fn bias_grad<E: Element>(dy: &[E], n: usize, channels: usize, plane: usize) -> Vec<E> {
    (0..channels)
        .map(|c| {
            let mut acc = 0.0f64;
            for b in 0..n {
                let start = (b * channels + c) * plane;
                acc += dy[start..start + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            E::from_f64(acc)
        })
        .collect()
}

fn sum_in_order<E: Element>(parts: impl Iterator<Item = Vec<E>>, len: usize) -> Vec<E> {
    let mut acc = vec![E::zero(); len];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

struct ConvShape {
    n: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    group_in: usize,
    group_out: usize,
    geom: Geometry,
}

fn conv_shape<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    spec: ConvSpec,
) -> Result<ConvShape> {
    let (n, in_ch, h, w) = x.dims4(op)?;
    let (out_ch, group_in, k_h, k_w) = kernel.dims4(op)?;
    check_spec(op, out_ch, spec)?;
    if group_in * spec.groups != in_ch {
        return Err(Error::ShapeMismatch {
            op,
            dim: "input channels",
            expected: group_in * spec.groups,
            actual: in_ch,
        });
    }
    if h + 2 * spec.padding < k_h {
        return Err(Error::ShapeMismatch {
            op,
            dim: "height",
            expected: k_h,
            actual: h + 2 * spec.padding,
        });
    }
    if w + 2 * spec.padding < k_w {
        return Err(Error::ShapeMismatch {
            op,
            dim: "width",
            expected: k_w,
            actual: w + 2 * spec.padding,
        });
    }
    let out_h = conv_output_size(h, k_h, spec.stride, spec.padding)?;
    let out_w = conv_output_size(w, k_w, spec.stride, spec.padding)?;
    Ok(ConvShape {
        n,
        in_ch,
        h,
        w,
        out_ch,
        out_h,
        out_w,
        group_in,
        group_out: out_ch / spec.groups,
        geom: Geometry {
            channels: group_in,
            img_h: h,
            img_w: w,
            k_h,
            k_w,
            stride: spec.stride,
            pad: spec.padding,
            col_h: out_h,
            col_w: out_w,
        },
    })
}

fn check_bias<E: Element>(op: &'static str, bias: Option<&Tensor<E>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::ShapeMismatch {
            op,
            dim: "bias",
            expected: channels,
            actual: b.len(),
        }),
        _ => Ok(()),
    }
}

/// Grouped 2-D cross-correlation of `x: N×Cin×H×W` with `kernel: Cout×Cin/g×kH×kW`.
pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: ConvSpec,
) -> Result<Tensor<E>> {
    let s = conv_shape("conv2d", x, kernel, spec)?;
    check_bias("conv2d", bias, s.out_ch)?;
    let g = s.geom;
    let p = g.col_len();
    let k = g.rows();
    let xs = x.data();
    let ks = kernel.data();
    let samples = map_indices(s.n, |b| {
        let mut out = vec![E::zero(); s.out_ch * p];
        let mut buf = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![E::zero(); k * p]
        };
        for grp in 0..spec.groups {
            let src = &xs[(b * s.in_ch + grp * s.group_in) * s.h * s.w..][..s.group_in * s.h * s.w];
            let cols: &[E] = if g.is_pointwise() {
                src
            } else {
                im2col(src, &g, &mut buf);
                &buf
            };
            let wk = &ks[grp * s.group_out * k..][..s.group_out * k];
            let dst = &mut out[grp * s.group_out * p..][..s.group_out * p];
            E::gemm(s.group_out, k, p, wk, (k as isize, 1), cols, (p as isize, 1), E::zero(), dst, (p as isize, 1));
        }
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), p);
        }
        out
    });
    Tensor::new(
        vec![s.n, s.out_ch, s.out_h, s.out_w],
        samples.into_iter().flatten().collect(),
    )
}

pub fn conv2d<E: Element>(x: &Tensor<E>, p: &ConvParams<E>) -> Result<Tensor<E>> {
    conv2d_forward(x, &p.kernel, Some(&p.bias), p.spec())
}

/// Gradients of a convolution with respect to its input, kernel and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<E: Element> {
    pub input: Option<Tensor<E>>,
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    dy: &Tensor<E>,
    spec: ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<E>> {
    let s = conv_shape("conv2d_backward", x, kernel, spec)?;
    let expect = [s.n, s.out_ch, s.out_h, s.out_w];
    if dy.shape() != expect {
        return Err(Error::InvalidShape {
            shape: dy.shape().to_vec(),
            reason: format!("conv2d_backward: upstream gradient must be {expect:?}"),
        });
    }
    let g = s.geom;
    let p = g.col_len();
    let k = g.rows();
    let (xs, ks, dys) = (x.data(), kernel.data(), dy.data());
    let parts = map_indices(s.n, |b| {
        let mut dk = vec![E::zero(); kernel.len()];
        let mut dx = if need_input {
            vec![E::zero(); s.in_ch * s.h * s.w]
        } else {
            Vec::new()
        };
        let mut cols = vec![E::zero(); if g.is_pointwise() { 0 } else { k * p }];
        let mut dcols = vec![E::zero(); if need_input { k * p } else { 0 }];
        for grp in 0..spec.groups {
            let src_off = (b * s.in_ch + grp * s.group_in) * s.h * s.w;
            let src = &xs[src_off..][..s.group_in * s.h * s.w];
            let col: Cow<[E]> = if g.is_pointwise() {
                Cow::Borrowed(src)
            } else {
                im2col(src, &g, &mut cols);
                Cow::Borrowed(&cols)
            };
            let dy_g = &dys[(b * s.out_ch + grp * s.group_out) * p..][..s.group_out * p];
            let dk_g = &mut dk[grp * s.group_out * k..][..s.group_out * k];
            // dK_g = dY_g · colsᵀ
            E::gemm(s.group_out, p, k, dy_g, (p as isize, 1), &col, (1, p as isize), E::zero(), dk_g, (k as isize, 1));
            if need_input {
                let wk = &ks[grp * s.group_out * k..][..s.group_out * k];
                // dcols = W_gᵀ · dY_g
                E::gemm(k, s.group_out, p, wk, (1, k as isize), dy_g, (p as isize, 1), E::zero(), &mut dcols, (p as isize, 1));
                let dst = &mut dx[grp * s.group_in * s.h * s.w..][..s.group_in * s.h * s.w];
                if g.is_pointwise() {
                    dst.iter_mut().zip(&dcols).for_each(|(d, &v)| *d += v);
                } else {
                    col2im(&dcols, &g, dst);
                }
            }
        }
        (dk, dx)
    });
    let mut dks = Vec::with_capacity(parts.len());
    let mut dxs = Vec::with_capacity(if need_input { x.len() } else { 0 });
    for (dk, dx) in parts {
        dks.push(dk);
        dxs.extend(dx);
    }
    let dkernel = sum_in_order(dks.into_iter(), kernel.len());
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.shape().to_vec(), dxs)?)
        } else {
            None
        },
        kernel: Tensor::new(kernel.shape().to_vec(), dkernel)?,
        bias: Tensor::new(vec![s.out_ch], bias_grad(dys, s.n, s.out_ch, p))?,
    })
}

struct TransposeShape {
    n: usize,
    in_ch: usize,
    out_ch: usize,
    out_h: usize,
    out_w: usize,
    plane: usize,
    geom: Geometry,
}

fn transpose_shape<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    spec: ConvSpec,
) -> Result<TransposeShape> {
    let (n, in_ch, h, w) = x.dims4(op)?;
    let (k_in, out_ch, k_h, k_w) = kernel.dims4(op)?;
    if spec.groups != 1 {
        return Err(Error::invalid(op, "only groups = 1 is supported"));
    }
    if spec.stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if k_in != in_ch {
        return Err(Error::ShapeMismatch {
            op,
            dim: "input channels",
            expected: k_in,
            actual: in_ch,
        });
    }
    let out_h = conv2d_transpose_output_size(h, k_h, spec.stride, spec.padding)?;
    let out_w = conv2d_transpose_output_size(w, k_w, spec.stride, spec.padding)?;
    Ok(TransposeShape {
        n,
        in_ch,
        out_ch,
        out_h,
        out_w,
        plane: h * w,
        geom: Geometry {
            channels: out_ch,
            img_h: out_h,
            img_w: out_w,
            k_h,
            k_w,
            stride: spec.stride,
            pad: spec.padding,
            col_h: h,
            col_w: w,
        },
    })
}

/// Transposed convolution of `x: N×Cin×H×W` with `kernel: Cin×Cout×kH×kW`.
pub fn conv2d_transpose_forward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: ConvSpec,
) -> Result<Tensor<E>> {
    let s = transpose_shape("conv2d_transpose", x, kernel, spec)?;
    check_bias("conv2d_transpose", bias, s.out_ch)?;
    let g = s.geom;
    let p = s.plane;
    let rows = g.rows();
    let out_plane = s.out_h * s.out_w;
    let (xs, ks) = (x.data(), kernel.data());
    let samples = map_indices(s.n, |b| {
        let mut cols = vec![E::zero(); rows * p];
        let src = &xs[b * s.in_ch * p..][..s.in_ch * p];
        // cols = Kᵀ · X
        E::gemm(rows, s.in_ch, p, ks, (1, rows as isize), src, (p as isize, 1), E::zero(), &mut cols, (p as isize, 1));
        let mut out = vec![E::zero(); s.out_ch * out_plane];
        col2im(&cols, &g, &mut out);
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), out_plane);
        }
        out
    });
    Tensor::new(
        vec![s.n, s.out_ch, s.out_h, s.out_w],
        samples.into_iter().flatten().collect(),
    )
}

pub fn conv2d_transpose<E: Element>(x: &Tensor<E>, p: &ConvParams<E>) -> Result<Tensor<E>> {
    conv2d_transpose_forward(x, &p.kernel, Some(&p.bias), p.spec())
}

pub fn conv2d_transpose_backward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    dy: &Tensor<E>,
    spec: ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<E>> {
    let s = transpose_shape("conv2d_transpose_backward", x, kernel, spec)?;
    let expect = [s.n, s.out_ch, s.out_h, s.out_w];
    if dy.shape() != expect {
        return Err(Error::InvalidShape {
            shape: dy.shape().to_vec(),
            reason: format!("conv2d_transpose_backward: upstream gradient must be {expect:?}"),
        });
    }
    let g = s.geom;
    let p = s.plane;
    let rows = g.rows();
    let out_plane = s.out_h * s.out_w;
    let (xs, ks, dys) = (x.data(), kernel.data(), dy.data());
    let parts = map_indices(s.n, |b| {
        let mut dcols = vec![E::zero(); rows * p];
        im2col(&dys[b * s.out_ch * out_plane..][..s.out_ch * out_plane], &g, &mut dcols);
        let src = &xs[b * s.in_ch * p..][..s.in_ch * p];
        let mut dk = vec![E::zero(); kernel.len()];
        // dK = X · dcolsᵀ
        E::gemm(s.in_ch, p, rows, src, (p as isize, 1), &dcols, (1, p as isize), E::zero(), &mut dk, (rows as isize, 1));
        let mut dx = Vec::new();
        if need_input {
            dx = vec![E::zero(); s.in_ch * p];
            // dX = K · dcols
            E::gemm(s.in_ch, rows, p, ks, (rows as isize, 1), &dcols, (p as isize, 1), E::zero(), &mut dx, (p as isize, 1));
        }
        (dk, dx)
    });
    let mut dks = Vec::with_capacity(parts.len());
    let mut dxs = Vec::new();
    for (dk, dx) in parts {
        dks.push(dk);
        dxs.extend(dx);
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(x.shape().to_vec(), dxs)?)
        } else {
            None
        },
        kernel: Tensor::new(kernel.shape().to_vec(), sum_in_order(dks.into_iter(), kernel.len()))?,
        bias: Tensor::new(vec![s.out_ch], bias_grad(dys, s.n, s.out_ch, out_plane))?,
    })
}
