use super::{Element, Tensor};
use crate::error::{Error, Result};

/// SeLU scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SeLU negative-branch coefficient.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
/// Lower clamp applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn maxpool2d<E: Element>(x: &Tensor<E>, window: usize, stride: usize) -> Result<Tensor<E>> {
    maxpool2d_with_indices(x, window, stride).map(|(y, _)| y)
}

/// Max pooling without padding; also returns the flat input index of each
/// output's maximum (first occurrence on ties).
pub fn maxpool2d_with_indices<E: Element>(
    x: &Tensor<E>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<E>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", "window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::invalid(
            "maxpool2d",
            format!("window {window} larger than input {h}×{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                }
                out.push(xs[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, idx))
}

pub fn maxpool2d_backward<E: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<E>,
) -> Result<Tensor<E>> {
    if argmax.len() != dy.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d_backward",
            dim: "elements",
            expected: argmax.len(),
            actual: dy.len(),
        });
    }
    let mut dx = Tensor::zeros(input_shape.to_vec())?;
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    Ok(dx)
}

pub fn selu_scalar(v: f64) -> f64 {
    if v > 0.0 {
        SELU_LAMBDA * v
    } else {
        SELU_LAMBDA * SELU_ALPHA * v.exp_m1()
    }
}

pub fn selu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let lambda = E::from_f64(SELU_LAMBDA);
    let la = E::from_f64(SELU_LAMBDA * SELU_ALPHA);
    x.map(|v| if v > E::zero() { lambda * v } else { la * v.exp_m1() })
}

pub fn selu_backward<E: Element>(x: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    same_len("selu_backward", x, dy)?;
    let lambda = E::from_f64(SELU_LAMBDA);
    let la = E::from_f64(SELU_LAMBDA * SELU_ALPHA);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > E::zero() { lambda * g } else { la * v.exp() * g })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn same_len<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            dim: "elements",
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Channel count (dim 1) and the number of elements per channel per sample.
fn channel_layout<E: Element>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::Rank {
            op,
            expected: 2,
            shape: x.shape().to_vec(),
        });
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Parametric ReLU with one slope per channel (dim 1).
pub fn prelu<E: Element>(x: &Tensor<E>, slopes: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, inner) = channel_layout("prelu", x)?;
    if slopes.len() != c {
        return Err(Error::ShapeMismatch {
            op: "prelu",
            dim: "channels",
            expected: c,
            actual: slopes.len(),
        });
    }
    let mut data = x.data().to_vec();
    for b in 0..n {
        for (ch, &a) in slopes.data().iter().enumerate() {
            for v in &mut data[(b * c + ch) * inner..][..inner] {
                if *v <= E::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub struct PreluGrads<E: Element> {
    pub input: Tensor<E>,
    pub slopes: Tensor<E>,
}

pub fn prelu_backward<E: Element>(
    x: &Tensor<E>,
    slopes: &Tensor<E>,
    dy: &Tensor<E>,
) -> Result<PreluGrads<E>> {
    let (n, c, inner) = channel_layout("prelu_backward", x)?;
    same_len("prelu_backward", x, dy)?;
    let mut dx = dy.data().to_vec();
    let mut da = vec![0.0f64; c];
    for b in 0..n {
        for (ch, &a) in slopes.data().iter().enumerate() {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                let v = x.data()[i];
                if v <= E::zero() {
                    da[ch] += (v * dy.data()[i]).as_f64();
                    dx[i] = a * dy.data()[i];
                }
            }
        }
    }
    Ok(PreluGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        slopes: Tensor::new(slopes.shape().to_vec(), da.into_iter().map(E::from_f64).collect())?,
    })
}

/// Spatial mean per channel: `N×C×H×W → N×C`.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| E::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<E: Element>(input_shape: &[usize], dy: &Tensor<E>) -> Result<Tensor<E>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::Rank {
            op: "global_avg_pool_backward",
            expected: 4,
            shape: input_shape.to_vec(),
        });
    };
    if dy.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            dim: "elements",
            expected: n * c,
            actual: dy.len(),
        });
    }
    let scale = E::from_f64(1.0 / (h * w) as f64);
    let data = dy
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, h * w))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Affine map `x·W + b` with `x: N×F`, `W: F×K`, `b: K`.
pub fn dense<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, f) = x.dims2("dense")?;
    let (wf, k) = weight.dims2("dense")?;
    if wf != f {
        return Err(Error::ShapeMismatch {
            op: "dense",
            dim: "features",
            expected: wf,
            actual: f,
        });
    }
    if bias.len() != k {
        return Err(Error::ShapeMismatch {
            op: "dense",
            dim: "bias",
            expected: k,
            actual: bias.len(),
        });
    }
    let mut out: Vec<E> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    E::gemm(n, f, k, x.data(), (f as isize, 1), weight.data(), (k as isize, 1), E::one(), &mut out, (k as isize, 1));
    Tensor::new(vec![n, k], out)
}

pub struct DenseGrads<E: Element> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn dense_backward<E: Element>(x: &Tensor<E>, weight: &Tensor<E>, dy: &Tensor<E>) -> Result<DenseGrads<E>> {
    let (n, f) = x.dims2("dense_backward")?;
    let (_, k) = weight.dims2("dense_backward")?;
    if dy.shape() != [n, k] {
        return Err(Error::ShapeMismatch {
            op: "dense_backward",
            dim: "upstream",
            expected: n * k,
            actual: dy.len(),
        });
    }
    let mut dx = vec![E::zero(); n * f];
    // dX = dY · Wᵀ
    E::gemm(n, k, f, dy.data(), (k as isize, 1), weight.data(), (1, k as isize), E::zero(), &mut dx, (f as isize, 1));
    let mut dw = vec![E::zero(); f * k];
    // dW = Xᵀ · dY
    E::gemm(f, n, k, x.data(), (1, f as isize), dy.data(), (k as isize, 1), E::zero(), &mut dw, (k as isize, 1));
    let db = (0..k)
        .map(|j| E::from_f64((0..n).map(|i| dy.data()[i * k + j].as_f64()).sum()))
        .collect();
    Ok(DenseGrads {
        input: Tensor::new(vec![n, f], dx)?,
        weight: Tensor::new(vec![f, k], dw)?,
        bias: Tensor::new(vec![k], db)?,
    })
}

/// Concatenates 4-D tensors along the channel axis, preserving order.
pub fn concat_channels<E: Element>(xs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.dims4("concat_channels")?;
    let mut total = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4("concat_channels")?;
        for (dim, expected, actual) in [("batch", n, xn), ("height", h, xh), ("width", w, xw)] {
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    dim,
                    expected,
                    actual,
                });
            }
        }
        total += xc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(vec![n, total, h, w], data)
}

/// Splits an upstream gradient back into per-input channel blocks.
pub fn concat_channels_backward<E: Element>(channels: &[usize], dy: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(channels.len());
    for &c in channels {
        out.push(dy.slice_channels(start..start + c)?);
        start += c;
    }
    let (_, total, _, _) = dy.dims4("concat_channels_backward")?;
    if start != total {
        return Err(Error::ShapeMismatch {
            op: "concat_channels_backward",
            dim: "channels",
            expected: start,
            actual: total,
        });
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction; sums accumulated in 64-bit.
pub fn softmax<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, k) = x.dims2("softmax")?;
    if k < 2 {
        return Err(Error::invalid("softmax", "needs at least two classes"));
    }
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(k) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| E::from_f64(e / sum)));
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Given the softmax output `y`, `dx = y ⊙ (dy − ⟨dy, y⟩)` per row.
pub fn softmax_backward<E: Element>(y: &Tensor<E>, dy: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, k) = y.dims2("softmax_backward")?;
    same_len("softmax_backward", y, dy)?;
    let mut data = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(k).zip(dy.data().chunks(k)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        data.extend(
            yr.iter()
                .zip(gr)
                .map(|(&a, &g)| E::from_f64(a.as_f64() * (g.as_f64() - dot))),
        );
    }
    Tensor::new(y.shape().to_vec(), data)
}

fn check_labels(op: &'static str, n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op,
            dim: "labels",
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(op, format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}

/// Mean of `−ln(max(p[label], 1e-12))` over rows.
pub fn cross_entropy<E: Element>(probs: &Tensor<E>, labels: &[usize]) -> Result<E> {
    let (n, k) = probs.dims2("cross_entropy")?;
    check_labels("cross_entropy", n, k, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data()[i * k + l].as_f64().max(LOG_CLAMP).ln())
        .sum();
    Ok(E::from_f64(total / n as f64))
}

pub fn cross_entropy_backward<E: Element>(probs: &Tensor<E>, labels: &[usize], dloss: E) -> Result<Tensor<E>> {
    let (n, k) = probs.dims2("cross_entropy_backward")?;
    check_labels("cross_entropy_backward", n, k, labels)?;
    let mut d = vec![E::zero(); n * k];
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * k + l].as_f64();
        if p > LOG_CLAMP {
            d[i * k + l] = E::from_f64(-dloss.as_f64() / (n as f64 * p));
        }
    }
    Tensor::new(vec![n, k], d)
}
