//! Forward kernels and the backward kernels the graph pairs them with.
//!
//! Every reduction (matmul, pooling, softmax sums, layer-norm statistics)
//! accumulates in `f64` and rounds once on output.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::shape(format!(
            "{what} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `[n, k] x [k, m] -> [n, m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (k2, m) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = gemm(a.data(), b.data(), n, k, m);
    Tensor::new(&[n, m], out)
}

fn gemm(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let row = &a[i * k..(i + 1) * k];
        for (p, &aip) in row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let brow = &b[p * m..(p + 1) * m];
            for (acc, &bv) in acc.iter_mut().zip(brow) {
                *acc += aip * bv as f64;
            }
        }
        for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = src[i * m + j];
        }
    }
    Tensor::new(&[m, n], out)
}

/// `y = x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, weight)?;
    if let Some(b) = bias {
        let out = weight.shape()[1];
        if b.shape() != [out] {
            return Err(Error::shape(format!(
                "linear bias shape {:?} does not match output width {out}",
                b.shape()
            )));
        }
        for row in y.data_mut().chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || weight.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects C×H×W input and O×C×kh×kw weights, got {input:?} and {weight:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c_in {
            return Err(Error::shape(format!(
                "conv2d input has {c_in} channels but kernel expects {wc}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source offset for (patch row, output position), or `None` in the zero padding.
    fn source(&self, c: usize, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<usize> {
        let y = (oi * self.stride + ki) as isize - self.padding as isize;
        let x = (oj * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((c * self.h + y as usize) * self.w + x as usize)
        }
    }
}

fn im2col(x: &[f32], g: &Conv2dGeometry) -> Vec<f32> {
    let p = g.positions();
    let mut col = vec![0.0f32; g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        if let Some(src) = g.source(c, ki, kj, oi, oj) {
                            dst[oi * g.out_w + oj] = x[src];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &Conv2dGeometry) -> Vec<f32> {
    let p = g.positions();
    let mut x = vec![0.0f64; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        if let Some(dst) = g.source(c, ki, kj, oi, oj) {
                            x[dst] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
    x.into_iter().map(|v| v as f32).collect()
}

/// 2D cross-correlation of a single `C_in×H×W` image with zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Conv2dGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                b.shape(),
                g.c_out
            )));
        }
    }
    let col = im2col(input.data(), &g);
    let mut out = gemm(weight.data(), &col, g.c_out, g.patch_len(), g.positions());
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(g.positions()).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(&[g.c_out, g.out_h, g.out_w], out)
}

pub(crate) struct Conv2dGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Conv2dGrads {
    let g = Conv2dGeometry::new(input.shape(), weight.shape(), stride, padding)
        .expect("geometry validated in forward");
    let (k, p) = (g.patch_len(), g.positions());
    let col = im2col(input.data(), &g);
    let dy = grad_out.data();
    let w = weight.data();

    // dW[o, r] = sum_p dY[o, p] col[r, p]
    let mut dw = vec![0.0f32; g.c_out * k];
    for o in 0..g.c_out {
        let dyo = &dy[o * p..(o + 1) * p];
        for r in 0..k {
            let colr = &col[r * p..(r + 1) * p];
            let s: f64 = dyo.iter().zip(colr).map(|(&a, &b)| a as f64 * b as f64).sum();
            dw[o * k + r] = s as f32;
        }
    }
    let db = (0..g.c_out)
        .map(|o| dy[o * p..(o + 1) * p].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();

    // dcol[r, p] = sum_o W[o, r] dY[o, p]
    let mut dcol = vec![0.0f64; k * p];
    for o in 0..g.c_out {
        let dyo = &dy[o * p..(o + 1) * p];
        for r in 0..k {
            let wr = w[o * k + r] as f64;
            if wr == 0.0 {
                continue;
            }
            for (d, &v) in dcol[r * p..(r + 1) * p].iter_mut().zip(dyo) {
                *d += wr * v as f64;
            }
        }
    }
    Conv2dGrads {
        input: col2im(&dcol, &g),
        weight: dw,
        bias: db,
    }
}

fn pooled_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len <= kernel {
        1
    } else {
        (len - kernel).div_ceil(stride) + 1
    }
}

/// Ceil-mode max pooling over `C×H×W`; windows hanging off the edge are clipped.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    max_pool2d_with_indices(input, kernel, stride).map(|(t, _)| t)
}

pub(crate) fn max_pool2d_with_indices(
    input: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(input, 3, "max_pool2d")?;
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d kernel and stride must be >= 1"));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (pooled_len(h, kernel, stride), pooled_len(w, kernel, stride));
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = usize::MAX;
                for y in i * stride..(i * stride + kernel).min(h) {
                    for xx in j * stride..(j * stride + kernel).min(w) {
                        let idx = (ch * h + y) * w + xx;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

/// Half-open source window `[floor(i·n/m), ceil((i+1)·n/m))` for output index `i`.
pub fn adaptive_window(i: usize, n: usize, m: usize) -> (usize, usize) {
    ((i * n) / m, ((i + 1) * n).div_ceil(m))
}

pub fn adaptive_avg_pool2d(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    expect_rank(input, 3, "adaptive_avg_pool2d")?;
    let (oh, ow) = target;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(format!(
            "adaptive_avg_pool2d target must be non-zero, got {target:?}"
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1) = adaptive_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_window(j, w, ow);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[(ch * h + y) * w + xx] as f64;
                    }
                }
                out.push((acc / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub(crate) fn adaptive_avg_pool2d_backward(grad_out: &Tensor, input_shape: &[usize]) -> Vec<f32> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let dy = grad_out.data();
    let mut dx = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            let (y0, y1) = adaptive_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = adaptive_window(j, w, ow);
                let share = dy[(ch * oh + i) * ow + j] as f64 / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[(ch * h + y) * w + xx] += share;
                    }
                }
            }
        }
    }
    dx.into_iter().map(|v| v as f32).collect()
}

/// `(outer, len, inner)` strides for iterating slices along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (x[at(k)] as f64 - max).exp();
                sum += *b;
            }
            for (k, &b) in buf.iter().enumerate() {
                out[at(k)] = (b / sum) as f32;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub(crate) fn softmax_backward(output: &Tensor, grad_out: &Tensor, axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(output.shape(), axis).expect("validated in forward");
    let (y, dy) = (output.data(), grad_out.data());
    let mut dx = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| y[at(k)] as f64 * dy[at(k)] as f64).sum();
            for k in 0..len {
                dx[at(k)] = (y[at(k)] as f64 * (dy[at(k)] as f64 - dot)) as f32;
            }
        }
    }
    dx
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Per-row statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct RowStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    layer_norm_with_stats(input, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_with_stats(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, RowStats)> {
    let d = *input.shape().last().expect("tensors have rank >= 1");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm affine shapes {:?}/{:?} do not match last dim {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let rows = input.numel() / d;
    let mut out = Vec::with_capacity(input.numel());
    let mut stats = RowStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for row in input.data().chunks(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps as f64).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((((v as f64 - mean) * rstd) * g as f64 + b as f64) as f32);
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(input.shape(), out)?, stats))
}

pub(crate) struct LayerNormGrads {
    pub input: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub(crate) fn layer_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &RowStats,
    grad_out: &Tensor,
) -> LayerNormGrads {
    let d = gamma.numel();
    let mut dx = Vec::with_capacity(input.numel());
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    let mut xhat = vec![0.0f64; d];
    let mut dxhat = vec![0.0f64; d];
    for (r, (row, dyrow)) in input.data().chunks(d).zip(grad_out.data().chunks(d)).enumerate() {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        for k in 0..d {
            xhat[k] = (row[k] as f64 - mean) * rstd;
            dxhat[k] = dyrow[k] as f64 * gamma.data()[k] as f64;
            dgamma[k] += dyrow[k] as f64 * xhat[k];
            dbeta[k] += dyrow[k] as f64;
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for k in 0..d {
            dx.push((rstd * (dxhat[k] - m1 - xhat[k] * m2)) as f32);
        }
    }
    LayerNormGrads {
        input: dx,
        gamma: dgamma.into_iter().map(|v| v as f32).collect(),
        beta: dbeta.into_iter().map(|v| v as f32).collect(),
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Logistic sigmoid, kept inside the open interval (0, 1) even where `f32` would saturate.
pub fn sigmoid(input: &Tensor) -> Tensor {
    const LO: f32 = f32::MIN_POSITIVE;
    const HI: f32 = 1.0 - f32::EPSILON / 2.0;
    input.map(|v| ((1.0 / (1.0 + (-(v as f64)).exp())) as f32).clamp(LO, HI))
}

/// Inverted-dropout keep mask: each entry is `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f32, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    let scale = 1.0 / (1.0 - rate);
    Ok(Tensor::from_fn(shape, |_| {
        if rng.random::<f32>() < rate {
            0.0
        } else {
            scale
        }
    }))
}

pub(crate) fn check_rate(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f32,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.shape(), rate, rng)?;
    mul(input, &mask)
}

fn zip_same(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "mul", |x, y| x * y)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.ndim();
    let (outer, _, inner) = axis_split(first.shape(), axis)?;
    for p in parts {
        let same = p.ndim() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::shape(format!(
                "concat along axis {axis}: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, out)
}

/// Slice `[start, start+len)` along `axis`.
pub fn narrow(input: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis)?;
    if len == 0 || start + len > n {
        return Err(Error::shape(format!(
            "narrow [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            input.shape()
        )));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&input.data()[base..base + len * inner]);
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let x = Tensor::ones(&[1, 3, 3]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, Tensor::full(&[1, 3, 3], 2.0));
    }

    #[test]
    fn conv_two_by_two_dot_product() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_dirac_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| i as f32 * 0.5 - 3.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_output_geometry_with_stride() {
        let x = Tensor::ones(&[2, 7, 6]);
        let w = Tensor::ones(&[3, 2, 3, 3]);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        // floor((7+2-3)/2)+1 = 4, floor((6+2-3)/2)+1 = 3
        assert_eq!(y.shape(), &[3, 4, 3]);
        // interior window sums 2 channels × 9 ones
        assert_eq!(y.at(&[0, 1, 1]), 18.0);
        // corner window sees 2×2 real pixels per channel
        assert_eq!(y.at(&[0, 0, 0]), 8.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::ones(&[2, 3, 3]);
        let w = Tensor::ones(&[1, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn adaptive_pool_identity_and_global_mean() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i * 7 % 5) as f32);
        assert_eq!(adaptive_avg_pool2d(&x, (3, 4)).unwrap(), x);
        let ones = Tensor::ones(&[1, 4, 4]);
        assert_eq!(adaptive_avg_pool2d(&ones, (1, 1)).unwrap().data(), &[1.0]);
    }

    #[test]
    fn adaptive_pool_overlapping_windows() {
        let (a, b, c) = (1.0f32, 4.0, 9.0);
        let x = t(&[1, 3, 1], &[a, b, c]);
        let y = adaptive_avg_pool2d(&x, (2, 1)).unwrap();
        assert_eq!(y.data(), &[(a + b) / 2.0, (b + c) / 2.0]);
    }

    #[test]
    fn adaptive_pool_upsamples_short_inputs() {
        let x = t(&[1, 2, 1], &[1.0, 3.0]);
        let y = adaptive_avg_pool2d(&x, (5, 1)).unwrap();
        // windows: [0,1) [0,1) [0,2) [1,2) [1,2)
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn adaptive_pool_rejects_zero_target() {
        let x = Tensor::ones(&[1, 2, 2]);
        assert!(adaptive_avg_pool2d(&x, (0, 1)).is_err());
    }

    #[test]
    fn max_pool_ceil_mode() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 5.0, 7.0, 8.0]);
        let single = max_pool2d(&Tensor::ones(&[1, 1, 1]), 2, 2).unwrap();
        assert_eq!(single.shape(), &[1, 1, 1]);
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let y = softmax(&t(&[2], &[0.0, 2f32.ln()]), 0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_shift_invariant_along_both_axes() {
        let x = Tensor::from_fn(&[4, 5], |i| ((i * 37) % 11) as f32 * 0.3 - 1.0);
        let shifted = x.map(|v| v + 7.5);
        for axis in 0..2 {
            let a = softmax(&x, axis).unwrap();
            let b = softmax(&shifted, axis).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        let constant = Tensor::full(&[2, 4], 3.5);
        let y = layer_norm(&constant, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-6)
            .unwrap();
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((y.data()[0] as f64 - expect).abs() < 1e-7);
        assert!((y.data()[1] as f64 + expect).abs() < 1e-7);

        let x = Tensor::from_fn(&[3, 4], |i| i as f32);
        let y = layer_norm(&x, &Tensor::zeros(&[4]), &Tensor::full(&[4], 0.25), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn layer_norm_moments() {
        let x = Tensor::from_fn(&[3, 16], |i| ((i * 29) % 17) as f32 * 0.7 - 2.0);
        let y = layer_norm(&x, &Tensor::ones(&[16]), &Tensor::zeros(&[16]), 1e-6).unwrap();
        for row in y.data().chunks(16) {
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let v = row.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[10, 10], |i| i as f32);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.9, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_is_binomial() {
        let n = 10_000usize;
        let rate = 0.6f32;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y = dropout(&Tensor::ones(&[n]), rate, true, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64;
        let p = 1.0 - rate as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((survivors - n as f64 * p).abs() < 3.0 * sigma, "{survivors}");
        let scale = 1.0 / (1.0 - rate);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == scale));
    }

    #[test]
    fn dropout_deterministic_given_seed() {
        let x = Tensor::ones(&[64]);
        let a = dropout(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dropout(&x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn concat_and_narrow_invert() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as f32);
        let b = Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f32);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(narrow(&c, 1, 0, 1).unwrap(), a);
        assert_eq!(narrow(&c, 1, 1, 2).unwrap(), b);
        assert!(narrow(&c, 1, 2, 2).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 1], &[1.0, 0.0, -1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert_eq!(
            transpose2d(&a).unwrap().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
        assert!(matmul(&a, &a).is_err());
    }
}
