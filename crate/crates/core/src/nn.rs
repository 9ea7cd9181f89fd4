//! Layer primitives with exact analytic gradients.
//!
//! All tensors are single samples: images are `[C, H, W]`, dense activations
//! are `[N]`. Arithmetic and accumulation are `f32` with a fixed loop order so
//! that results are bit-reproducible.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Kernel side of every convolution; padding is fixed at 1 ("same").
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// `c[m x n] = a[m x k] * b[k x n]`
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] = a[m x k] * b[n x k]^T`
pub(crate) fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f32>();
        }
    }
}

/// `c[m x n] = a[k x m]^T * b[k x n]`
pub(crate) fn matmul_at_b(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Unfolds a zero-padded `[C, H, W]` image into `[C*9, H*W]` patch columns.
fn im2col(input: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let plane = height * width;
    let mut cols = vec![0.0f32; channels * TAPS * plane];
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let dst = &mut cols[((c * TAPS) + dy * KERNEL + dx) * plane..][..plane];
                for y in 0..height {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * width..][..width];
                    let drow = &mut dst[y * width..][..width];
                    // Valid x range where 0 <= x + dx - 1 < width.
                    let x0 = 1usize.saturating_sub(dx);
                    let x1 = (width + 1 - dx).min(width);
                    for x in x0..x1 {
                        drow[x] = srow[x + dx - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Folds patch-column gradients back onto the `[C, H, W]` image grid.
fn col2im(cols: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let plane = height * width;
    let mut out = vec![0.0f32; channels * plane];
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let src = &cols[((c * TAPS) + dy * KERNEL + dx) * plane..][..plane];
                for y in 0..height {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let x0 = 1usize.saturating_sub(dx);
                    let x1 = (width + 1 - dx).min(width);
                    let drow = &mut dst[sy as usize * width..][..width];
                    let srow = &src[y * width..][..width];
                    for x in x0..x1 {
                        drow[x + dx - 1] += srow[x];
                    }
                }
            }
        }
    }
    out
}

fn check_conv_shapes(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    let (f, wc) = match weights.shape()[..] {
        [f, wc, KERNEL, KERNEL] => (f, wc),
        _ => return Err(Error::Shape(format!("conv weights must be [F, C, 3, 3], got {:?}", weights.shape()))),
    };
    if wc != c {
        return Err(Error::Shape(format!("conv expects {wc} input channels, got {c}")));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::Shape(format!("conv bias must be [{f}], got {:?}", b.shape())));
        }
    }
    Ok((c, h, w, f))
}

/// 3x3 convolution, stride 1, zero padding 1, via im2col and a GEMM.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w, f) = check_conv_shapes(input, weights, Some(bias))?;
    let plane = h * w;
    let cols = im2col(input.data(), c, h, w);
    let mut out = vec![0.0f32; f * plane];
    for (fi, chunk) in out.chunks_exact_mut(plane).enumerate() {
        chunk.fill(bias.data()[fi]);
    }
    matmul(weights.data(), &cols, f, c * TAPS, plane, &mut out);
    Tensor::new(vec![f, h, w], out)
}

/// Direct-summation reference for [`conv2d_forward`].
pub fn conv2d_forward_naive(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w, f) = check_conv_shapes(input, weights, Some(bias))?;
    let x = input.data();
    let k = weights.data();
    let mut out = vec![0.0f32; f * h * w];
    for fi in 0..f {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias.data()[fi];
                for ci in 0..c {
                    for dy in 0..KERNEL {
                        for dx in 0..KERNEL {
                            let sy = y as isize + dy as isize - 1;
                            let sx = xx as isize + dx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + sy as usize) * w + sx as usize]
                                * k[((fi * c + ci) * KERNEL + dy) * KERNEL + dx];
                        }
                    }
                }
                out[(fi * h + y) * w + xx] = acc;
            }
        }
    }
    Tensor::new(vec![f, h, w], out)
}

/// Gradients of a convolution with respect to its inputs and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (c, h, w, f) = check_conv_shapes(input, weights, None)?;
    if grad_out.shape() != [f, h, w] {
        return Err(Error::Shape(format!("conv grad_out must be [{f}, {h}, {w}], got {:?}", grad_out.shape())));
    }
    let plane = h * w;
    let taps = c * TAPS;
    let cols = im2col(input.data(), c, h, w);
    let g = grad_out.data();

    let grad_bias: Vec<f32> = g.chunks_exact(plane).map(|row| row.iter().sum()).collect();

    let mut grad_w = vec![0.0f32; f * taps];
    matmul_a_bt(g, &cols, f, plane, taps, &mut grad_w);

    let mut grad_cols = vec![0.0f32; taps * plane];
    matmul_at_b(weights.data(), g, taps, f, plane, &mut grad_cols);
    let grad_in = col2im(&grad_cols, c, h, w);

    Ok(ConvGrads {
        input: Tensor::new(vec![c, h, w], grad_in)?,
        weights: Tensor::new(weights.shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![f], grad_bias)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient passes only where the input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu grad_out {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Output of a 2x2 max pool plus the flat input index chosen for each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<u32>,
}

/// 2x2 stride-2 max pool in ceil mode: odd trailing rows/columns form
/// partial windows (as if padded with -inf).
pub fn maxpool2x2(input: &Tensor) -> Result<Pooled> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = usize::MAX;
                let mut best = f32::NEG_INFINITY;
                for y in (2 * oy)..(2 * oy + 2).min(h) {
                    for xx in (2 * ox)..(2 * ox + 2).min(w) {
                        let idx = (ci * h + y) * w + xx;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    Ok(Pooled { output: Tensor::new(vec![c, oh, ow], out)?, argmax })
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "maxpool grad_out has {} values for {} pooled cells",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx as usize] += v;
    }
    Ok(grad)
}

fn check_dense_shapes(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    let (m, n) = match weights.shape()[..] {
        [m, n] => (m, n),
        _ => return Err(Error::Shape(format!("dense weights must be [M, N], got {:?}", weights.shape()))),
    };
    if input.len() != n {
        return Err(Error::Shape(format!("dense layer expects {n} inputs, got {}", input.len())));
    }
    Ok((m, n))
}

/// `out = W * in + b`
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = check_dense_shapes(input, weights)?;
    if bias.shape() != [m] {
        return Err(Error::Shape(format!("dense bias must be [{m}], got {:?}", bias.shape())));
    }
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, &b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>())
        .collect();
    Tensor::new(vec![m], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (m, n) = check_dense_shapes(input, weights)?;
    if grad_out.len() != m {
        return Err(Error::Shape(format!("dense grad_out must have {m} values, got {}", grad_out.len())));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut grad_w = vec![0.0f32; m * n];
    for (row, &gi) in grad_w.chunks_exact_mut(n).zip(g) {
        for (dst, &xv) in row.iter_mut().zip(x) {
            *dst = gi * xv;
        }
    }
    let mut grad_in = vec![0.0f32; n];
    matmul_at_b(weights.data(), g, n, m, 1, &mut grad_in);
    Ok(DenseGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weights: Tensor::new(vec![m, n], grad_w)?,
        bias: Tensor::new(vec![m], g.to_vec())?,
    })
}

/// Softmax probabilities, cross-entropy loss and its gradient w.r.t. the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxXent {
    pub probs: Tensor,
    pub loss: f32,
    pub grad_logits: Tensor,
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    Tensor::new(logits.shape().to_vec(), exps.into_iter().map(|e| e / total).collect()).expect("shape preserved")
}

pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<SoftmaxXent> {
    if label >= logits.len() {
        return Err(Error::Shape(format!("label {label} out of range for {} logits", logits.len())));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax_xent input"));
    }
    let z = logits.data();
    let top = (0..z.len()).fold(0, |best, i| if z[i] > z[best] { i } else { best });
    let max = z[top];
    // ln(sum exp(z - max)) as ln_1p of the non-maximal terms, so a confident
    // prediction keeps full relative precision in its small loss.
    let rest: f32 = z.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, &v)| (v - max).exp()).sum();
    let probs = softmax(logits);
    let loss = ((max - z[label]) + rest.ln_1p()).max(0.0);
    let mut grad = probs.clone();
    // p[label] - 1 written as minus the other probabilities, avoiding cancellation.
    let others: f32 = probs.data().iter().enumerate().filter(|&(i, _)| i != label).map(|(_, &p)| p).sum();
    grad.data_mut()[label] = -others;
    Ok(SoftmaxXent { probs, loss, grad_logits: grad })
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

/// Glorot-uniform initialization of a tensor of the given shape.
pub fn xavier_init(fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Config("xavier_init needs fan_in, fan_out >= 1".into()));
    }
    let bound = xavier_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = bound * (2.0 * rng.next_f32() - 1.0);
            // Guard the closed bound against rounding in the multiply.
            v.clamp(-bound, bound)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Plain SGD: `p <- p - lr * g` for every element.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameter tensors but {} gradients", params.len(), grads.len())));
    }
    if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.add_scaled(g, -lr)?;
    }
    Ok(())
}
