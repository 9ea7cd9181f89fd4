//! Independent oracles shared by the integration suites. Nothing here calls
//! the code path it is used to check.
#![allow(dead_code)]

pub mod cli;
pub mod gradcheck;

use octnet::image::GrayImage;
use octnet::{Rng, Tensor};

pub const FD_EPS: f32 = 1e-2;
pub const FD_TOL: f64 = 1e-3;

pub fn rand_tensor(shape: &[usize], rng: &mut Rng, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values with magnitude in [min_abs, 1], random sign.
pub fn rand_away_from_zero(shape: &[usize], rng: &mut Rng, min_abs: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(min_abs, 1.0);
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced `gap` apart in random order.
pub fn rand_distinct(shape: &[usize], rng: &mut Rng, gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * gap).collect();
    rng.shuffle(&mut data);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum_i r_i * t_i` in f64.
pub fn dot(t: &Tensor, r: &Tensor) -> f64 {
    t.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central differences of a scalar function with respect to every element of `x`.
pub fn finite_diff(x: &Tensor, eps: f32, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        grad.data_mut()[i] = ((f(&plus) - f(&minus)) / step) as f32;
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &Tensor| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// `rel_err` over several tensors taken as one concatenated vector, e.g. a
/// layer's input, weight and bias gradients together.
pub fn rel_err_joint(pairs: &[(&Tensor, &Tensor)]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in pairs {
        assert_eq!(a.shape(), b.shape());
        for (&x, &y) in a.data().iter().zip(b.data()) {
            diff += (x as f64 - y as f64).powi(2);
            na += (x as f64).powi(2);
            nb += (y as f64).powi(2);
        }
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Histogram equalization by direct counting: for each pixel, count pixels
/// at or below its level, then apply the rounding formula in f64.
pub fn equalize_brute_force(img: &GrayImage) -> GrayImage {
    let px = img.pixels();
    let n = px.len() as f64;
    let min_level = *px.iter().min().unwrap();
    let cdf_min = px.iter().filter(|&&p| p == min_level).count() as f64;
    if n == cdf_min {
        return img.clone();
    }
    let out = px
        .iter()
        .map(|&v| {
            let cdf = px.iter().filter(|&&p| p <= v).count() as f64;
            (255.0 * (cdf - cdf_min) / (n - cdf_min) + 0.5).floor() as u8
        })
        .collect();
    GrayImage::new(img.width(), img.height(), out).unwrap()
}

/// Probability a random positive outscores a random negative, ties 1/2.
pub fn mann_whitney_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Random scores on a coarse grid (so ties are common) containing both classes.
pub fn random_scored(rng: &mut Rng, max_n: usize) -> (Vec<f64>, Vec<u8>) {
    loop {
        let n = 2 + rng.below(max_n as u64 - 1) as usize;
        let levels = 1 + rng.below(12);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels + 1) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

pub fn random_image(rng: &mut Rng, w: usize, h: usize) -> GrayImage {
    // Narrow random range for some images so histograms have gaps.
    let lo = rng.below(200) as u8;
    let span = 1 + rng.below(255 - lo as u64) as u8;
    let px = (0..w * h).map(|_| lo + rng.below(span as u64 + 1).min(span as u64) as u8).collect();
    GrayImage::new(w, h, px).unwrap()
}

/// Direct restatement of the stopping rule over whole sequences. Returns the
/// index of the eval that stops training (if any) and the index of the best
/// eval up to that point (highest accuracy, earliest on ties).
pub fn stop_trace(accs: &[f64], interval_losses: &[f64], patience: usize) -> (Option<usize>, usize) {
    let mut run = 0;
    for k in 0..accs.len() {
        let best_before = accs[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let degraded = k > 0 && accs[k] < best_before && interval_losses[k] < interval_losses[k - 1];
        run = if degraded { run + 1 } else { 0 };
        if run >= patience {
            return (Some(k), best_index(&accs[..=k]));
        }
    }
    (None, best_index(accs))
}

fn best_index(accs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in accs.iter().enumerate() {
        if a > accs[best] {
            best = i;
        }
    }
    best
}

/// Small network for training tests: conv -> relu -> pool -> flatten -> dense -> softmax.
pub fn small_specs(w: usize, h: usize) -> Vec<octnet::LayerSpec> {
    use octnet::LayerSpec::*;
    vec![
        Conv3x3 { in_channels: 1, out_channels: 2 },
        Relu,
        MaxPool2x2,
        Flatten,
        Dense { in_features: 2 * w.div_ceil(2) * h.div_ceil(2), out_features: 2 },
        Softmax,
    ]
}
