//! Finite-difference checks for every layer kind. Each check runs `trials`
//! random instances and returns the worst relative error seen. The error of
//! a parameterized layer is taken over its whole gradient (input, weights
//! and bias as one vector): a bias gradient alone can be a near-cancelling
//! sum far below what a 1e-2 step resolves in 32-bit arithmetic.

use octnet::network::{InputDims, LayerSpec, Network};
use octnet::nn;
use octnet::{Rng, Tensor};

use super::{dot, finite_diff, rand_away_from_zero, rand_distinct, rand_tensor, rel_err, rel_err_joint, FD_EPS};

pub fn conv(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (c, f) = (1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let (h, w) = (1 + rng.below(5) as usize, 1 + rng.below(5) as usize);
        let x = rand_tensor(&[c, h, w], &mut rng, -1.0, 1.0);
        let k = rand_tensor(&[f, c, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[f], &mut rng, -1.0, 1.0);
        let r = rand_tensor(&[f, h, w], &mut rng, -1.0, 1.0);
        let g = nn::conv2d_backward(&x, &k, &r).unwrap();
        let fx = finite_diff(&x, FD_EPS, |x| dot(&nn::conv2d_forward(x, &k, &b).unwrap(), &r));
        let fk = finite_diff(&k, FD_EPS, |k| dot(&nn::conv2d_forward(&x, k, &b).unwrap(), &r));
        let fb = finite_diff(&b, FD_EPS, |b| dot(&nn::conv2d_forward(&x, &k, b).unwrap(), &r));
        worst = worst.max(rel_err_joint(&[(&g.input, &fx), (&g.weights, &fk), (&g.bias, &fb)]));
    }
    worst
}

pub fn relu(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 1 + rng.below(30) as usize;
        // Kinks stay farther than the step from every sample.
        let x = rand_away_from_zero(&[n], &mut rng, 5.0 * FD_EPS);
        let r = rand_tensor(&[n], &mut rng, -1.0, 1.0);
        let g = nn::relu_backward(&x, &r).unwrap();
        let fd = finite_diff(&x, FD_EPS, |x| dot(&nn::relu(x), &r));
        worst = worst.max(rel_err(&g, &fd));
    }
    worst
}

pub fn maxpool(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let c = 1 + rng.below(3) as usize;
        let (h, w) = (1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
        let x = rand_distinct(&[c, h, w], &mut rng, 10.0 * FD_EPS);
        let p = nn::maxpool2x2(&x).unwrap();
        let r = rand_tensor(p.output.shape(), &mut rng, -1.0, 1.0);
        let g = nn::maxpool2x2_backward(x.shape(), &p.argmax, &r).unwrap();
        let fd = finite_diff(&x, FD_EPS, |x| dot(&nn::maxpool2x2(x).unwrap().output, &r));
        worst = worst.max(rel_err(&g, &fd));
    }
    worst
}

pub fn dense(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (n, m) = (1 + rng.below(8) as usize, 1 + rng.below(8) as usize);
        let x = rand_tensor(&[n], &mut rng, -1.0, 1.0);
        let wt = rand_tensor(&[m, n], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[m], &mut rng, -1.0, 1.0);
        let r = rand_tensor(&[m], &mut rng, -1.0, 1.0);
        let g = nn::dense_backward(&x, &wt, &r).unwrap();
        let fx = finite_diff(&x, FD_EPS, |x| dot(&nn::dense_forward(x, &wt, &b).unwrap(), &r));
        let fw = finite_diff(&wt, FD_EPS, |w| dot(&nn::dense_forward(&x, w, &b).unwrap(), &r));
        let fb = finite_diff(&b, FD_EPS, |b| dot(&nn::dense_forward(&x, &wt, b).unwrap(), &r));
        worst = worst.max(rel_err_joint(&[(&g.input, &fx), (&g.weights, &fw), (&g.bias, &fb)]));
    }
    worst
}

pub fn softmax_xent(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let z = rand_tensor(&[2], &mut rng, -3.0, 3.0);
        let label = rng.below(2) as usize;
        let g = nn::softmax_xent(&z, label).unwrap().grad_logits;
        let fd = finite_diff(&z, FD_EPS, |z| nn::softmax_xent(z, label).unwrap().loss as f64);
        worst = worst.max(rel_err(&g, &fd));
    }
    worst
}

pub fn flatten(trials: usize, seed: u64) -> f64 {
    // Flatten is a reshape; its backward is checked through a conv -> flatten
    // -> dense -> softmax chain, which has no kinks.
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (h, w) = (1 + rng.below(4) as usize, 1 + rng.below(4) as usize);
        let input = InputDims::gray(w, h);
        let specs = vec![
            LayerSpec::Conv3x3 { in_channels: 1, out_channels: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { in_features: 2 * h * w, out_features: 2 },
            LayerSpec::Softmax,
        ];
        let net = Network::build(specs.clone(), input, rng.next_u64()).unwrap();
        let x = rand_tensor(&[1, h, w], &mut rng, -1.0, 1.0);
        let label = rng.below(2) as usize;
        let sg = net.loss_and_grads(&x, label).unwrap();
        let mut numeric = Vec::new();
        for p in 0..sg.grads.len() {
            let fd = finite_diff(&net.params()[p], FD_EPS, |v| {
                let mut params: Vec<Tensor> = net.params().to_vec();
                params[p] = v.clone();
                let n2 = Network::from_params(specs.clone(), input, params).unwrap();
                nn::softmax_xent(&n2.logits(&x).unwrap(), label).unwrap().loss as f64
            });
            numeric.push(fd);
        }
        let pairs: Vec<_> = sg.grads.iter().zip(&numeric).collect();
        worst = worst.max(rel_err_joint(&pairs));
    }
    worst
}

/// Every layer kind, `trials` instances each.
pub fn all(trials: usize) -> Vec<(&'static str, f64)> {
    vec![
        ("conv3x3", conv(trials, 1)),
        ("relu", relu(trials, 2)),
        ("maxpool2x2", maxpool(trials, 3)),
        ("dense", dense(trials, 4)),
        ("softmax_xent", softmax_xent(trials, 5)),
        ("flatten (network chain)", flatten(trials, 6)),
    ]
}
