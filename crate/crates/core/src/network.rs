//! Layer configuration, shape-chain validation and the VGG-style classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, KERNEL};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of the AMD class in the two-way softmax.
pub const AMD_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { in_channels: usize, out_channels: usize },
    Relu,
    MaxPool2x2,
    Flatten,
    Dense { in_features: usize, out_features: usize },
    Softmax,
}

impl LayerSpec {
    /// Tag used in the weight file.
    pub fn tag(self) -> u8 {
        match self {
            LayerSpec::Conv3x3 { .. } => 1,
            LayerSpec::Dense { .. } => 2,
            LayerSpec::Relu => 3,
            LayerSpec::MaxPool2x2 => 4,
            LayerSpec::Flatten => 5,
            LayerSpec::Softmax => 6,
        }
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. })
    }

    /// Weight shape, fan-in and fan-out of a parameterized layer.
    fn param_layout(self) -> Option<(Vec<usize>, usize, usize)> {
        match self {
            LayerSpec::Conv3x3 { in_channels, out_channels } => Some((
                vec![out_channels, in_channels, KERNEL, KERNEL],
                in_channels * KERNEL * KERNEL,
                out_channels * KERNEL * KERNEL,
            )),
            LayerSpec::Dense { in_features, out_features } => {
                Some((vec![out_features, in_features], in_features, out_features))
            }
            _ => None,
        }
    }
}

/// Shape of an activation between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Image { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl ActShape {
    pub fn dims(self) -> Vec<usize> {
        match self {
            ActShape::Image { channels, height, width } => vec![channels, height, width],
            ActShape::Flat(n) => vec![n],
        }
    }
}

/// `[C, H, W]` of the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputDims {
    pub fn gray(width: usize, height: usize) -> Self {
        Self { channels: 1, height, width }
    }
}

/// Runs the shape chain and returns every intermediate shape (input first).
pub fn validate_chain(specs: &[LayerSpec], input: InputDims) -> Result<Vec<ActShape>> {
    let mut shape = ActShape::Image { channels: input.channels, height: input.height, width: input.width };
    if input.channels == 0 || input.height == 0 || input.width == 0 {
        return Err(Error::Config(format!("input dims must be positive: {input:?}")));
    }
    let mut shapes = vec![shape];
    let bad = |layer: usize, message: String| Error::Layer { layer, message };
    for (i, &spec) in specs.iter().enumerate() {
        shape = match (spec, shape) {
            (LayerSpec::Conv3x3 { in_channels, out_channels }, ActShape::Image { channels, height, width }) => {
                if in_channels != channels {
                    return Err(bad(i, format!("conv3x3 expects {in_channels} channels, receives {channels}")));
                }
                if out_channels == 0 {
                    return Err(bad(i, "conv3x3 needs at least one filter".into()));
                }
                ActShape::Image { channels: out_channels, height, width }
            }
            (LayerSpec::Relu, s) => s,
            (LayerSpec::MaxPool2x2, ActShape::Image { channels, height, width }) => {
                ActShape::Image { channels, height: height.div_ceil(2), width: width.div_ceil(2) }
            }
            (LayerSpec::Flatten, ActShape::Image { channels, height, width }) => {
                ActShape::Flat(channels * height * width)
            }
            (LayerSpec::Dense { in_features, out_features }, ActShape::Flat(n)) => {
                if in_features != n {
                    return Err(bad(i, format!("dense expects {in_features} features, receives {n}")));
                }
                if out_features == 0 {
                    return Err(bad(i, "dense needs at least one output".into()));
                }
                ActShape::Flat(out_features)
            }
            (LayerSpec::Softmax, ActShape::Flat(n)) => {
                if i + 1 != specs.len() {
                    return Err(bad(i, "softmax must be the final layer".into()));
                }
                ActShape::Flat(n)
            }
            (spec, s) => return Err(bad(i, format!("{spec:?} cannot follow activation {s:?}"))),
        };
        shapes.push(shape);
    }
    let n = specs.len();
    let tail_ok = n >= 2
        && matches!(specs[n - 2], LayerSpec::Dense { out_features: 2, .. })
        && specs[n - 1] == LayerSpec::Softmax;
    if !tail_ok {
        return Err(bad(n.saturating_sub(1), "network must end with dense(out_features=2) followed by softmax".into()));
    }
    Ok(shapes)
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchName {
    /// Four conv blocks (8/16/32/32 filters) and one 64-unit hidden layer.
    Desk,
    /// VGG16-style stack with halved filter widths.
    Full,
}

impl ArchName {
    pub fn specs(self, input: InputDims) -> Vec<LayerSpec> {
        match self {
            ArchName::Desk => vgg_specs(input, &[&[8], &[16], &[32], &[32]], &[64]),
            ArchName::Full => vgg_specs(
                input,
                &[&[32, 32], &[64, 64], &[128, 128, 128], &[256, 256, 256], &[256, 256, 256]],
                &[2048, 2048],
            ),
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchName::Desk => "desk",
            ArchName::Full => "full",
        })
    }
}

impl FromStr for ArchName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(ArchName::Desk),
            "full" => Ok(ArchName::Full),
            other => Err(Error::Config(format!("unknown network config {other:?} (expected desk or full)"))),
        }
    }
}

/// Conv blocks (each conv followed by ReLU, each block by a pool), then
/// hidden dense+ReLU layers, then the two-way classifier.
pub fn vgg_specs(input: InputDims, blocks: &[&[usize]], hidden: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
    for block in blocks {
        for &f in *block {
            specs.push(LayerSpec::Conv3x3 { in_channels: c, out_channels: f });
            specs.push(LayerSpec::Relu);
            c = f;
        }
        specs.push(LayerSpec::MaxPool2x2);
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    specs.push(LayerSpec::Flatten);
    let mut n = c * h * w;
    for &m in hidden {
        specs.push(LayerSpec::Dense { in_features: n, out_features: m });
        specs.push(LayerSpec::Relu);
        n = m;
    }
    specs.push(LayerSpec::Dense { in_features: n, out_features: 2 });
    specs.push(LayerSpec::Softmax);
    specs
}

/// Layer configuration plus learned parameters.
///
/// `params` holds `[weights, bias]` for each parameterized layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    input: InputDims,
    params: Vec<Tensor>,
    slots: Vec<Option<usize>>,
    seed: Option<u64>,
}

impl Network {
    /// Validates the chain and Xavier-initializes every weight from `seed`;
    /// biases start at zero.
    pub fn build(specs: Vec<LayerSpec>, input: InputDims, seed: u64) -> Result<Self> {
        validate_chain(&specs, input)?;
        let mut rng = Rng::new(seed);
        let mut params = Vec::new();
        for spec in &specs {
            if let Some((shape, fan_in, fan_out)) = spec.param_layout() {
                let bias_len = shape[0];
                params.push(nn::xavier_init(fan_in, fan_out, &shape, &mut rng)?);
                params.push(Tensor::zeros(&[bias_len]));
            }
        }
        let slots = param_slots(&specs);
        Ok(Self { specs, input, params, slots, seed: Some(seed) })
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_params(specs: Vec<LayerSpec>, input: InputDims, params: Vec<Tensor>) -> Result<Self> {
        validate_chain(&specs, input)?;
        let expected: Vec<Vec<usize>> = specs
            .iter()
            .filter_map(|s| s.param_layout())
            .flat_map(|(shape, _, _)| {
                let bias = vec![shape[0]];
                [shape, bias]
            })
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "configuration needs {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (want, got)) in expected.iter().zip(&params).enumerate() {
            if want.as_slice() != got.shape() {
                return Err(Error::Shape(format!("parameter tensor {i}: expected {want:?}, got {:?}", got.shape())));
            }
        }
        let slots = param_slots(&specs);
        Ok(Self { specs, input, params, slots, seed: None })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.params.iter_mut().for_each(|p| p.fill(0.0));
        out
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dims(&self) -> InputDims {
        self.input
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Weight and bias of layer `layer`, if it has parameters.
    pub fn layer_params(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        self.slots[layer].map(|s| (&self.params[s], &self.params[s + 1]))
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        let s = self.slots[layer]?;
        let (w, rest) = self.params[s..].split_at_mut(1);
        Some((&mut w[0], &mut rest[0]))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let want = [self.input.channels, self.input.height, self.input.width];
        if image.shape() != want {
            return Err(Error::Shape(format!("network expects input {want:?}, got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Pre-softmax outputs.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let mut x = image.clone();
        for (i, &spec) in self.specs.iter().enumerate() {
            x = match spec {
                LayerSpec::Softmax => break,
                _ => self.apply(i, spec, &x)?.0,
            };
        }
        x.ensure_finite("forward pass")
    }

    /// Class probabilities.
    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        Ok(nn::softmax(&self.logits(image)?))
    }

    /// Probability of the AMD class.
    pub fn forward(&self, image: &Tensor) -> Result<f32> {
        Ok(self.probabilities(image)?.data()[AMD_CLASS])
    }

    fn apply(&self, i: usize, spec: LayerSpec, x: &Tensor) -> Result<(Tensor, Option<Vec<u32>>)> {
        Ok(match spec {
            LayerSpec::Conv3x3 { .. } => {
                let (w, b) = self.layer_params(i).expect("conv has params");
                (nn::conv2d_forward(x, w, b)?, None)
            }
            LayerSpec::Dense { .. } => {
                let (w, b) = self.layer_params(i).expect("dense has params");
                (nn::dense_forward(x, w, b)?, None)
            }
            LayerSpec::Relu => (nn::relu(x), None),
            LayerSpec::MaxPool2x2 => {
                let p = nn::maxpool2x2(x)?;
                (p.output, Some(p.argmax))
            }
            LayerSpec::Flatten => {
                let n = x.len();
                (x.clone().reshape(&[n])?, None)
            }
            LayerSpec::Softmax => (nn::softmax(x), None),
        })
    }

    /// Forward and backward pass for one labelled sample.
    pub fn loss_and_grads(&self, image: &Tensor, label: usize) -> Result<SampleGrads> {
        self.check_input(image)?;
        let softmax_at = self.specs.len() - 1;
        let mut inputs: Vec<Tensor> = Vec::with_capacity(softmax_at);
        let mut argmaxes: Vec<Option<Vec<u32>>> = Vec::with_capacity(softmax_at);
        let mut x = image.clone();
        for (i, &spec) in self.specs[..softmax_at].iter().enumerate() {
            let (y, arg) = self.apply(i, spec, &x)?;
            inputs.push(std::mem::replace(&mut x, y));
            argmaxes.push(arg);
        }
        let head = nn::softmax_xent(&x.ensure_finite("forward pass")?, label)?;

        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut g = head.grad_logits;
        for i in (0..softmax_at).rev() {
            let input = &inputs[i];
            g = match self.specs[i] {
                LayerSpec::Conv3x3 { .. } => {
                    let (w, _) = self.layer_params(i).expect("conv has params");
                    let s = self.slots[i].expect("slot");
                    let cg = nn::conv2d_backward(input, w, &g)?;
                    grads[s] = cg.weights;
                    grads[s + 1] = cg.bias;
                    cg.input
                }
                LayerSpec::Dense { .. } => {
                    let (w, _) = self.layer_params(i).expect("dense has params");
                    let s = self.slots[i].expect("slot");
                    let dg = nn::dense_backward(input, w, &g)?;
                    grads[s] = dg.weights;
                    grads[s + 1] = dg.bias;
                    dg.input
                }
                LayerSpec::Relu => nn::relu_backward(input, &g)?,
                LayerSpec::MaxPool2x2 => {
                    let arg = argmaxes[i].as_ref().expect("pool argmax");
                    nn::maxpool2x2_backward(input.shape(), arg, &g)?
                }
                LayerSpec::Flatten => g.reshape(input.shape())?,
                LayerSpec::Softmax => unreachable!("softmax only at the tail"),
            };
        }
        Ok(SampleGrads { loss: head.loss, prob_amd: head.probs.data()[AMD_CLASS], grads })
    }
}

fn param_slots(specs: &[LayerSpec]) -> Vec<Option<usize>> {
    let mut next = 0;
    specs
        .iter()
        .map(|s| {
            s.has_params().then(|| {
                next += 2;
                next - 2
            })
        })
        .collect()
}

/// Loss and parameter gradients for one sample, aligned with [`Network::params`].
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub loss: f32,
    pub prob_amd: f32,
    pub grads: Vec<Tensor>,
}
