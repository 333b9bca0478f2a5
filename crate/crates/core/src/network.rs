//! The modified-VGG13 network: 8 conv layers in four blocks, four pooled
//! dropout stages, two 1024-unit fully connected layers, and a sigmoid output
//! head whose width is 17 for pre-training and 12 for fine-tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input spatial size the architecture is laid out for.
pub const INPUT_SIZE: usize = 64;
/// Flattened feature width entering FC5 (256 channels at 4x4).
pub const FLAT_FEATURES: usize = 256 * 4 * 4;
const FC_WIDTH: usize = 1024;
const CONV_DROP: f64 = 0.25;
const FC_DROP: f64 = 0.5;

/// One row of the architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    /// 3x3 convolution, stride 1, padding 1.
    Conv { name: &'static str, in_channels: usize, out_channels: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    Dropout { p: f64 },
    Flatten,
    Linear { name: &'static str, in_features: usize, out_features: usize },
    Sigmoid,
}

/// Network = layer descriptors + named parameters in layer order.
pub struct Network<T: Scalar> {
    layers: Vec<LayerDesc>,
    params: Vec<(String, Tensor<T>)>,
    in_channels: usize,
    num_outputs: usize,
}

fn layer_plan(in_channels: usize, num_outputs: usize) -> Vec<LayerDesc> {
    use LayerDesc::*;
    let mut plan = Vec::new();
    let blocks: [(&[&'static str], usize); 4] = [
        (&["conv1-1", "conv1-2"], 64),
        (&["conv2-1", "conv2-2"], 128),
        (&["conv3-1", "conv3-2", "conv3-3"], 256),
        (&["conv4-1", "conv4-2", "conv4-3"], 256),
    ];
    let mut prev = in_channels;
    for (names, width) in blocks {
        for &name in names {
            plan.push(Conv { name, in_channels: prev, out_channels: width });
            plan.push(Relu);
            prev = width;
        }
        plan.push(MaxPool { window: 2, stride: 2 });
        plan.push(Dropout { p: CONV_DROP });
    }
    plan.push(Flatten);
    plan.push(Linear { name: "fc5", in_features: FLAT_FEATURES, out_features: FC_WIDTH });
    plan.push(Relu);
    plan.push(Dropout { p: FC_DROP });
    plan.push(Linear { name: "fc6", in_features: FC_WIDTH, out_features: FC_WIDTH });
    plan.push(Relu);
    plan.push(Dropout { p: FC_DROP });
    plan.push(Linear { name: "output", in_features: FC_WIDTH, out_features: num_outputs });
    plan.push(Sigmoid);
    plan
}

/// Fan-in-scaled uniform init: U[-b, b] with b = sqrt(1/fan_in), applied to
/// weights and biases alike. Draws are made in f64 so f32 and f64 networks
/// built from the same seed hold the same values.
fn init_param<T: Scalar>(dims: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = dims.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_parts(dims, data, true, None).requires_grad(true)
}

/// Build the network with deterministic parameters for the given seed.
pub fn build_vgg13<T: Scalar>(in_channels: usize, num_outputs: usize, seed: u64) -> Result<Network<T>> {
    if in_channels != 1 && in_channels != 3 {
        return Err(Error::config(format!(
            "in_channels must be 1 (grayscale) or 3 (rgb), got {in_channels}"
        )));
    }
    if num_outputs < 1 {
        return Err(Error::config("num_outputs must be >= 1"));
    }
    let layers = layer_plan(in_channels, num_outputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for layer in &layers {
        match layer {
            LayerDesc::Conv { name, in_channels, out_channels } => {
                let fan_in = in_channels * 9;
                params.push((format!("{name}.weight"), init_param(vec![*out_channels, *in_channels, 3, 3], fan_in, &mut rng)));
                params.push((format!("{name}.bias"), init_param(vec![*out_channels], fan_in, &mut rng)));
            }
            LayerDesc::Linear { name, in_features, out_features } => {
                params.push((format!("{name}.weight"), init_param(vec![*out_features, *in_features], *in_features, &mut rng)));
                params.push((format!("{name}.bias"), init_param(vec![*out_features], *in_features, &mut rng)));
            }
            _ => {}
        }
    }
    Ok(Network { layers, params, in_channels, num_outputs })
}

impl<T: Scalar> Network<T> {
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    /// Parameters in layer order.
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn named_parameters(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Batched forward pass. Input must be `[B, C, 64, 64]` (or `[C, 64, 64]`)
    /// with `C` matching the build configuration; dropout fires only when
    /// `training` is true.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor<T>, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        Ok(self.forward_traced(batch, training, rng)?.0)
    }

    /// Forward pass that also reports the output dims after every layer,
    /// for auditing against the architecture table.
    pub fn forward_traced<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<(String, Vec<usize>)>)> {
        let dims = batch.dims();
        let (c, h, w) = match dims.as_slice() {
            [_, c, h, w] | [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::shape(format!("forward expects rank 3/4 input, got {:?}", dims))),
        };
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, network was built for {}",
                self.in_channels
            )));
        }
        if h != INPUT_SIZE || w != INPUT_SIZE {
            return Err(Error::shape(format!(
                "input spatial dims {h}x{w}, expected {INPUT_SIZE}x{INPUT_SIZE}"
            )));
        }

        let mut trace = Vec::new();
        let mut x = batch.clone();
        let mut param_idx = 0usize;
        for layer in &self.layers {
            x = match layer {
                LayerDesc::Conv { name, .. } => {
                    let weight = &self.params[param_idx].1;
                    let bias = &self.params[param_idx + 1].1;
                    param_idx += 2;
                    let y = x.conv2d(weight, bias, 1, 1)?;
                    trace.push((name.to_string(), y.dims()));
                    y
                }
                LayerDesc::Relu => x.relu(),
                LayerDesc::MaxPool { window, stride } => {
                    let y = x.maxpool2d(*window, *stride)?;
                    trace.push(("maxpool".to_string(), y.dims()));
                    y
                }
                LayerDesc::Dropout { p } => x.dropout(*p, training, rng)?,
                LayerDesc::Flatten => x.flatten()?,
                LayerDesc::Linear { name, .. } => {
                    let weight = &self.params[param_idx].1;
                    let bias = &self.params[param_idx + 1].1;
                    param_idx += 2;
                    let y = x.linear(weight, bias)?;
                    trace.push((name.to_string(), y.dims()));
                    y
                }
                LayerDesc::Sigmoid => x.sigmoid(),
            };
        }
        debug_assert_eq!(param_idx, self.params.len(), "forward must use every parameter exactly once");
        Ok((x, trace))
    }

    /// Eval-mode forward; deterministic pure function of (parameters, input).
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // never consulted in eval mode
        self.forward(batch, false, &mut rng)
    }

    /// New network with a re-initialized output layer of the requested width;
    /// every other parameter is copied bit-for-bit.
    pub fn replace_head(&self, new_num_outputs: usize, seed: u64) -> Result<Network<T>> {
        if new_num_outputs < 1 {
            return Err(Error::config("replace_head needs num_outputs >= 1"));
        }
        let layers = layer_plan(self.in_channels, new_num_outputs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.params.len());
        for (name, tensor) in &self.params {
            if name == "output.weight" {
                params.push((name.clone(), init_param(vec![new_num_outputs, FC_WIDTH], FC_WIDTH, &mut rng)));
            } else if name == "output.bias" {
                params.push((name.clone(), init_param(vec![new_num_outputs], FC_WIDTH, &mut rng)));
            } else {
                params.push((name.clone(), tensor.detached().requires_grad(true)));
            }
        }
        Ok(Network { layers, params, in_channels: self.in_channels, num_outputs: new_num_outputs })
    }

    /// Deep copy with detached parameters.
    pub fn clone_detached(&self) -> Network<T> {
        Network {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.detached().requires_grad(true)))
                .collect(),
            in_channels: self.in_channels,
            num_outputs: self.num_outputs,
        }
    }

    /// Copy of all parameter data, for best-weights restoration.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<T>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::shape(format!(
                "snapshot has {} entries, network has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for ((_, p), s) in self.params.iter().zip(snapshot.iter()) {
            p.set_data(s)?;
        }
        Ok(())
    }
}
