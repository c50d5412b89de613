//! Layers and the reference `SmallCamNet` classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{window_output_extent, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::CellGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Dense,
    Relu,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Real = f32> {
    pub name: String,
    pub kind: LayerKind,
    /// Conv kernels are `[out, in, kH, kW]`; dense weights are `[out, in]`.
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Layer<T> {
    pub fn conv2d(name: &str, weight: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::contract(format!(
                "conv layer `{name}` needs kernel [out, in, kH, kW] and bias [out], got {:?} / {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            name: name.into(),
            kind: LayerKind::Conv2d { stride, padding },
            weight: Some(weight.with_requires_grad(true)),
            bias: Some(bias.with_requires_grad(true)),
        })
    }

    pub fn dense(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::contract(format!(
                "dense layer `{name}` needs weight [out, in] and bias [out], got {:?} / {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            name: name.into(),
            kind: LayerKind::Dense,
            weight: Some(weight.with_requires_grad(true)),
            bias: Some(bias.with_requires_grad(true)),
        })
    }

    pub fn stateless(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            weight: None,
            bias: None,
        }
    }

    /// Output extents `[C, H, W]` (or `[F]`) for a single-sample input of the given extents.
    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || {
            Error::contract(format!(
                "layer `{}` ({:?}) cannot take input extents {input:?}",
                self.name, self.kind
            ))
        };
        match self.kind {
            LayerKind::Conv2d { stride, padding } => {
                let w = self.weight.as_ref().ok_or_else(bad)?;
                let &[c, h, wd] = input else { return Err(bad()) };
                if c != w.shape()[1] {
                    return Err(bad());
                }
                let oh = window_output_extent(h, w.shape()[2], stride, padding).ok_or_else(bad)?;
                let ow = window_output_extent(wd, w.shape()[3], stride, padding).ok_or_else(bad)?;
                Ok(vec![w.shape()[0], oh, ow])
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let &[c, h, w] = input else { return Err(bad()) };
                if kernel > h || kernel > w {
                    return Err(bad());
                }
                let oh = window_output_extent(h, kernel, stride, 0).ok_or_else(bad)?;
                let ow = window_output_extent(w, kernel, stride, 0).ok_or_else(bad)?;
                Ok(vec![c, oh, ow])
            }
            LayerKind::GlobalAvgPool => match input {
                &[c, _, _] => Ok(vec![c]),
                _ => Err(bad()),
            },
            LayerKind::Dense => {
                let w = self.weight.as_ref().ok_or_else(bad)?;
                if input.iter().product::<usize>() != w.shape()[1] || input.len() != 1 {
                    return Err(bad());
                }
                Ok(vec![w.shape()[0]])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Architecture descriptor stored alongside parameters so a checkpoint can be rebuilt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Square training resolution, when known.
    pub input_size: Option<usize>,
}

const TOPOLOGY_NAME: &str = "small_cam_net";

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{TOPOLOGY_NAME} in_channels={} num_classes={}",
            self.in_channels, self.num_classes
        )?;
        if let Some(size) = self.input_size {
            write!(f, " input_size={size}")?;
        }
        Ok(())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        if parts.next() != Some(TOPOLOGY_NAME) {
            return Err(Error::Checkpoint(format!("unknown topology `{s}`")));
        }
        let (mut in_channels, mut num_classes, mut input_size) = (None, None, None);
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed topology field `{part}`")))?;
            let value: usize = value
                .parse()
                .map_err(|_| Error::Checkpoint(format!("non-integer topology field `{part}`")))?;
            match key {
                "in_channels" => in_channels = Some(value),
                "num_classes" => num_classes = Some(value),
                "input_size" => input_size = Some(value),
                _ => return Err(Error::Checkpoint(format!("unknown topology field `{key}`"))),
            }
        }
        match (in_channels, num_classes) {
            (Some(in_channels), Some(num_classes)) => Ok(Topology {
                in_channels,
                num_classes,
                input_size,
            }),
            _ => Err(Error::Checkpoint(format!("incomplete topology `{s}`"))),
        }
    }
}

/// Activations of the last convolutional block from the most recent capturing
/// forward pass, and their gradient once a backward pass has run.
#[derive(Clone, Debug)]
pub struct Capture<T: Real = f32> {
    pub var: Var,
    pub activation: Tensor<T>,
    pub gradient: Option<Tensor<T>>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// One entry per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    pub activation: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    layers: Vec<Layer<T>>,
    last_conv: usize,
    topology: Topology,
    capture: Option<Capture<T>>,
}

impl<T: Real> Model<T> {
    /// Assemble a model. `last_conv` must index a conv layer followed only by
    /// pooling, flatten, dense or ReLU layers.
    pub fn new(layers: Vec<Layer<T>>, last_conv: usize, topology: Topology) -> Result<Self> {
        match layers.get(last_conv).map(|l| l.kind) {
            Some(LayerKind::Conv2d { .. }) => {}
            _ => return Err(Error::contract(format!("layer {last_conv} is not a conv2d layer"))),
        }
        if let Some(l) = layers[last_conv + 1..]
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
        {
            return Err(Error::contract(format!(
                "conv layer `{}` follows the designated last conv layer",
                l.name
            )));
        }
        Ok(Self {
            layers,
            last_conv,
            topology,
            capture: None,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn last_conv(&self) -> usize {
        self.last_conv
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn num_classes(&self) -> usize {
        self.topology.num_classes
    }

    pub fn in_channels(&self) -> usize {
        self.topology.in_channels
    }

    pub fn set_input_size(&mut self, size: usize) {
        self.topology.input_size = Some(size);
    }

    /// Index of the layer whose output Grad-CAM reads: the ReLU directly after
    /// the last conv when present (rectified feature maps), else the conv itself.
    pub fn capture_layer(&self) -> usize {
        match self.layers.get(self.last_conv + 1) {
            Some(l) if l.kind == LayerKind::Relu => self.last_conv + 1,
            _ => self.last_conv,
        }
    }

    /// Where the captured activation's cells sit on the input grid.
    pub fn capture_geometry(&self) -> CellGeometry {
        self.layers[..=self.capture_layer()]
            .iter()
            .fold(CellGeometry::IDENTITY, |g, layer| match (layer.kind, &layer.weight) {
                (LayerKind::Conv2d { stride, padding }, Some(w)) => {
                    g.then_window([w.shape()[2], w.shape()[3]], [stride; 2], [padding; 2])
                }
                (LayerKind::MaxPool2d { kernel, stride }, _) => g.then_window([kernel; 2], [stride; 2], [0; 2]),
                _ => g,
            })
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(w) = &l.weight {
                out.push((format!("{}.weight", l.name), w));
            }
            if let Some(b) = &l.bias {
                out.push((format!("{}.bias", l.name), b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let name = l.name.clone();
            if let Some(w) = &mut l.weight {
                out.push((format!("{name}.weight"), w));
            }
            if let Some(b) = &mut l.bias {
                out.push((format!("{name}.bias"), b));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace parameter values by name; every parameter must be supplied with its exact shape.
    pub fn load_params(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters, checkpoint has {}",
                slots.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let (_, slot) = slots
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    left: slot.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            **slot = value.with_requires_grad(true);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Record a forward pass of `x: [N, C, H, W]` on `tape`.
    ///
    /// With `capture`, the activations read by Grad-CAM are routed through a
    /// watch point and cached on the model.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, capture: bool) -> Result<ForwardPass> {
        if capture && tape.is_consumed() {
            return Err(Error::State(
                "activation capture requested on a tape that already ran backward".into(),
            ));
        }
        let pass = self.record(tape, x, capture)?;
        self.capture = match pass.activation {
            Some(var) => Some(Capture {
                var,
                activation: tape.value(var)?.clone(),
                gradient: None,
            }),
            None => None,
        };
        Ok(pass)
    }

    fn record(&self, tape: &mut Tape<T>, x: Var, capture: bool) -> Result<ForwardPass> {
        let shape = tape.value(x)?.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.topology.in_channels {
            return Err(Error::contract(format!(
                "model expects [N, {}, H, W] input, got {shape:?}",
                self.topology.in_channels
            )));
        }
        let capture_at = self.capture_layer();
        let mut params = Vec::new();
        let mut activation = None;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer.kind {
                LayerKind::Conv2d { stride, padding } => {
                    let (w, b) = self.bind(tape, layer, &mut params)?;
                    tape.conv2d(h, w, b, stride, padding)?
                }
                LayerKind::Dense => {
                    let (w, b) = self.bind(tape, layer, &mut params)?;
                    tape.linear(h, w, b)?
                }
                LayerKind::MaxPool2d { kernel, stride } => tape.maxpool2d(h, kernel, stride)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(h)?,
                LayerKind::Relu => tape.relu(h)?,
                LayerKind::Flatten => {
                    let s = tape.value(h)?.shape().to_vec();
                    tape.reshape(h, &[s[0], s[1..].iter().product()])?
                }
            };
            if capture && i == capture_at {
                h = tape.watch(h)?;
                activation = Some(h);
            }
        }
        Ok(ForwardPass {
            logits: h,
            params,
            activation,
        })
    }

    fn bind(&self, tape: &mut Tape<T>, layer: &Layer<T>, params: &mut Vec<Var>) -> Result<(Var, Var)> {
        let missing = || Error::contract(format!("layer `{}` has no parameters", layer.name));
        let w = tape.leaf(layer.weight.as_ref().ok_or_else(missing)?)?;
        let b = tape.leaf(layer.bias.as_ref().ok_or_else(missing)?)?;
        params.push(w);
        params.push(b);
        Ok((w, b))
    }

    /// Inference on a stacked batch without touching the capture cache.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::without_param_grads();
        let x = tape.leaf(images)?;
        let pass = self.record(&mut tape, x, false)?;
        Ok(tape.value(pass.logits)?.clone())
    }

    /// Forward a batch on a fresh tape and return the logits; with `capture`
    /// the last-conv activations are cached for a following Grad-CAM.
    pub fn forward_with_capture(&mut self, images: &Tensor<T>, capture: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::without_param_grads();
        let x = tape.leaf(images)?;
        let pass = self.forward(&mut tape, x, capture)?;
        Ok(tape.value(pass.logits)?.clone())
    }

    /// After `tape.backward`, add parameter gradients into the model and store
    /// the captured activation gradient when one was recorded.
    pub fn collect_gradients(&mut self, tape: &Tape<T>, pass: &ForwardPass) -> Result<()> {
        let params = self.params_mut();
        if params.len() != pass.params.len() {
            return Err(Error::State("forward pass does not belong to this model".into()));
        }
        for ((_, p), &var) in params.into_iter().zip(&pass.params) {
            tape.accumulate_into(var, p)?;
        }
        if let Some(cap) = &mut self.capture {
            if Some(cap.var) == pass.activation {
                cap.gradient = tape.grad_tensor(cap.var)?;
            }
        }
        Ok(())
    }

    pub fn capture(&self) -> Option<&Capture<T>> {
        self.capture.as_ref()
    }

    pub fn clear_capture(&mut self) {
        self.capture = None;
    }

    /// Convert every parameter to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                name: l.name.clone(),
                kind: l.kind,
                weight: l.weight.as_ref().map(|t| t.cast()),
                bias: l.bias.as_ref().map(|t| t.cast()),
            })
            .collect();
        Model {
            layers,
            last_conv: self.last_conv,
            topology: self.topology,
            capture: None,
        }
    }
}

/// Channel widths of the three conv blocks.
pub const SMALL_CAM_NET_WIDTHS: [usize; 3] = [16, 32, 64];

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// The reference classifier:
/// `conv(16,3×3)/relu/maxpool(2) → conv(32,3×3)/relu/maxpool(2) → conv(64,3×3)/relu → GAP → dense(K)`.
///
/// Weights are He-normal (`std = √(2/fan_in)`) from a ChaCha8 stream seeded
/// with `seed`; biases start at zero.
pub fn build_small_cam_net(in_channels: usize, num_classes: usize, seed: u64) -> Result<Model<f32>> {
    if num_classes < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {num_classes}")));
    }
    if in_channels == 0 {
        return Err(Error::contract("need at least one input channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut channels = in_channels;
    let mut last_conv = 0;
    for (block, &width) in SMALL_CAM_NET_WIDTHS.iter().enumerate() {
        let fan_in = channels * 9;
        let name = format!("conv{}", block + 1);
        last_conv = layers.len();
        layers.push(Layer::conv2d(
            &name,
            he_normal(&mut rng, &[width, channels, 3, 3], fan_in),
            Tensor::zeros(vec![width]),
            1,
            0,
        )?);
        layers.push(Layer::stateless(&format!("relu{}", block + 1), LayerKind::Relu));
        if block + 1 < SMALL_CAM_NET_WIDTHS.len() {
            layers.push(Layer::stateless(
                &format!("pool{}", block + 1),
                LayerKind::MaxPool2d { kernel: 2, stride: 2 },
            ));
        }
        channels = width;
    }
    layers.push(Layer::stateless("gap", LayerKind::GlobalAvgPool));
    layers.push(Layer::dense(
        "fc",
        he_normal(&mut rng, &[num_classes, channels], channels),
        Tensor::zeros(vec![num_classes]),
    )?);
    Model::new(
        layers,
        last_conv,
        Topology {
            in_channels,
            num_classes,
            input_size: None,
        },
    )
}

/// Extents of the captured activation for a square input of side `size`.
pub fn capture_extents<T: Real>(model: &Model<T>, size: usize) -> Result<Vec<usize>> {
    let mut extents = vec![model.in_channels(), size, size];
    for layer in &model.layers()[..=model.capture_layer()] {
        extents = layer.output_extents(&extents)?;
    }
    Ok(extents)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_round_trips_through_text() {
        let t = Topology {
            in_channels: 3,
            num_classes: 7,
            input_size: Some(64),
        };
        assert_eq!(t.to_string().parse::<Topology>().unwrap(), t);
        assert!("resnet50 in_channels=3".parse::<Topology>().is_err());
    }

    #[test]
    fn rejects_single_class() {
        assert!(build_small_cam_net(3, 1, 0).is_err());
    }

    #[test]
    fn last_conv_must_be_final_conv() {
        let net = build_small_cam_net(3, 4, 0).unwrap();
        let layers = net.layers().to_vec();
        assert!(Model::new(layers.clone(), 0, net.topology()).is_err());
        assert!(Model::new(layers, 1, net.topology()).is_err());
    }
}
