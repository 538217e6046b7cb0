use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::nn::layer::{Layer, LayerKind};
use crate::tensor::Tensor;

/// Gradients of every parameter, keyed by layer name, in the layer's param order.
pub type ParamGrads = BTreeMap<String, Vec<Tensor>>;

/// A chain of layers mapping a `C x H x W` image to `num_classes` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer>,
}

impl ModelGraph {
    pub fn new(input_shape: [usize; 3], num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(invalid(format!("duplicate layer name '{}'", l.name)));
            }
        }
        let model = Self { input_shape, num_classes, layers };
        let shapes = model.activation_shapes()?;
        let last = shapes.last().expect("at least the input shape");
        if last.iter().product::<usize>() != num_classes || last.len() != 1 {
            return Err(invalid(format!("model output shape {last:?} does not match {num_classes} classes")));
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| invalid(format!("unknown layer '{name}'")))
    }

    /// Shapes of the input followed by every layer output (`len = layers + 1`).
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for l in &self.layers {
            let next =
                l.kind.output_shape(shapes.last().unwrap()).map_err(|e| invalid(format!("layer '{}': {e}", l.name)))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Names of layers whose output is spatial, in depth order.
    pub fn spatial_layer_names(&self) -> Vec<String> {
        self.layers.iter().filter(|l| l.kind.output_is_spatial()).map(|l| l.name.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::numel).sum()
    }

    /// Replaces the parameters of one layer, keeping shapes.
    pub fn with_params(&self, name: &str, params: Vec<Tensor>) -> Result<Self> {
        let idx = self.layer_index(name)?;
        let mut out = self.clone();
        let old = &out.layers[idx];
        out.layers[idx] = Layer::new(old.name.clone(), old.kind, params)?;
        Ok(out)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Returns a new model with `theta - lr * grad` for every parameter present in `grads`.
    pub fn sgd_step(&self, grads: &ParamGrads, lr: f64) -> Result<Self> {
        let mut out = self.clone();
        if lr == 0.0 {
            return Ok(out);
        }
        for (name, g) in grads {
            let idx = self.layer_index(name)?;
            let layer = &mut out.layers[idx];
            if g.len() != layer.params.len() {
                return Err(invalid(format!("gradient for '{name}' has wrong arity")));
            }
            for (p, gp) in layer.params.iter_mut().zip(g) {
                *p = p.axpy(-lr, gp)?;
            }
        }
        Ok(out)
    }
}

/// Incrementally builds a chain, tracking shapes and initialising parameters.
///
/// Convs use He-normal weights, FC weights use `N(0, 1/fan_in)`, biases start
/// at zero and scalings at one.
pub struct ModelBuilder {
    input_shape: [usize; 3],
    current: Vec<usize>,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
}

impl ModelBuilder {
    pub fn new(input_shape: [usize; 3], seed: u64) -> Self {
        Self { input_shape, current: input_shape.to_vec(), layers: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    fn push(mut self, name: &str, kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        self.current = kind.output_shape(&self.current)?;
        self.layers.push(Layer::new(name, kind, params)?);
        Ok(self)
    }

    fn channels(&self) -> Result<usize> {
        match self.current[..] {
            [k, _, _] => Ok(k),
            _ => Err(invalid("layer needs a spatial input")),
        }
    }

    pub fn conv(mut self, name: &str, kernel: usize, out_channels: usize) -> Result<Self> {
        let in_channels = self.channels()?;
        let kind = LayerKind::Conv { kernel, in_channels, out_channels };
        let fan_in = kind.fan_in() as f64;
        let w = self.normal(&[out_channels, kernel * kernel * in_channels], (2.0 / fan_in).sqrt());
        self.push(name, kind, vec![w])
    }

    pub fn bias(self, name: &str) -> Result<Self> {
        let channels = self.channels()?;
        self.push(name, LayerKind::Bias { channels }, vec![Tensor::zeros(&[channels])])
    }

    pub fn scaling(self, name: &str) -> Result<Self> {
        let channels = self.channels()?;
        self.push(name, LayerKind::Scaling { channels }, vec![Tensor::full(&[channels], 1.0)])
    }

    pub fn relu(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::Relu, vec![])
    }

    pub fn maxpool(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::MaxPool2, vec![])
    }

    pub fn global_avg_pool(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::GlobalAvgPool, vec![])
    }

    pub fn flatten(self, name: &str) -> Result<Self> {
        self.push(name, LayerKind::Flatten, vec![])
    }

    pub fn fully_connected(mut self, name: &str, outputs: usize) -> Result<Self> {
        let inputs: usize = self.current.iter().product();
        let w = self.normal(&[outputs, inputs], (1.0 / inputs as f64).sqrt());
        self.push(name, LayerKind::FullyConnected { inputs, outputs }, vec![w, Tensor::zeros(&[outputs])])
    }

    pub fn build(self) -> Result<ModelGraph> {
        let classes = match self.current[..] {
            [n] => n,
            _ => return Err(invalid("model must end in a vector of logits")),
        };
        ModelGraph::new(self.input_shape, classes, self.layers)
    }
}

/// Four conv stages with ReLU after each and a GAP + FC head.
///
/// Layer names: `conv1, scale1, bias1, relu1, pool1, conv2, bias2, relu2, pool2,
/// conv3, bias3, relu3, conv4, bias4, relu4, gap, fc`.
pub fn toy_architecture(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<ModelGraph> {
    ModelBuilder::new(input_shape, seed)
        .conv("conv1", 3, 8)?
        .scaling("scale1")?
        .bias("bias1")?
        .relu("relu1")?
        .maxpool("pool1")?
        .conv("conv2", 3, 16)?
        .bias("bias2")?
        .relu("relu2")?
        .maxpool("pool2")?
        .conv("conv3", 3, 16)?
        .bias("bias3")?
        .relu("relu3")?
        .conv("conv4", 3, 16)?
        .bias("bias4")?
        .relu("relu4")?
        .global_avg_pool("gap")?
        .fully_connected("fc", num_classes)?
        .build()
}
