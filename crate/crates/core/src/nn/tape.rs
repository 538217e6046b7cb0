use crate::error::{invalid, Error, Result};
use crate::nn::model::{ModelGraph, ParamGrads};
use crate::tensor::Tensor;

/// Scalar that the backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The raw logit of one class.
    ClassLogit(usize),
    /// Softmax cross-entropy against a target class.
    CrossEntropy(usize),
}

impl Objective {
    pub fn class(&self) -> usize {
        match *self {
            Objective::ClassLogit(c) | Objective::CrossEntropy(c) => c,
        }
    }

    /// Objective value and its gradient with respect to the logits.
    pub fn evaluate(&self, logits: &[f64]) -> Result<(f64, Vec<f64>)> {
        let c = self.class();
        if c >= logits.len() {
            return Err(invalid(format!("class {c} out of range for {} classes", logits.len())));
        }
        match self {
            Objective::ClassLogit(_) => {
                let mut g = vec![0.0; logits.len()];
                g[c] = 1.0;
                Ok((logits[c], g))
            }
            Objective::CrossEntropy(_) => {
                let probs = softmax(logits);
                let lse = log_sum_exp(logits);
                let mut g = probs;
                g[c] -= 1.0;
                Ok((lse - logits[c], g))
            }
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Recorded activations and gradients of one forward (and optionally backward) pass.
///
/// Activations are stored once per boundary: `activation(j)` is the input of
/// layer `j` and the output of layer `j - 1`, so the chain invariants
/// `x_out(j) == x_in(j + 1)` and `g_out(j) == g_in(j + 1)` hold by construction.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Tensor>,
    gradients: Option<Vec<Tensor>>,
    param_grads: ParamGrads,
    loss: Option<f64>,
    objective: Option<Objective>,
}

impl Tape {
    pub fn num_layers(&self) -> usize {
        self.activations.len() - 1
    }

    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn activation(&self, boundary: usize) -> &Tensor {
        &self.activations[boundary]
    }

    pub fn x_in(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn x_out(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("non-empty tape").data()
    }

    pub fn has_gradients(&self) -> bool {
        self.gradients.is_some()
    }

    pub fn gradient(&self, boundary: usize) -> Result<&Tensor> {
        self.gradients
            .as_ref()
            .map(|g| &g[boundary])
            .ok_or_else(|| Error::State("backward has not been run on this tape".into()))
    }

    pub fn g_in(&self, layer: usize) -> Result<&Tensor> {
        self.gradient(layer)
    }

    pub fn g_out(&self, layer: usize) -> Result<&Tensor> {
        self.gradient(layer + 1)
    }

    pub fn param_grads(&self) -> &ParamGrads {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> ParamGrads {
        self.param_grads
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss
    }

    pub fn objective(&self) -> Option<Objective> {
        self.objective
    }

    /// Fills gradients at every boundary and for every parameter.
    pub fn backward(&mut self, model: &ModelGraph, objective: Objective) -> Result<()> {
        let n = model.layers().len();
        if n != self.num_layers() {
            return Err(invalid("tape was recorded with a different model"));
        }
        let (loss, dlogits) = objective.evaluate(self.logits())?;
        let mut grads = vec![Tensor::zeros(&[0]); n + 1];
        grads[n] = Tensor::from_parts(vec![dlogits.len()], dlogits);
        let mut param_grads = ParamGrads::new();
        for (j, layer) in model.layers().iter().enumerate().rev() {
            let lg = layer.backward(&self.activations[j], &grads[j + 1])?;
            grads[j] = lg.input;
            if !lg.params.is_empty() {
                param_grads.insert(layer.name.clone(), lg.params);
            }
        }
        self.gradients = Some(grads);
        self.param_grads = param_grads;
        self.loss = Some(loss);
        self.objective = Some(objective);
        Ok(())
    }
}

/// Runs the model on `input`, recording every activation.
pub fn forward(model: &ModelGraph, input: &Tensor) -> Result<Tape> {
    if input.shape() != model.input_shape() {
        return Err(invalid(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    let mut activations = Vec::with_capacity(model.layers().len() + 1);
    activations.push(input.clone());
    for layer in model.layers() {
        let next = layer.forward(activations.last().unwrap())?;
        activations.push(next);
    }
    Ok(Tape { activations, gradients: None, param_grads: ParamGrads::new(), loss: None, objective: None })
}

/// Forward followed by backward.
pub fn forward_backward(model: &ModelGraph, input: &Tensor, objective: Objective) -> Result<Tape> {
    let mut tape = forward(model, input)?;
    tape.backward(model, objective)?;
    Ok(tape)
}

/// Objective value without recording gradients.
pub fn objective_value(model: &ModelGraph, input: &Tensor, objective: Objective) -> Result<f64> {
    let tape = forward(model, input)?;
    Ok(objective.evaluate(tape.logits())?.0)
}
