//! Feed-forward networks, recorded forward passes and reverse-mode gradients.

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerKind};
use crate::tensor::Tensor;

/// An ordered stack of layers whose final output is a vector of class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<Layer>,
    // shapes[i] is the input shape of layer i; the last entry is [class_count].
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, class_count: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::invalid(format!(
                "input extents must be positive, got {input_shape:?}"
            )));
        }
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            if let Some(w) = layer.weights() {
                if !w.is_finite() || !layer.bias().is_some_and(Tensor::is_finite) {
                    return Err(Error::layer(i, "non-finite parameters"));
                }
            }
            let next = layer.output_shape(shapes.last().unwrap(), i)?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out != &[class_count] {
            return Err(Error::layer(
                layers.len().saturating_sub(1),
                format!("network output {out:?} is not a vector of {class_count} logits"),
            ));
        }
        Ok(Network {
            input_shape,
            class_count,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `i`; `layer_shape(layers().len())` is the logit shape.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn check_class(&self, class_index: usize) -> Result<()> {
        if class_index >= self.class_count {
            return Err(Error::ClassIndex {
                index: class_index,
                class_count: self.class_count,
            });
        }
        Ok(())
    }

    /// Runs the network and records every intermediate activation.
    pub fn forward(&self, input: &Tensor) -> Result<ActivationTrace> {
        input.expect_shape(&self.input_shape)?;
        if !input.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut winners = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, win) = layer
                .forward(activations.last().unwrap())
                .map_err(|e| relabel(e, i))?;
            activations.push(out);
            winners.push(win);
        }
        Ok(ActivationTrace {
            activations,
            winners,
        })
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.logits().clone())
    }

    /// The selected logit `f_c(x)`.
    pub fn logit(&self, input: &Tensor, class_index: usize) -> Result<f64> {
        self.check_class(class_index)?;
        Ok(self.logits(input)?.data()[class_index])
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.logits(input)?.argmax())
    }

    /// Pulls a cotangent on the logits back to the input through a recorded
    /// trace.
    pub fn backward(&self, trace: &ActivationTrace, grad_logits: &Tensor) -> Result<Tensor> {
        self.check_trace(trace)?;
        grad_logits.expect_shape(&[self.class_count])?;
        let mut grad = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer
                .backward_input(trace.layer_input(i), trace.winners[i].as_deref(), &grad)
                .map_err(|e| relabel(e, i))?;
        }
        Ok(grad)
    }

    /// `∂f_c/∂x` for the selected logit.
    pub fn gradient(&self, input: &Tensor, class_index: usize) -> Result<Tensor> {
        self.check_class(class_index)?;
        let trace = self.forward(input)?;
        self.backward(&trace, &self.one_hot(class_index, 1.0))
    }

    pub(crate) fn one_hot(&self, class_index: usize, value: f64) -> Tensor {
        let mut t = Tensor::zeros(&[self.class_count]);
        t.data_mut()[class_index] = value;
        t
    }

    pub(crate) fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::invalid(format!(
                "trace has {} activations, network needs {}",
                trace.activations.len(),
                self.layers.len() + 1
            )));
        }
        for (i, (a, s)) in trace.activations.iter().zip(&self.shapes).enumerate() {
            if a.shape() != s.as_slice() {
                return Err(Error::layer(
                    i,
                    format!("trace activation {:?} does not match {:?}", a.shape(), s),
                ));
            }
        }
        Ok(())
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }
}

fn relabel(e: Error, index: usize) -> Error {
    match e {
        Error::Layer { message, .. } => Error::Layer {
            layer: index,
            message,
        },
        Error::InvalidArgument(message) => Error::Layer {
            layer: index,
            message,
        },
        other => other,
    }
}

/// Activations recorded during one forward pass.
///
/// `activations[0]` is the network input, `activations[i + 1]` the output of
/// layer `i`, and the last entry the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
    winners: Vec<Option<Vec<usize>>>,
}

impl ActivationTrace {
    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    pub fn logits(&self) -> &Tensor {
        self.activations.last().unwrap()
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn layer_input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    /// Max-pool winner map of layer `layer` (linear input index per output).
    pub fn winners(&self, layer: usize) -> Option<&[usize]> {
        self.winners.get(layer).and_then(|w| w.as_deref())
    }
}

/// Numerically stable log-softmax of a logit vector.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let m = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits
        .data()
        .iter()
        .map(|&z| (z - m).exp())
        .sum::<f64>()
        .ln();
    logits.map(|z| z - lse)
}

pub fn softmax(logits: &Tensor) -> Tensor {
    log_softmax(logits).map(f64::exp)
}
