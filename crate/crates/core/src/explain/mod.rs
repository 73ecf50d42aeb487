//! Input-space explanations of individual predictions.
//!
//! Gradient-based explainers ([`sensitivity`], [`simple_taylor`]) and the
//! relevance propagation engine ([`lrp`]) all produce a [`Heatmap`] aligned
//! with the explained input.

mod lrp;
pub mod rules;

use std::fmt;

pub use lrp::{
    explain_lrp, filter_relevance, lrp, ExplainedOutput, InputDomain, LayerRule, RelevanceTrace,
    RuleConfig, DEFAULT_STABILIZER,
};
pub use rules::{
    lrp_dense_alphabeta, lrp_dense_epsilon, lrp_dense_zplus, lrp_input_wsquare, lrp_input_zb,
    PoolPolicy,
};

use crate::error::Result;
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MethodTag {
    Sensitivity,
    SimpleTaylor,
    Lrp,
    Random,
    Custom(String),
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodTag::Sensitivity => f.write_str("sensitivity"),
            MethodTag::SimpleTaylor => f.write_str("simple-taylor"),
            MethodTag::Lrp => f.write_str("lrp"),
            MethodTag::Random => f.write_str("random"),
            MethodTag::Custom(s) => f.write_str(s),
        }
    }
}

/// Relevance scores aligned with an input.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    scores: Tensor,
    total: f64,
    explained_value: f64,
    method: MethodTag,
}

impl Heatmap {
    pub fn new(scores: Tensor, explained_value: f64, method: MethodTag) -> Self {
        let total = scores.sum();
        Heatmap {
            scores,
            total,
            explained_value,
            method,
        }
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn into_scores(self) -> Tensor {
        self.scores
    }

    /// Sum of all scores.
    pub fn total(&self) -> f64 {
        self.total
    }

    /// The quantity being decomposed (`f(x)`, or `‖∇f‖²` for sensitivity).
    pub fn explained_value(&self) -> f64 {
        self.explained_value
    }

    /// `explained_value − total`: the part of the explained quantity the
    /// scores do not account for (bias terms, absorbed relevance, or the
    /// first-order Taylor remainder).
    pub fn residual(&self) -> f64 {
        self.explained_value - self.total
    }

    pub fn method(&self) -> &MethodTag {
        &self.method
    }

    pub fn shape(&self) -> &[usize] {
        self.scores.shape()
    }
}

/// Anything that can turn `(network, input, class)` into a heatmap.
pub trait Explainer {
    fn explain(&self, network: &Network, input: &Tensor, class_index: usize) -> Result<Heatmap>;
}

impl<F> Explainer for F
where
    F: Fn(&Network, &Tensor, usize) -> Result<Heatmap>,
{
    fn explain(&self, network: &Network, input: &Tensor, class_index: usize) -> Result<Heatmap> {
        self(network, input, class_index)
    }
}

/// The built-in explanation methods.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Sensitivity,
    SimpleTaylor,
    Lrp(RuleConfig),
}

impl Explainer for Method {
    fn explain(&self, network: &Network, input: &Tensor, class_index: usize) -> Result<Heatmap> {
        match self {
            Method::Sensitivity => sensitivity(network, input, class_index),
            Method::SimpleTaylor => simple_taylor(network, input, class_index),
            Method::Lrp(cfg) => explain_lrp(network, input, class_index, cfg),
        }
    }
}

/// Squared partial derivatives `R_i = (∂f_c/∂x_i)²`, which decompose the
/// squared gradient norm.
pub fn sensitivity(network: &Network, input: &Tensor, class_index: usize) -> Result<Heatmap> {
    let grad = network.gradient(input, class_index)?;
    let norm2 = grad.data().iter().map(|g| g * g).sum();
    Ok(Heatmap::new(
        grad.map(|g| g * g),
        norm2,
        MethodTag::Sensitivity,
    ))
}

/// First-order Taylor expansion at the origin: `R_i = ∂f_c/∂x_i · x_i`.
/// Exact for positively homogeneous networks (no biases).
pub fn simple_taylor(network: &Network, input: &Tensor, class_index: usize) -> Result<Heatmap> {
    network.check_class(class_index)?;
    let trace = network.forward(input)?;
    let f = trace.logits().data()[class_index];
    let grad = network.backward(&trace, &network.one_hot(class_index, 1.0))?;
    Ok(Heatmap::new(grad.mul(input)?, f, MethodTag::SimpleTaylor))
}
