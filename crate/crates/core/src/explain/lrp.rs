//! The layer-wise relevance propagation engine.

use crate::error::{Error, Result};
use crate::explain::rules::{self, PoolPolicy};
use crate::explain::{Heatmap, MethodTag};
use crate::layers::{Layer, LayerKind};
use crate::network::{log_softmax, ActivationTrace, Network};
use crate::tensor::Tensor;

/// Relevance rule for one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerRule {
    AlphaBeta {
        alpha: f64,
        beta: f64,
    },
    Epsilon(f64),
    /// w²-rule; input-facing layers only.
    WSquare,
    /// z^B-rule for bounded inputs; input-facing layers only.
    ZB {
        low: Tensor,
        high: Tensor,
    },
    PoolProportional,
    PoolWinnerTakeAll,
    /// ReLU and Flatten hand relevance through unchanged.
    PassThrough,
}

impl LayerRule {
    pub const ZPLUS: LayerRule = LayerRule::AlphaBeta {
        alpha: 1.0,
        beta: 0.0,
    };

    pub fn name(&self) -> &'static str {
        match self {
            LayerRule::AlphaBeta { .. } => "AlphaBeta",
            LayerRule::Epsilon(_) => "Epsilon",
            LayerRule::WSquare => "WSquare",
            LayerRule::ZB { .. } => "ZB",
            LayerRule::PoolProportional => "PoolProportional",
            LayerRule::PoolWinnerTakeAll => "PoolWinnerTakeAll",
            LayerRule::PassThrough => "PassThrough",
        }
    }

    fn fits(&self, kind: LayerKind) -> bool {
        match self {
            LayerRule::AlphaBeta { .. }
            | LayerRule::Epsilon(_)
            | LayerRule::WSquare
            | LayerRule::ZB { .. } => kind.has_params(),
            LayerRule::PoolProportional | LayerRule::PoolWinnerTakeAll => kind.is_pool(),
            LayerRule::PassThrough => matches!(kind, LayerKind::ReLU | LayerKind::Flatten),
        }
    }
}

/// What the top-layer relevance is initialised with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExplainedOutput {
    /// The pre-softmax score `f_c(x)`.
    #[default]
    Logit,
    /// `log p(ω_c | x)` from a log-softmax over the logits.
    LogProbability,
}

/// Domain of the network input, which selects the first-layer deep Taylor rule.
#[derive(Clone, Debug, PartialEq)]
pub enum InputDomain {
    /// Non-negative inputs, treated like ReLU activations (z⁺ rule).
    NonNegative,
    /// Box-constrained inputs such as pixel intensities (z^B rule).
    Bounded { low: Tensor, high: Tensor },
    /// Unbounded real inputs (w² rule).
    Real,
}

impl InputDomain {
    /// Pixel box `[low, high]` replicated over every input feature.
    pub fn pixels(network: &Network, low: f64, high: f64) -> Self {
        InputDomain::Bounded {
            low: Tensor::full(network.input_shape(), low),
            high: Tensor::full(network.input_shape(), high),
        }
    }
}

pub const DEFAULT_STABILIZER: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct RuleConfig {
    pub rules: Vec<Option<LayerRule>>,
    pub stabilizer: f64,
    pub explained_output: ExplainedOutput,
}

impl RuleConfig {
    /// `linear` on every dense/conv layer, `pool` on pooling layers.
    pub fn uniform(network: &Network, linear: LayerRule, pool: PoolPolicy) -> Self {
        let pool_rule = match pool {
            PoolPolicy::Proportional => LayerRule::PoolProportional,
            PoolPolicy::WinnerTakeAll => LayerRule::PoolWinnerTakeAll,
        };
        let rules = network
            .layers()
            .iter()
            .map(|l| {
                Some(match l.kind() {
                    k if k.has_params() => linear.clone(),
                    k if k.is_pool() => pool_rule.clone(),
                    _ => LayerRule::PassThrough,
                })
            })
            .collect();
        RuleConfig {
            rules,
            stabilizer: DEFAULT_STABILIZER,
            explained_output: ExplainedOutput::Logit,
        }
    }

    /// LRP-αβ on every linear layer with proportional pooling.
    pub fn alpha_beta(network: &Network, alpha: f64, beta: f64) -> Self {
        Self::uniform(
            network,
            LayerRule::AlphaBeta { alpha, beta },
            PoolPolicy::Proportional,
        )
    }

    pub fn epsilon(network: &Network, eps: f64) -> Self {
        Self::uniform(network, LayerRule::Epsilon(eps), PoolPolicy::Proportional)
    }

    /// Deep Taylor stack: z⁺ on hidden layers, proportional pooling, and the
    /// first layer's rule chosen by the input domain.
    pub fn deep_taylor(network: &Network, domain: InputDomain) -> Self {
        let mut cfg = Self::uniform(network, LayerRule::ZPLUS, PoolPolicy::Proportional);
        if let Some(first) = first_linear_layer(network) {
            cfg.rules[first] = Some(match domain {
                InputDomain::NonNegative => LayerRule::ZPLUS,
                InputDomain::Bounded { low, high } => LayerRule::ZB { low, high },
                InputDomain::Real => LayerRule::WSquare,
            });
        }
        cfg
    }

    pub fn with_stabilizer(mut self, stabilizer: f64) -> Self {
        self.stabilizer = stabilizer;
        self
    }

    pub fn with_output(mut self, output: ExplainedOutput) -> Self {
        self.explained_output = output;
        self
    }

    pub fn set(&mut self, layer: usize, rule: LayerRule) {
        self.rules[layer] = Some(rule);
    }

    /// Checks that every layer has a compatible rule.
    pub fn validate(&self, network: &Network) -> Result<()> {
        if self.rules.len() != network.layers().len() {
            return Err(Error::invalid(format!(
                "rule config covers {} layers, network has {}",
                self.rules.len(),
                network.layers().len()
            )));
        }
        if !(self.stabilizer >= 0.0 && self.stabilizer.is_finite()) {
            return Err(Error::invalid("stabilizer must be finite and non-negative"));
        }
        let first = first_linear_layer(network);
        for (i, (rule, layer)) in self.rules.iter().zip(network.layers()).enumerate() {
            let rule = rule.as_ref().ok_or(Error::MissingRule { layer: i })?;
            let kind = layer.kind();
            let input_only = matches!(rule, LayerRule::WSquare | LayerRule::ZB { .. });
            if !rule.fits(kind) || (input_only && first != Some(i)) {
                return Err(Error::RuleMismatch {
                    layer: i,
                    rule: rule.name(),
                    kind: if input_only && rule.fits(kind) {
                        "hidden"
                    } else {
                        kind.name()
                    },
                });
            }
            match rule {
                LayerRule::AlphaBeta { alpha, beta } => rules::check_alpha_beta(*alpha, *beta)
                    .map_err(|e| Error::layer(i, e.to_string()))?,
                LayerRule::Epsilon(eps) if !(*eps > 0.0) => {
                    return Err(Error::layer(i, "epsilon must be positive"))
                }
                LayerRule::ZB { low, high } => {
                    rules::check_bounds(low, high, network.layer_shape(i).iter().product())
                        .map_err(|e| Error::layer(i, e.to_string()))?
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Index of the first dense/conv layer if only shape-changing layers precede it.
pub(crate) fn first_linear_layer(network: &Network) -> Option<usize> {
    for (i, layer) in network.layers().iter().enumerate() {
        match layer.kind() {
            LayerKind::Flatten => continue,
            k if k.has_params() => return Some(i),
            _ => return None,
        }
    }
    None
}

/// Relevance at every layer boundary, aligned with the activation trace:
/// `relevance(0)` is the input heatmap and the last entry the top-layer
/// initialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceTrace {
    relevances: Vec<Tensor>,
    explained_value: f64,
    class_index: usize,
}

impl RelevanceTrace {
    pub fn relevance(&self, position: usize) -> &Tensor {
        &self.relevances[position]
    }

    pub fn relevances(&self) -> &[Tensor] {
        &self.relevances
    }

    pub fn explained_value(&self) -> f64 {
        self.explained_value
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn to_heatmap(&self) -> Heatmap {
        Heatmap::new(
            self.relevances[0].clone(),
            self.explained_value,
            MethodTag::Lrp,
        )
    }
}

/// Redistributes the selected output score down to the input.
pub fn lrp(
    network: &Network,
    trace: &ActivationTrace,
    class_index: usize,
    config: &RuleConfig,
) -> Result<RelevanceTrace> {
    network.check_class(class_index)?;
    network.check_trace(trace)?;
    config.validate(network)?;
    let explained_value = match config.explained_output {
        ExplainedOutput::Logit => trace.logits().data()[class_index],
        ExplainedOutput::LogProbability => log_softmax(trace.logits()).data()[class_index],
    };
    let n = network.layers().len();
    let mut relevances = vec![Tensor::zeros(&[1]); n + 1];
    relevances[n] = network.one_hot(class_index, explained_value);
    for i in (0..n).rev() {
        relevances[i] = propagate_layer(network, trace, config, i, &relevances[i + 1])?;
    }
    Ok(RelevanceTrace {
        relevances,
        explained_value,
        class_index,
    })
}

/// Forward pass followed by [`lrp`], packaged as a heatmap.
pub fn explain_lrp(
    network: &Network,
    input: &Tensor,
    class_index: usize,
    config: &RuleConfig,
) -> Result<Heatmap> {
    let trace = network.forward(input)?;
    Ok(lrp(network, &trace, class_index, config)?.to_heatmap())
}

fn propagate_layer(
    network: &Network,
    trace: &ActivationTrace,
    config: &RuleConfig,
    i: usize,
    upper: &Tensor,
) -> Result<Tensor> {
    let layer: &Layer = &network.layers()[i];
    let a = trace.layer_input(i);
    let stab = config.stabilizer;
    let rule = config.rules[i]
        .as_ref()
        .ok_or(Error::MissingRule { layer: i })?;
    let out = match rule {
        LayerRule::AlphaBeta { alpha, beta } => {
            if *beta == 0.0 && *alpha == 1.0 {
                rules::zplus(layer, a, upper, stab)
            } else {
                rules::alpha_beta(layer, a, upper, *alpha, *beta, stab)
            }
        }
        LayerRule::Epsilon(eps) => rules::epsilon(layer, a, upper, *eps),
        LayerRule::WSquare => rules::wsquare(layer, a.shape(), upper, stab),
        LayerRule::ZB { low, high } => rules::zb(layer, a, upper, low, high, stab),
        LayerRule::PoolProportional => {
            rules::pool(layer, a, None, upper, PoolPolicy::Proportional, stab)
        }
        LayerRule::PoolWinnerTakeAll => rules::pool(
            layer,
            a,
            trace.winners(i),
            upper,
            PoolPolicy::WinnerTakeAll,
            stab,
        ),
        LayerRule::PassThrough => upper.reshape(a.shape()),
    };
    out.map_err(|e| match e {
        Error::Layer { message, .. } | Error::InvalidArgument(message) => Error::layer(i, message),
        other => other,
    })
}

/// Re-runs propagation below `position` after multiplying the relevance
/// there by `mask`, keeping only what flows through the selected units.
pub fn filter_relevance(
    network: &Network,
    trace: &ActivationTrace,
    run: &RelevanceTrace,
    position: usize,
    mask: &Tensor,
    config: &RuleConfig,
) -> Result<Heatmap> {
    config.validate(network)?;
    let at = run.relevances.get(position).ok_or_else(|| {
        Error::invalid(format!(
            "layer position {position} outside 0..={}",
            run.relevances.len() - 1
        ))
    })?;
    mask.expect_shape(at.shape())?;
    let mut r = at.mul(mask)?;
    let kept = r.sum();
    for i in (0..position).rev() {
        r = propagate_layer(network, trace, config, i, &r)?;
    }
    Ok(Heatmap::new(r, kept, MethodTag::Lrp))
}
