//! Activation maximization: gradient ascent on `log p(ω_c | x)` plus a
//! regularizer, producing a class prototype.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::{softmax, Network};
use crate::tensor::Tensor;

/// Gaussian-RBM data density used as an expert:
/// `log p(x) = Σ_j softplus(w_jᵀx + b_j) − ½ xᵀΣ⁻¹x + const`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmExpert {
    factor_weights: Vec<Tensor>,
    factor_biases: Vec<f64>,
    precision: Tensor,
}

impl RbmExpert {
    /// Validates shapes, symmetry (to 1e−12) and positive definiteness of
    /// the precision matrix.
    pub fn new(
        factor_weights: Vec<Tensor>,
        factor_biases: Vec<f64>,
        precision: Tensor,
    ) -> Result<Self> {
        let ps = precision.shape();
        if ps.len() != 2 || ps[0] != ps[1] {
            return Err(Error::invalid(format!(
                "precision matrix must be square, got {ps:?}"
            )));
        }
        let d = ps[0];
        if factor_weights.len() != factor_biases.len() {
            return Err(Error::invalid(format!(
                "{} factor weight vectors but {} biases",
                factor_weights.len(),
                factor_biases.len()
            )));
        }
        if let Some(w) = factor_weights.iter().find(|w| w.len() != d) {
            return Err(Error::invalid(format!(
                "factor weights of length {} do not match dimension {d}",
                w.len()
            )));
        }
        let p = precision.data();
        for i in 0..d {
            for j in 0..i {
                if (p[i * d + j] - p[j * d + i]).abs() > 1e-12 {
                    return Err(Error::invalid("precision matrix is not symmetric"));
                }
            }
        }
        cholesky(p, d)
            .ok_or_else(|| Error::invalid("precision matrix is not positive definite"))?;
        Ok(RbmExpert {
            factor_weights,
            factor_biases,
            precision,
        })
    }

    pub fn dim(&self) -> usize {
        self.precision.shape()[0]
    }

    pub fn factor_weights(&self) -> &[Tensor] {
        &self.factor_weights
    }

    pub fn factor_biases(&self) -> &[f64] {
        &self.factor_biases
    }

    pub fn precision(&self) -> &Tensor {
        &self.precision
    }

    /// Log-density up to its normalising constant, and its gradient.
    pub fn log_density(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::invalid(format!(
                "expert expects {d} features, got {}",
                x.len()
            )));
        }
        let xs = x.data();
        let p = self.precision.data();
        let mut grad = vec![0.0; d];
        let mut value = 0.0;
        for i in 0..d {
            let px: f64 = (0..d).map(|j| p[i * d + j] * xs[j]).sum();
            value -= 0.5 * xs[i] * px;
            grad[i] = -px;
        }
        for (w, &b) in self.factor_weights.iter().zip(&self.factor_biases) {
            let t = w.data().iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + b;
            value += softplus(t);
            let s = sigmoid(t);
            for (g, &wi) in grad.iter_mut().zip(w.data()) {
                *g += s * wi;
            }
        }
        Ok((value, Tensor::new(x.shape().to_vec(), grad)?))
    }
}

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let v = a[i * n + i] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[i * n + j] = v.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    None,
    /// `−λ‖x‖²`
    L2 {
        lambda: f64,
    },
    /// `−λ‖x − x̄‖²`
    L2Mean {
        lambda: f64,
        mean: Tensor,
    },
    /// `+ log p_expert(x)`
    Expert(RbmExpert),
}

/// `log p(ω_c|x) + regularizer(x) − η‖x − x0‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmObjective {
    pub class_index: usize,
    pub regularizer: Regularizer,
    /// Localization term `(η, x0)`.
    pub localization: Option<(f64, Tensor)>,
}

impl AmObjective {
    pub fn new(class_index: usize, regularizer: Regularizer) -> Self {
        AmObjective {
            class_index,
            regularizer,
            localization: None,
        }
    }

    pub fn localized(mut self, eta: f64, anchor: Tensor) -> Self {
        self.localization = Some((eta, anchor));
        self
    }

    fn validate(&self, network: &Network) -> Result<()> {
        network.check_class(self.class_index)?;
        let shape = network.input_shape();
        match &self.regularizer {
            Regularizer::L2 { lambda } | Regularizer::L2Mean { lambda, .. }
                if !(*lambda >= 0.0) =>
            {
                return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
            }
            Regularizer::L2Mean { mean, .. } => mean.expect_shape(shape)?,
            Regularizer::Expert(e) if e.dim() != shape.iter().product::<usize>() => {
                return Err(Error::invalid(
                    "expert dimension does not match the network input",
                ));
            }
            _ => {}
        }
        if let Some((eta, anchor)) = &self.localization {
            if !(*eta >= 0.0) {
                return Err(Error::invalid(format!("eta must be >= 0, got {eta}")));
            }
            anchor.expect_shape(shape)?;
        }
        Ok(())
    }

    /// Objective value and gradient at `x`.
    pub fn evaluate(&self, network: &Network, x: &Tensor) -> Result<(f64, Tensor)> {
        let trace = network.forward(x)?;
        let p = softmax(trace.logits());
        let c = self.class_index;
        let mut value = crate::network::log_softmax(trace.logits()).data()[c];
        let mut cot = p.scale(-1.0);
        cot.data_mut()[c] += 1.0;
        let mut grad = network.backward(&trace, &cot)?;

        match &self.regularizer {
            Regularizer::None => {}
            Regularizer::L2 { lambda } => {
                let (v, g) = quadratic_penalty(x, *lambda, None)?;
                value += v;
                grad = grad.add(&g)?;
            }
            Regularizer::L2Mean { lambda, mean } => {
                let (v, g) = quadratic_penalty(x, *lambda, Some(mean))?;
                value += v;
                grad = grad.add(&g)?;
            }
            Regularizer::Expert(expert) => {
                let (v, g) = expert.log_density(x)?;
                value += v;
                grad = grad.add(&g)?;
            }
        }
        if let Some((eta, anchor)) = &self.localization {
            let (v, g) = quadratic_penalty(x, *eta, Some(anchor))?;
            value += v;
            grad = grad.add(&g)?;
        }
        Ok((value, grad))
    }
}

/// `−w‖x − centre‖²` and its gradient.
fn quadratic_penalty(x: &Tensor, weight: f64, centre: Option<&Tensor>) -> Result<(f64, Tensor)> {
    let diff = match centre {
        Some(m) => x.sub(m)?,
        None => x.clone(),
    };
    Ok((-weight * diff.dot(&diff)?, diff.scale(-2.0 * weight)))
}

#[derive(Clone, Debug)]
pub struct AmOptions {
    pub step_size: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Starting point; defaults to the regularizer mean when there is one,
    /// zeros otherwise.
    pub init: Option<Tensor>,
    /// Standard deviation of seeded Gaussian noise added to the start point.
    pub jitter: f64,
    pub seed: u64,
    /// Clip the returned prototype to `[lo, hi]` (post-processing only).
    pub clip: Option<(f64, f64)>,
}

impl Default for AmOptions {
    fn default() -> Self {
        AmOptions {
            step_size: 0.1,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            init: None,
            jitter: 0.0,
            seed: 0,
            clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmResult {
    pub prototype: Tensor,
    /// Objective at the start point and after every accepted step.
    pub trajectory: Vec<f64>,
    pub class_probability: f64,
    pub iterations: usize,
    /// True if the gradient norm dropped below the tolerance.
    pub converged: bool,
}

/// Gradient ascent with step halving: a step that would lower the objective
/// is retried at half the size, so the recorded objective never decreases.
pub fn activation_maximize(
    network: &Network,
    objective: &AmObjective,
    opts: &AmOptions,
) -> Result<AmResult> {
    objective.validate(network)?;
    if !(opts.step_size > 0.0) {
        return Err(Error::invalid("step size must be positive"));
    }
    let shape = network.input_shape();
    let mut x = match (&opts.init, &objective.regularizer) {
        (Some(init), _) => {
            init.expect_shape(shape)?;
            init.clone()
        }
        (None, Regularizer::L2Mean { mean, .. }) => mean.clone(),
        (None, _) => Tensor::zeros(shape),
    };
    if opts.jitter > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let noise = Normal::new(0.0, opts.jitter).map_err(|e| Error::invalid(e.to_string()))?;
        x.data_mut()
            .iter_mut()
            .for_each(|v| *v += noise.sample(&mut rng));
    }

    let (mut value, mut grad) = objective.evaluate(network, &x)?;
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("objective at the start point".into()));
    }
    let mut trajectory = vec![value];
    let mut step = opts.step_size;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        if grad.norm_l2() < opts.gradient_tolerance {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step > f64::EPSILON * opts.step_size {
            let candidate = x.add(&grad.scale(step))?;
            let (v, g) = objective.evaluate(network, &candidate)?;
            if v.is_finite() && g.is_finite() && v >= value {
                x = candidate;
                value = v;
                grad = g;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        iterations += 1;
        trajectory.push(value);
    }
    if let Some((lo, hi)) = opts.clip {
        x = x.map(|v| v.clamp(lo, hi));
    }
    let class_probability = softmax(&network.logits(&x)?).data()[objective.class_index];
    Ok(AmResult {
        prototype: x,
        trajectory,
        class_probability,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Layer;

    fn identity_net() -> Network {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        Network::new(vec![2], 2, vec![Layer::dense(w, Tensor::zeros(&[2]))]).unwrap()
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn gaussian_expert() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = RbmExpert::new(vec![], vec![], eye).unwrap();
        let (v, g) = e.log_density(&t(&[1.0, -2.0])).unwrap();
        assert_eq!(v, -2.5);
        assert_eq!(g.data(), &[-1.0, 2.0]);
    }

    #[test]
    fn expert_gradient_at_origin() {
        let eye = Tensor::new(vec![2, 2], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let w = vec![t(&[1.0, 2.0]), t(&[-0.5, 0.25])];
        let b = vec![0.3, -1.2];
        let e = RbmExpert::new(w.clone(), b.clone(), eye).unwrap();
        let (_, g) = e.log_density(&t(&[0.0, 0.0])).unwrap();
        for i in 0..2 {
            let expected: f64 = (0..2).map(|j| sigmoid(b[j]) * w[j].data()[i]).sum();
            assert!((g.data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_spd_precision() {
        let asym = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(RbmExpert::new(vec![], vec![], asym).is_err());
        let indefinite = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(RbmExpert::new(vec![], vec![], indefinite).is_err());
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn heavy_l2_pulls_prototype_to_origin() {
        let net = identity_net();
        let obj = AmObjective::new(0, Regularizer::L2 { lambda: 1e4 });
        let opts = AmOptions {
            init: Some(t(&[3.0, -2.0])),
            step_size: 1e-3,
            ..Default::default()
        };
        let res = activation_maximize(&net, &obj, &opts).unwrap();
        // Stationary point: (1 − p)·(1, −1) = 2λx, so |x_i| ≤ 1/(2λ).
        assert!(res.prototype.max_abs() <= 0.5e-4 + 1e-9);
    }

    #[test]
    fn identity_net_stationarity() {
        let net = identity_net();
        let lambda = 0.05;
        let obj = AmObjective::new(1, Regularizer::L2 { lambda });
        let opts = AmOptions {
            step_size: 1.0,
            max_iterations: 5000,
            ..Default::default()
        };
        let res = activation_maximize(&net, &obj, &opts).unwrap();
        assert!(res.converged);
        let x = res.prototype.data();
        let p = softmax(&res.prototype).data()[1];
        // ∂/∂x of log p_1 − λ‖x‖² vanishes: (1 − p)·(−1, 1) = 2λx.
        assert!(((1.0 - p) - 2.0 * lambda * x[1]).abs() < 1e-6);
        assert!((-(1.0 - p) - 2.0 * lambda * x[0]).abs() < 1e-6);
    }

    #[test]
    fn trajectory_is_non_decreasing() {
        let net = identity_net();
        let obj =
            AmObjective::new(0, Regularizer::L2 { lambda: 0.5 }).localized(3.0, t(&[1.0, 1.0]));
        let opts = AmOptions {
            step_size: 10.0,
            max_iterations: 200,
            ..Default::default()
        };
        let res = activation_maximize(&net, &obj, &opts).unwrap();
        assert!(res.trajectory.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(res.trajectory.len(), res.iterations + 1);
    }

    #[test]
    fn clip_is_post_processing() {
        let net = identity_net();
        let obj = AmObjective::new(0, Regularizer::L2 { lambda: 0.01 });
        let opts = AmOptions {
            clip: Some((-1.0, 1.0)),
            ..Default::default()
        };
        let res = activation_maximize(&net, &obj, &opts).unwrap();
        assert!(res.prototype.max_abs() <= 1.0);
    }

    #[test]
    fn rejects_bad_objective() {
        let net = identity_net();
        let obj = AmObjective::new(0, Regularizer::L2 { lambda: -1.0 });
        assert!(activation_maximize(&net, &obj, &AmOptions::default()).is_err());
        let obj = AmObjective::new(4, Regularizer::None);
        assert!(activation_maximize(&net, &obj, &AmOptions::default()).is_err());
    }
}
