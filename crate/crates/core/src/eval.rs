//! Explanation quality metrics.
//!
//! - Pixel-flipping: remove features (or square patches) in order of
//!   decreasing relevance and record how fast the explained score drops.
//!   A lower area under the curve means a more selective explanation.
//! - Continuity: a sampled lower bound on `max ‖R(x) − R(x')‖₁ / ‖x − x'‖₂`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::explain::{Explainer, Heatmap, MethodTag};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Feature,
    /// Square `side × side` spatial patches spanning all channels. Edge
    /// patches are truncated when the side does not divide the extent.
    Patch(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipConfig {
    pub granularity: Granularity,
    /// Value written into removed features.
    pub fill: f64,
    /// Stop after this many removals; `None` removes everything.
    pub max_steps: Option<usize>,
}

impl Default for FlipConfig {
    fn default() -> Self {
        FlipConfig {
            granularity: Granularity::Patch(4),
            fill: 0.0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlipCurve {
    /// `values[0]` is the score of the untouched input, `values[i]` the score
    /// after `i` removals.
    pub values: Vec<f64>,
    /// Feature or patch indices in removal order.
    pub order: Vec<usize>,
    pub auc: f64,
}

/// Feature groups removed together under `granularity`, as linear indices.
pub fn removal_units(shape: &[usize], granularity: Granularity) -> Result<Vec<Vec<usize>>> {
    let n: usize = shape.iter().product();
    match granularity {
        Granularity::Feature => Ok((0..n).map(|i| vec![i]).collect()),
        Granularity::Patch(0) => Err(Error::invalid("patch side must be at least 1")),
        Granularity::Patch(p) => {
            let (c, h, w) = crate::tensor::spatial_dims(shape);
            let mut units = Vec::new();
            for py in (0..h).step_by(p) {
                for px in (0..w).step_by(p) {
                    let mut members = Vec::new();
                    for ch in 0..c {
                        for y in py..(py + p).min(h) {
                            for x in px..(px + p).min(w) {
                                members.push((ch * h + y) * w + x);
                            }
                        }
                    }
                    units.push(members);
                }
            }
            Ok(units)
        }
    }
}

/// Greedy removal by descending pooled relevance of the original heatmap.
/// The order is fixed up front; ties go to the lowest unit index.
pub fn pixel_flip(
    network: &Network,
    input: &Tensor,
    heatmap: &Heatmap,
    class_index: usize,
    config: &FlipConfig,
) -> Result<FlipCurve> {
    network.check_class(class_index)?;
    heatmap.scores().expect_shape(input.shape())?;
    let units = removal_units(input.shape(), config.granularity)?;
    let scores = heatmap.scores().data();
    let pooled: Vec<f64> = units
        .iter()
        .map(|u| u.iter().map(|&i| scores[i]).sum())
        .collect();
    let mut order: Vec<usize> = (0..units.len()).collect();
    // Stable sort keeps equal scores in ascending index order.
    order.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]));
    let steps = config.max_steps.map_or(units.len(), |m| m.min(units.len()));
    order.truncate(steps);

    let mut x = input.clone();
    let mut values = Vec::with_capacity(steps + 1);
    values.push(network.logit(&x, class_index)?);
    for &u in &order {
        for &i in &units[u] {
            x.data_mut()[i] = config.fill;
        }
        values.push(network.logit(&x, class_index)?);
    }
    let auc = auc(&values);
    Ok(FlipCurve { values, order, auc })
}

/// Trapezoidal area over unit-spaced steps divided by the number of steps;
/// a constant curve `c` has AUC `c`, a single point its own value.
pub fn auc(values: &[f64]) -> f64 {
    match values.len() {
        0 => f64::NAN,
        1 => values[0],
        n => {
            let area: f64 = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
            area / (n - 1) as f64
        }
    }
}

/// Two-sided exact sign test for paired comparisons: `wins` pairs favour
/// one side, `losses` the other, ties are dropped beforehand. Returns the
/// probability of a split at least this uneven under a fair coin.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    // Lower tail P(X ≤ k) for X ~ Binomial(n, 1/2), accumulated in log space.
    let mut log_pmf = -(n as f64) * std::f64::consts::LN_2;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            log_pmf += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += log_pmf.exp();
    }
    (2.0 * tail).min(1.0)
}

/// Heatmap of i.i.d. uniform scores, the random-order baseline for
/// pixel-flipping. It decomposes nothing, so its explained value is zero.
pub fn random_heatmap(shape: &[usize], seed: u64) -> Heatmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let scores = Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .expect("shape is valid");
    Heatmap::new(scores, 0.0, MethodTag::Random)
}

/// `‖R(x) − R(x')‖₁ / ‖x − x'‖₂` for one pair of inputs.
pub fn continuity_ratio<E: Explainer + ?Sized>(
    explainer: &E,
    network: &Network,
    class_index: usize,
    x: &Tensor,
    x_prime: &Tensor,
) -> Result<f64> {
    let dist = x.sub(x_prime)?.norm_l2();
    if dist == 0.0 {
        return Err(Error::invalid("continuity ratio needs x != x'"));
    }
    let r = explainer.explain(network, x, class_index)?;
    let rp = explainer.explain(network, x_prime, class_index)?;
    Ok(r.scores().sub(rp.scores())?.norm_l1() / dist)
}

/// Monte-Carlo lower bound on the explanation's local Lipschitz constant.
///
/// Every probe gets its own random stream (derived from `seed` and the probe
/// index) from which `trials` isotropic perturbations of norm `delta` are
/// drawn; the largest observed ratio is returned. Because each stream is
/// consumed in order, increasing `trials` never lowers the estimate.
pub fn continuity_estimate<E: Explainer + ?Sized>(
    explainer: &E,
    network: &Network,
    class_index: usize,
    probes: &[Tensor],
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let mut best = 0.0f64;
    for (p, x) in probes.iter().enumerate() {
        let base = explainer.explain(network, x, class_index)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        for _ in 0..trials {
            let dir: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let moved = Tensor::new(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(&dir)
                    .map(|(v, d)| v + delta * d / norm)
                    .collect(),
            )?;
            let dist = moved.sub(x)?.norm_l2();
            if dist == 0.0 {
                continue;
            }
            let r = explainer.explain(network, &moved, class_index)?;
            best = best.max(r.scores().sub(base.scores())?.norm_l1() / dist);
        }
    }
    Ok(best)
}
