//! Per-layer relevance redistribution rules.
//!
//! Every rule for a linear layer follows the same four steps: a forward pass
//! `z` with (modified) weights, the division `s = R ⊘ z`, a transposed pass
//! `c`, and the product with the layer input. Convolutions reuse the same
//! code with convolution and transposed convolution as the linear maps.
//!
//! A denominator whose magnitude is below the stabilizer makes its term
//! contribute nothing: that share of relevance is absorbed.

use crate::error::{Error, Result};
use crate::layers::{Layer, PoolGeometry};
use crate::tensor::Tensor;

fn split_weights(w: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let pos = w.data().iter().map(|&v| v.max(0.0)).collect();
    let neg = w.data().iter().map(|&v| v.min(0.0)).collect();
    (pos, neg)
}

fn linear_weights(layer: &Layer) -> Result<&Tensor> {
    layer
        .weights()
        .ok_or_else(|| Error::invalid(format!("{} layer carries no weights", layer.kind())))
}

/// `R_k / z_k`, or zero where `|z_k| < stabilizer`.
fn guarded_ratio(r: &[f64], z: &[f64], stabilizer: f64) -> Vec<f64> {
    r.iter()
        .zip(z)
        .map(|(&rk, &zk)| if zk.abs() < stabilizer { 0.0 } else { rk / zk })
        .collect()
}

fn check_upper(layer: &Layer, a: &Tensor, r_upper: &Tensor) -> Result<()> {
    let out = layer.output_shape(a.shape(), 0)?;
    r_upper.expect_shape(&out)
}

/// z⁺ rule: `R_j = a_j Σ_k w⁺_jk R_k / Σ_j a_j w⁺_jk`.
pub fn zplus(layer: &Layer, a: &Tensor, r_upper: &Tensor, stabilizer: f64) -> Result<Tensor> {
    check_upper(layer, a, r_upper)?;
    let (pos, _) = split_weights(linear_weights(layer)?);
    let z = layer.linear_forward(&pos, a)?;
    let s = guarded_ratio(r_upper.data(), &z, stabilizer);
    let c = layer.linear_transpose(&pos, a.shape(), &s)?;
    a.mul(&Tensor::new(a.shape().to_vec(), c)?)
}

/// αβ-rule on a dense or convolution layer.
///
/// When a unit has no inhibitory input (its negative denominator vanishes)
/// its relevance is redistributed by the z⁺ rule alone, so the rule stays
/// conservative. When the excitatory denominator vanishes, the unit's
/// relevance is absorbed.
pub fn alpha_beta(
    layer: &Layer,
    a: &Tensor,
    r_upper: &Tensor,
    alpha: f64,
    beta: f64,
    stabilizer: f64,
) -> Result<Tensor> {
    check_alpha_beta(alpha, beta)?;
    check_upper(layer, a, r_upper)?;
    let (pos, neg) = split_weights(linear_weights(layer)?);
    let zp = layer.linear_forward(&pos, a)?;
    let zn = layer.linear_forward(&neg, a)?;
    let n = r_upper.len();
    let mut sp = vec![0.0; n];
    let mut sn = vec![0.0; n];
    for k in 0..n {
        let rk = r_upper.data()[k];
        if zp[k].abs() < stabilizer {
            continue;
        }
        if zn[k].abs() < stabilizer {
            sp[k] = rk / zp[k];
        } else {
            sp[k] = alpha * rk / zp[k];
            sn[k] = beta * rk / zn[k];
        }
    }
    let cp = layer.linear_transpose(&pos, a.shape(), &sp)?;
    let cn = layer.linear_transpose(&neg, a.shape(), &sn)?;
    let r = a
        .data()
        .iter()
        .zip(cp.iter().zip(&cn))
        .map(|(&aj, (&p, &q))| aj * (p - q))
        .collect();
    Tensor::new(a.shape().to_vec(), r)
}

pub(crate) fn check_alpha_beta(alpha: f64, beta: f64) -> Result<()> {
    if !(beta >= 0.0 && ((alpha - beta) - 1.0).abs() <= 1e-12) {
        return Err(Error::invalid(format!(
            "alpha-beta rule needs alpha - beta = 1 and beta >= 0, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

/// ε-rule: `R_j = Σ_k a_j w_jk / (z_k + ε·sign(z_k)) · R_k` with
/// `z_k = Σ_j a_j w_jk + b_k` and `sign(0) = +1`.
pub fn epsilon(layer: &Layer, a: &Tensor, r_upper: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    check_upper(layer, a, r_upper)?;
    let w = linear_weights(layer)?;
    let bias = layer.bias().expect("linear layers carry a bias");
    let mut z = layer.linear_forward(w.data(), a)?;
    let per_bias = z.len() / bias.len();
    for (zc, &b) in z.chunks_mut(per_bias).zip(bias.data()) {
        zc.iter_mut().for_each(|v| *v += b);
    }
    let s: Vec<f64> = r_upper
        .data()
        .iter()
        .zip(&z)
        .map(|(&r, &zk)| r / (zk + if zk >= 0.0 { eps } else { -eps }))
        .collect();
    let c = layer.linear_transpose(w.data(), a.shape(), &s)?;
    a.mul(&Tensor::new(a.shape().to_vec(), c)?)
}

/// w²-rule for unbounded real-valued inputs. Independent of the input values.
pub fn wsquare(
    layer: &Layer,
    input_shape: &[usize],
    r_upper: &Tensor,
    stabilizer: f64,
) -> Result<Tensor> {
    let ones = Tensor::full(input_shape, 1.0);
    check_upper(layer, &ones, r_upper)?;
    let sq: Vec<f64> = linear_weights(layer)?
        .data()
        .iter()
        .map(|w| w * w)
        .collect();
    let z = layer.linear_forward(&sq, &ones)?;
    let s = guarded_ratio(r_upper.data(), &z, stabilizer);
    Tensor::new(
        input_shape.to_vec(),
        layer.linear_transpose(&sq, input_shape, &s)?,
    )
}

/// z^B-rule for inputs bounded by `low ≤ x ≤ high` with `low ≤ 0 ≤ high`.
pub fn zb(
    layer: &Layer,
    x: &Tensor,
    r_upper: &Tensor,
    low: &Tensor,
    high: &Tensor,
    stabilizer: f64,
) -> Result<Tensor> {
    check_upper(layer, x, r_upper)?;
    check_bounds(low, high, x.len())?;
    let low = low.reshape(x.shape())?;
    let high = high.reshape(x.shape())?;
    let w = linear_weights(layer)?;
    let (pos, neg) = split_weights(w);
    let zx = layer.linear_forward(w.data(), x)?;
    let zl = layer.linear_forward(&pos, &low)?;
    let zh = layer.linear_forward(&neg, &high)?;
    let z: Vec<f64> = (0..zx.len()).map(|k| zx[k] - zl[k] - zh[k]).collect();
    let s = guarded_ratio(r_upper.data(), &z, stabilizer);
    let cx = layer.linear_transpose(w.data(), x.shape(), &s)?;
    let cl = layer.linear_transpose(&pos, x.shape(), &s)?;
    let ch = layer.linear_transpose(&neg, x.shape(), &s)?;
    let r = (0..x.len())
        .map(|i| x.data()[i] * cx[i] - low.data()[i] * cl[i] - high.data()[i] * ch[i])
        .collect();
    Tensor::new(x.shape().to_vec(), r)
}

pub(crate) fn check_bounds(low: &Tensor, high: &Tensor, n: usize) -> Result<()> {
    if low.len() != n || high.len() != n {
        return Err(Error::invalid(format!(
            "z^B bounds hold {} / {} values but the layer input has {n}",
            low.len(),
            high.len()
        )));
    }
    let ok = low
        .data()
        .iter()
        .zip(high.data())
        .all(|(&l, &h)| l <= 0.0 && 0.0 <= h && l.is_finite() && h.is_finite());
    if !ok {
        return Err(Error::invalid(
            "z^B bounds must be finite with low <= 0 <= high",
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolPolicy {
    /// `R_j = x_j / Σ_pool x_j · R_k`.
    Proportional,
    /// All of a pool's relevance goes to its most activated unit.
    WinnerTakeAll,
}

/// Relevance through a pooling layer. `winners` overrides the arg-max map
/// for the winner-take-all policy (max-pool traces record one).
pub fn pool(
    layer: &Layer,
    a: &Tensor,
    winners: Option<&[usize]>,
    r_upper: &Tensor,
    policy: PoolPolicy,
    stabilizer: f64,
) -> Result<Tensor> {
    let spec = layer
        .pool_spec()
        .ok_or_else(|| Error::invalid(format!("{} is not a pooling layer", layer.kind())))?;
    let g = PoolGeometry::new(&spec, a.shape()).map_err(Error::invalid)?;
    r_upper.expect_shape(&[g.c, g.oh, g.ow])?;
    let r = match policy {
        PoolPolicy::Proportional => {
            let z = g.sum(a.data());
            let s = guarded_ratio(r_upper.data(), &z, stabilizer);
            let c = g.sum_transpose(&s);
            a.data().iter().zip(c).map(|(x, c)| x * c).collect()
        }
        PoolPolicy::WinnerTakeAll => {
            let computed;
            let winners = match winners {
                Some(w) => w,
                None => {
                    computed = g.argmax(a.data());
                    &computed
                }
            };
            let mut r = vec![0.0; a.len()];
            for (&w, &rk) in winners.iter().zip(r_upper.data()) {
                r[w] += rk;
            }
            r
        }
    };
    Tensor::new(a.shape().to_vec(), r)
}

fn dense_layer(w: &Tensor, bias: Option<&Tensor>) -> Result<Layer> {
    if w.ndim() != 2 {
        return Err(Error::invalid(format!(
            "dense weights must be 2-D (in × out), got {:?}",
            w.shape()
        )));
    }
    let bias = match bias {
        Some(b) => b.clone(),
        None => Tensor::zeros(&[w.shape()[1]]),
    };
    Ok(Layer::dense(w.clone(), bias))
}

/// αβ-rule on a dense `in × out` weight matrix.
pub fn lrp_dense_alphabeta(
    a: &Tensor,
    w: &Tensor,
    r_upper: &Tensor,
    alpha: f64,
    beta: f64,
    stabilizer: f64,
) -> Result<Tensor> {
    alpha_beta(&dense_layer(w, None)?, a, r_upper, alpha, beta, stabilizer)
}

/// z⁺ rule on a dense `in × out` weight matrix.
pub fn lrp_dense_zplus(
    a: &Tensor,
    w: &Tensor,
    r_upper: &Tensor,
    stabilizer: f64,
) -> Result<Tensor> {
    zplus(&dense_layer(w, None)?, a, r_upper, stabilizer)
}

pub fn lrp_dense_epsilon(
    a: &Tensor,
    w: &Tensor,
    b: &Tensor,
    r_upper: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    epsilon(&dense_layer(w, Some(b))?, a, r_upper, eps)
}

pub fn lrp_input_wsquare(w: &Tensor, r_upper: &Tensor, stabilizer: f64) -> Result<Tensor> {
    let layer = dense_layer(w, None)?;
    wsquare(&layer, &[w.shape()[0]], r_upper, stabilizer)
}

pub fn lrp_input_zb(
    x: &Tensor,
    w: &Tensor,
    r_upper: &Tensor,
    low: &Tensor,
    high: &Tensor,
    stabilizer: f64,
) -> Result<Tensor> {
    zb(&dense_layer(w, None)?, x, r_upper, low, high, stabilizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::PoolSpec;

    const STAB: f64 = 1e-9;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn alphabeta_hand_run() {
        // w_jk = [[1, -1], [2, 1]]: z = (3, 1), s = (1, 1), c = (1, 3).
        let w = m(2, 2, &[1.0, -1.0, 2.0, 1.0]);
        let r = lrp_dense_alphabeta(&t(&[1.0, 1.0]), &w, &t(&[3.0, 1.0]), 1.0, 0.0, STAB).unwrap();
        assert_eq!(r.data(), &[1.0, 3.0]);
        assert_eq!(r.sum(), 4.0);
    }

    #[test]
    fn alphabeta_single_output() {
        let w = m(2, 1, &[2.0, 3.0]);
        let r = lrp_dense_alphabeta(&t(&[1.0, 1.0]), &w, &t(&[5.0]), 1.0, 0.0, STAB).unwrap();
        assert_eq!(r.data(), &[2.0, 3.0]);
    }

    #[test]
    fn alphabeta_positive_weights_ignore_beta() {
        let w = m(3, 2, &[0.5, 1.0, 2.0, 0.25, 1.5, 3.0]);
        let a = t(&[0.3, 1.2, 0.7]);
        let r = t(&[1.0, -2.0]);
        let r10 = lrp_dense_alphabeta(&a, &w, &r, 1.0, 0.0, STAB).unwrap();
        let r21 = lrp_dense_alphabeta(&a, &w, &r, 2.0, 1.0, STAB).unwrap();
        assert_eq!(r10, r21);
    }

    #[test]
    fn alphabeta_two_one_conserves_with_mixed_weights() {
        let w = m(3, 2, &[0.5, -1.0, -2.0, 0.25, 1.5, 3.0]);
        let a = t(&[0.3, 1.2, 0.7]);
        let r = lrp_dense_alphabeta(&a, &w, &t(&[1.0, 2.0]), 2.0, 1.0, STAB).unwrap();
        assert!((r.sum() - 3.0).abs() < 1e-12);
        // Input 1 only inhibits unit 0, so it carries negative relevance.
        assert!(r.data()[1] < 0.0);
    }

    #[test]
    fn alphabeta_zero_activation_absorbs() {
        let w = m(2, 2, &[1.0, -1.0, 2.0, 1.0]);
        let r = lrp_dense_alphabeta(&t(&[0.0, 0.0]), &w, &t(&[3.0, 1.0]), 2.0, 1.0, STAB).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0]);
    }

    #[test]
    fn alphabeta_rejects_bad_parameters() {
        let w = m(1, 1, &[1.0]);
        assert!(lrp_dense_alphabeta(&t(&[1.0]), &w, &t(&[1.0]), 2.0, 0.0, STAB).is_err());
        assert!(lrp_dense_alphabeta(&t(&[1.0]), &w, &t(&[1.0]), 0.5, -0.5, STAB).is_err());
    }

    #[test]
    fn epsilon_cases() {
        let w = m(2, 1, &[2.0, 3.0]);
        let b = t(&[0.0]);
        let r = lrp_dense_epsilon(&t(&[1.0, 1.0]), &w, &b, &t(&[5.0]), 1e-9).unwrap();
        assert!((r.data()[0] - 2.0).abs() < 1e-8 && (r.data()[1] - 3.0).abs() < 1e-8);

        // z = 0 takes sign +1.
        let w = m(2, 1, &[1.0, -1.0]);
        let r = lrp_dense_epsilon(&t(&[1.0, 1.0]), &w, &b, &t(&[1.0]), 0.1).unwrap();
        assert!(r.is_finite());
        assert_eq!(r.data(), &[10.0, -10.0]);
        assert!(lrp_dense_epsilon(&t(&[1.0, 1.0]), &w, &b, &t(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn epsilon_includes_bias() {
        // z = 2 + 3 + 5 = 10: half the relevance is attributed to the bias.
        let w = m(2, 1, &[2.0, 3.0]);
        let r = lrp_dense_epsilon(&t(&[1.0, 1.0]), &w, &t(&[5.0]), &t(&[10.0]), 1e-12).unwrap();
        assert!((r.data()[0] - 2.0).abs() < 1e-9 && (r.data()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn wsquare_cases() {
        let r = lrp_input_wsquare(&m(2, 1, &[1.0, 2.0]), &t(&[1.0]), STAB).unwrap();
        assert!((r.data()[0] - 0.2).abs() < 1e-15 && (r.data()[1] - 0.8).abs() < 1e-15);
        let r = lrp_input_wsquare(&m(2, 1, &[1.0, 1.0]), &t(&[1.0]), STAB).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5]);
        let w = m(3, 2, &[1.0, -0.5, 2.0, 0.0, -3.0, 1.0]);
        let r = lrp_input_wsquare(&w, &t(&[0.7, 1.9]), STAB).unwrap();
        assert!((r.sum() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn wsquare_zero_column_drops_relevance() {
        let w = m(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let r = lrp_input_wsquare(&w, &t(&[1.0, 5.0]), STAB).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5]);
    }

    #[test]
    fn zb_cases() {
        let w = m(2, 1, &[1.0, 1.0]);
        let r = lrp_input_zb(
            &t(&[1.0, 0.0]),
            &w,
            &t(&[1.0]),
            &t(&[0.0, 0.0]),
            &t(&[1.0, 1.0]),
            STAB,
        )
        .unwrap();
        assert_eq!(r.data(), &[1.0, 0.0]);

        // x = l = 0 with negative weights: numerators -h w⁻ are non-negative.
        let w = m(2, 1, &[-1.0, -3.0]);
        let r = lrp_input_zb(
            &t(&[0.0, 0.0]),
            &w,
            &t(&[2.0]),
            &t(&[0.0, 0.0]),
            &t(&[1.0, 1.0]),
            STAB,
        )
        .unwrap();
        assert!(r.data().iter().all(|&v| v >= 0.0));
        assert!((r.data()[0] - 0.5).abs() < 1e-15 && (r.data()[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn zb_conserves() {
        let w = m(3, 2, &[0.4, -1.0, -0.3, 0.8, 1.1, 0.2]);
        let x = t(&[0.2, 0.9, 0.5]);
        let (lo, hi) = (t(&[-0.1, 0.0, -1.0]), t(&[1.0, 1.0, 2.0]));
        let r = lrp_input_zb(&x, &w, &t(&[1.5, 0.5]), &lo, &hi, STAB).unwrap();
        assert!((r.sum() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zb_rejects_bad_bounds() {
        let w = m(2, 1, &[1.0, 1.0]);
        let x = t(&[0.5, 0.5]);
        assert!(lrp_input_zb(&x, &w, &t(&[1.0]), &t(&[0.1, 0.0]), &t(&[1.0, 1.0]), STAB).is_err());
    }

    #[test]
    fn pool_policies() {
        let layer = Layer::SumPool(PoolSpec::new([1, 2], 2));
        let a = Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap();
        let r = Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap();
        let p = pool(&layer, &a, None, &r, PoolPolicy::Proportional, STAB).unwrap();
        assert_eq!(p.data(), &[1.0, 3.0]);
        let p = pool(&layer, &a, None, &r, PoolPolicy::WinnerTakeAll, STAB).unwrap();
        assert_eq!(p.data(), &[0.0, 4.0]);
        let zero = Tensor::zeros(&[1, 1, 2]);
        let p = pool(&layer, &zero, None, &r, PoolPolicy::Proportional, STAB).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);
    }
}
