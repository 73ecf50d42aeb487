//! Relevance propagation against an explicit per-edge enumeration and the
//! global properties of the deep Taylor stack.

mod common;

use common::{close_rel, rng, uniform};
use lrpkit::explain::rules::{self, PoolPolicy};
use lrpkit::explain::{explain_lrp, filter_relevance, lrp, InputDomain, LayerRule, RuleConfig};
use lrpkit::fixtures::{self, BiasMode};
use lrpkit::{Layer, Network, PoolSpec, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Independent reference: explicit message passing over every edge `j → k`.
#[derive(Clone, Copy, Debug)]
enum OracleRule {
    AlphaBeta(f64, f64),
    Epsilon(f64),
    WSquare,
    Zb(f64, f64),
}

const STAB: f64 = 1e-9;

fn oracle_shares(
    rule: OracleRule,
    a: &[f64],
    w: &[Vec<f64>],
    b: &[f64],
    r_upper: &[f64],
) -> Vec<f64> {
    let (n_in, n_out) = (a.len(), r_upper.len());
    let mut r = vec![0.0; n_in];
    for k in 0..n_out {
        // Per-edge contributions to unit k and their normalizers.
        let shares: Vec<f64> = match rule {
            OracleRule::AlphaBeta(alpha, beta) => {
                let zp: Vec<f64> = (0..n_in).map(|j| a[j] * w[j][k].max(0.0)).collect();
                let zn: Vec<f64> = (0..n_in).map(|j| a[j] * w[j][k].min(0.0)).collect();
                let (sp, sn): (f64, f64) = (zp.iter().sum(), zn.iter().sum());
                if sp.abs() < STAB {
                    vec![0.0; n_in]
                } else if sn.abs() < STAB {
                    zp.iter().map(|z| z / sp * r_upper[k]).collect()
                } else {
                    (0..n_in)
                        .map(|j| (alpha * zp[j] / sp - beta * zn[j] / sn) * r_upper[k])
                        .collect()
                }
            }
            OracleRule::Epsilon(eps) => {
                let z: f64 = (0..n_in).map(|j| a[j] * w[j][k]).sum::<f64>() + b[k];
                let denom = z + if z >= 0.0 { eps } else { -eps };
                (0..n_in)
                    .map(|j| a[j] * w[j][k] / denom * r_upper[k])
                    .collect()
            }
            OracleRule::WSquare => {
                let z: f64 = (0..n_in).map(|j| w[j][k] * w[j][k]).sum();
                (0..n_in)
                    .map(|j| w[j][k] * w[j][k] / z * r_upper[k])
                    .collect()
            }
            OracleRule::Zb(l, h) => {
                let q: Vec<f64> = (0..n_in)
                    .map(|j| a[j] * w[j][k] - l * w[j][k].max(0.0) - h * w[j][k].min(0.0))
                    .collect();
                let z: f64 = q.iter().sum();
                q.iter().map(|qj| qj / z * r_upper[k]).collect()
            }
        };
        for j in 0..n_in {
            r[j] += shares[j];
        }
    }
    r
}

/// Dense-only networks: walk the layers with hand-written forward passes.
fn oracle_lrp(
    net: &Network,
    x: &[f64],
    class: usize,
    first: OracleRule,
    rest: OracleRule,
) -> Vec<f64> {
    struct Dense {
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
        relu: bool,
    }
    let layers = net.layers();
    let mut dense = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        if let Layer::Dense { weights, bias } = layer {
            let n_out = weights.shape()[1];
            dense.push(Dense {
                w: weights.data().chunks(n_out).map(|r| r.to_vec()).collect(),
                b: bias.data().to_vec(),
                relu: matches!(layers.get(i + 1), Some(Layer::ReLU)),
            });
        }
    }
    let mut acts = vec![x.to_vec()];
    for d in &dense {
        let a = acts.last().unwrap();
        let z: Vec<f64> = (0..d.b.len())
            .map(|k| (0..a.len()).map(|j| a[j] * d.w[j][k]).sum::<f64>() + d.b[k])
            .collect();
        acts.push(if d.relu {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            z
        });
    }
    let logits = acts.last().unwrap();
    let mut r: Vec<f64> = (0..logits.len())
        .map(|k| if k == class { logits[k] } else { 0.0 })
        .collect();
    for (i, d) in dense.iter().enumerate().rev() {
        let rule = if i == 0 { first } else { rest };
        r = oracle_shares(rule, &acts[i], &d.w, &d.b, &r);
    }
    r
}

fn engine_rule(rule: OracleRule) -> LayerRule {
    match rule {
        OracleRule::AlphaBeta(alpha, beta) => LayerRule::AlphaBeta { alpha, beta },
        OracleRule::Epsilon(e) => LayerRule::Epsilon(e),
        OracleRule::WSquare => LayerRule::WSquare,
        OracleRule::Zb(..) => unreachable!("built separately"),
    }
}

fn small_widths<R: Rng>(r: &mut R) -> Vec<usize> {
    let depth = r.random_range(2..=4);
    (0..depth).map(|_| r.random_range(1..=3)).collect()
}

#[test]
fn engine_matches_per_edge_enumeration() {
    let mut r = rng(100);
    let combos = [
        (
            OracleRule::AlphaBeta(1.0, 0.0),
            OracleRule::AlphaBeta(1.0, 0.0),
        ),
        (
            OracleRule::AlphaBeta(2.0, 1.0),
            OracleRule::AlphaBeta(2.0, 1.0),
        ),
        (
            OracleRule::AlphaBeta(3.0, 2.0),
            OracleRule::AlphaBeta(3.0, 2.0),
        ),
        (OracleRule::Epsilon(0.01), OracleRule::Epsilon(0.01)),
        (OracleRule::WSquare, OracleRule::AlphaBeta(1.0, 0.0)),
        (OracleRule::Zb(0.0, 1.0), OracleRule::AlphaBeta(1.0, 0.0)),
        (OracleRule::Zb(-1.0, 1.0), OracleRule::AlphaBeta(1.0, 0.0)),
    ];
    let mut checked = 0;
    for case in 0..300 {
        let widths = small_widths(&mut r);
        let bias = if case % 2 == 0 {
            BiasMode::Zero
        } else {
            BiasMode::Any
        };
        let net = fixtures::random_mlp(&mut r, &widths, bias);
        let x = uniform(&mut r, &[widths[0]], 0.0, 1.0);
        let class = r.random_range(0..*widths.last().unwrap());
        for &(first, rest) in &combos {
            let mut cfg = RuleConfig::uniform(&net, engine_rule(rest), PoolPolicy::Proportional);
            cfg.set(
                0,
                match first {
                    OracleRule::Zb(l, h) => LayerRule::ZB {
                        low: Tensor::full(&[widths[0]], l),
                        high: Tensor::full(&[widths[0]], h),
                    },
                    other => engine_rule(other),
                },
            );
            let engine = explain_lrp(&net, &x, class, &cfg).unwrap();
            let expected = oracle_lrp(&net, x.data(), class, first, rest);
            for (e, o) in engine.scores().data().iter().zip(&expected) {
                assert!(
                    (e - o).abs() <= 1e-12 * o.abs().max(1.0),
                    "case {case} {first:?}/{rest:?}: engine {e} oracle {o}"
                );
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 300 * combos.len());
}

#[test]
fn alpha1_beta0_is_bitwise_zplus() {
    let mut r = rng(101);
    for _ in 0..50 {
        let layer = Layer::conv2d(
            uniform(&mut r, &[2, 2, 2, 2], -1.0, 1.0),
            Tensor::zeros(&[2]),
            1,
            1,
        );
        let a = uniform(&mut r, &[2, 4, 4], 0.0, 1.0);
        let up = uniform(
            &mut r,
            &layer.output_shape(&[2, 4, 4], 0).unwrap(),
            0.0,
            1.0,
        );
        assert_eq!(
            rules::alpha_beta(&layer, &a, &up, 1.0, 0.0, STAB).unwrap(),
            rules::zplus(&layer, &a, &up, STAB).unwrap()
        );
        let w = uniform(&mut r, &[5, 3], -1.0, 1.0);
        let a = uniform(&mut r, &[5], 0.0, 1.0);
        let up = uniform(&mut r, &[3], 0.0, 1.0);
        assert_eq!(
            rules::lrp_dense_alphabeta(&a, &w, &up, 1.0, 0.0, STAB).unwrap(),
            rules::lrp_dense_zplus(&a, &w, &up, STAB).unwrap()
        );
    }
}

/// Picks an input on which the predicted class has a positive score.
fn positive_input<R: Rng>(r: &mut R, net: &Network) -> Option<(Tensor, usize)> {
    for _ in 0..20 {
        let x = uniform(r, net.input_shape(), 0.0, 1.0);
        let c = net.predict(&x).unwrap();
        if net.logit(&x, c).unwrap() > 1e-3 {
            return Some((x, c));
        }
    }
    None
}

fn zero_bias_mlp_strategy() -> impl Strategy<Value = (u64, Vec<usize>)> {
    (any::<u64>(), prop::collection::vec(1usize..=64, 2..=4)).prop_map(|(s, mut w)| {
        let last = w.len() - 1;
        w[last] = w[last].clamp(1, 10);
        (s, w)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conservation_on_zero_bias_networks((seed, widths) in zero_bias_mlp_strategy()) {
        let mut r = rng(seed);
        let net = fixtures::random_mlp(&mut r, &widths, BiasMode::Zero);
        let Some((x, c)) = positive_input(&mut r, &net) else { return Ok(()); };
        let f = net.logit(&x, c).unwrap();
        for cfg in [
            RuleConfig::alpha_beta(&net, 1.0, 0.0),
            RuleConfig::alpha_beta(&net, 2.0, 1.0),
            RuleConfig::deep_taylor(&net, InputDomain::NonNegative),
            RuleConfig::deep_taylor(&net, InputDomain::pixels(&net, 0.0, 1.0)),
            RuleConfig::deep_taylor(&net, InputDomain::Real),
        ] {
            let trace = net.forward(&x).unwrap();
            let run = lrp(&net, &trace, c, &cfg).unwrap();
            // Layer-wise conservation, not only at the input.
            for rel in run.relevances() {
                prop_assert!(close_rel(rel.sum(), f, 1e-9), "{} vs {f}", rel.sum());
            }
        }
    }

    #[test]
    fn deep_taylor_relevance_is_non_negative((seed, widths) in zero_bias_mlp_strategy()) {
        let mut r = rng(seed);
        let net = fixtures::random_mlp(&mut r, &widths, BiasMode::Zero);
        let Some((x, c)) = positive_input(&mut r, &net) else { return Ok(()); };
        for domain in [InputDomain::NonNegative, InputDomain::pixels(&net, 0.0, 1.0), InputDomain::Real] {
            let h = explain_lrp(&net, &x, c, &RuleConfig::deep_taylor(&net, domain)).unwrap();
            prop_assert!(h.scores().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn relevance_scales_with_the_input((seed, widths) in zero_bias_mlp_strategy(), t in 0.1f64..10.0) {
        let mut r = rng(seed);
        let net = fixtures::random_mlp(&mut r, &widths, BiasMode::Zero);
        let Some((x, c)) = positive_input(&mut r, &net) else { return Ok(()); };
        let cfg = RuleConfig::alpha_beta(&net, 2.0, 1.0);
        let base = explain_lrp(&net, &x, c, &cfg).unwrap();
        let scaled = explain_lrp(&net, &x.scale(t), c, &cfg).unwrap();
        for (a, b) in base.scores().data().iter().zip(scaled.scores().data()) {
            prop_assert!((a * t - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn conv_nets_conserve_under_deep_taylor() {
    let mut r = rng(102);
    let mut checked = 0;
    for case in 0..60 {
        let pool = match case % 3 {
            0 => fixtures::sum_pool2(),
            1 => Layer::AvgPool(PoolSpec::square(2)),
            _ => Layer::MaxPool(PoolSpec::square(2)),
        };
        let max = matches!(pool, Layer::MaxPool(_));
        let net = fixtures::random_conv_net(&mut r, [1, 8, 8], 3, 3, pool, 3, BiasMode::Zero);
        let Some((x, c)) = positive_input(&mut r, &net) else {
            continue;
        };
        let f = net.logit(&x, c).unwrap();
        let mut cfg = RuleConfig::deep_taylor(&net, InputDomain::pixels(&net, 0.0, 1.0));
        if max {
            cfg.set(2, LayerRule::PoolWinnerTakeAll);
        }
        let h = explain_lrp(&net, &x, c, &cfg).unwrap();
        assert!(
            close_rel(h.total(), f, 1e-9),
            "case {case}: {} vs {f}",
            h.total()
        );
        checked += 1;
    }
    assert!(checked >= 30);
}

#[test]
fn scaling_the_top_layer_scales_relevance() {
    let mut r = rng(103);
    for _ in 0..20 {
        let net = fixtures::random_mlp(&mut r, &[4, 5, 2], BiasMode::Zero);
        let t = 4.0;
        let mut layers = net.layers().to_vec();
        let last = layers.len() - 1;
        if let Layer::Dense { weights, bias } = &layers[last] {
            layers[last] = Layer::dense(weights.scale(t), bias.clone());
        }
        let scaled = Network::new(net.input_shape().to_vec(), 2, layers).unwrap();
        let x = uniform(&mut r, &[4], 0.0, 1.0);
        let cfg = RuleConfig::deep_taylor(&net, InputDomain::NonNegative);
        let a = explain_lrp(&net, &x, 0, &cfg).unwrap();
        let b = explain_lrp(&scaled, &x, 0, &cfg).unwrap();
        // A power-of-two factor keeps the arithmetic exact.
        assert_eq!(a.scores().scale(t), *b.scores());
    }
}

#[test]
fn filtered_relevance_sums_to_the_full_heatmap() {
    let mut r = rng(104);
    let net = fixtures::random_mlp(&mut r, &[5, 4, 3, 2], BiasMode::Zero);
    let x = uniform(&mut r, &[5], 0.0, 1.0);
    let cfg = RuleConfig::deep_taylor(&net, InputDomain::NonNegative);
    let trace = net.forward(&x).unwrap();
    let run = lrp(&net, &trace, 0, &cfg).unwrap();
    let position = 2; // relevance entering the first ReLU from above
    let width = run.relevance(position).len();
    let mut acc = Tensor::zeros(&[5]);
    for unit in 0..width {
        let mut mask = Tensor::zeros(run.relevance(position).shape());
        mask.data_mut()[unit] = 1.0;
        let part = filter_relevance(&net, &trace, &run, position, &mask, &cfg).unwrap();
        acc = acc.add(part.scores()).unwrap();
    }
    for (a, b) in acc.data().iter().zip(run.relevance(0).data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

/// A 1×4×4 map whose 2×2 pools each sum to a power of two, split into
/// quarter-integers, so every share `x_j / z · R` is exact.
fn dyadic_pool_input<R: Rng>(r: &mut R) -> Tensor {
    let mut data = vec![0.0; 16];
    for (py, px) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        let quarters = 4usize << r.random_range(0..3);
        let mut cuts: Vec<usize> = (0..3).map(|_| r.random_range(0..=quarters)).collect();
        cuts.sort_unstable();
        let parts = [
            cuts[0],
            cuts[1] - cuts[0],
            cuts[2] - cuts[1],
            quarters - cuts[2],
        ];
        for (i, part) in parts.iter().enumerate() {
            data[(py + i / 2) * 4 + px + i % 2] = *part as f64 * 0.25;
        }
    }
    Tensor::new(vec![1, 4, 4], data).unwrap()
}

#[test]
fn pooling_conserves_exactly_on_dyadic_values() {
    let mut r = rng(105);
    let layer = Layer::SumPool(PoolSpec::square(2));
    for policy in [PoolPolicy::Proportional, PoolPolicy::WinnerTakeAll] {
        for _ in 0..100 {
            let a = dyadic_pool_input(&mut r);
            let up = Tensor::new(
                vec![1, 2, 2],
                (0..4).map(|_| r.random_range(-8..8) as f64).collect(),
            )
            .unwrap();
            let down = rules::pool(&layer, &a, None, &up, policy, STAB).unwrap();
            assert_eq!(down.sum(), up.sum());
        }
    }
}

#[test]
fn pooling_conserves_on_random_values() {
    let mut r = rng(106);
    for policy in [PoolPolicy::Proportional, PoolPolicy::WinnerTakeAll] {
        for _ in 0..100 {
            let a = uniform(&mut r, &[2, 6, 6], 0.0, 1.0);
            let layer = Layer::MaxPool(PoolSpec::new([3, 3], 2));
            let out_shape = layer.output_shape(&[2, 6, 6], 0).unwrap();
            let up = uniform(&mut r, &out_shape, -1.0, 1.0);
            let down = rules::pool(&layer, &a, None, &up, policy, STAB).unwrap();
            assert!((down.sum() - up.sum()).abs() <= 1e-12 * up.norm_l1().max(1.0));
        }
    }
}

#[test]
fn max_network_reference_points() {
    let net = fixtures::max_network();
    let cfg = RuleConfig::deep_taylor(&net, InputDomain::NonNegative);
    let at = |x: [f64; 2]| explain_lrp(&net, &Tensor::from_vec(x.to_vec()), 0, &cfg).unwrap();
    assert_eq!(at([1.0, 0.0]).scores().data(), &[1.0, 0.0]);
    assert_eq!(at([0.0, 1.0]).scores().data(), &[0.0, 1.0]);
    assert_eq!(at([1.0, 1.0]).scores().data(), &[0.5, 0.5]);
    // Closed form off the diagonal: R = (x1 − x2/2, x2/2) for x1 > x2.
    let h = at([0.75, 0.25]);
    assert!((h.scores().data()[0] - 0.625).abs() < 1e-15);
    assert!((h.scores().data()[1] - 0.125).abs() < 1e-15);
}
