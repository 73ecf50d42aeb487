//! Plain minibatch SGD with cross-entropy on log-softmax outputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{softmax, Network};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Project biases onto `b ≤ 0` after every step.
    pub nonpositive_bias: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            nonpositive_bias: false,
        }
    }
}

pub fn train_sgd(
    network: &Network,
    dataset: &[(Tensor, usize)],
    config: &SgdConfig,
) -> Result<Network> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
        return Err(Error::invalid(
            "learning rate must be finite and non-negative",
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    for (i, (x, label)) in dataset.iter().enumerate() {
        x.expect_shape(network.input_shape())?;
        if *label >= network.class_count() {
            return Err(Error::invalid(format!(
                "sample {i}: label {label} outside [0, {})",
                network.class_count()
            )));
        }
    }

    let mut net = network.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let grads = batch_gradients(&net, dataset, batch)?;
            let step = config.learning_rate / batch.len() as f64;
            for (layer, grad) in net.layers_mut().iter_mut().zip(grads) {
                let (Some((w, b)), Some((dw, db))) = (layer.params_mut(), grad) else {
                    continue;
                };
                for (p, g) in w.data_mut().iter_mut().zip(dw.data()) {
                    *p -= step * g;
                }
                for (p, g) in b.data_mut().iter_mut().zip(db.data()) {
                    *p -= step * g;
                    if config.nonpositive_bias && *p > 0.0 {
                        *p = 0.0;
                    }
                }
            }
        }
    }
    if net
        .layers()
        .iter()
        .filter_map(|l| l.weights())
        .any(|w| !w.is_finite())
    {
        return Err(Error::NonFinite("training diverged".into()));
    }
    Ok(net)
}

/// Summed cross-entropy gradients of a minibatch, one entry per layer.
fn batch_gradients(
    net: &Network,
    dataset: &[(Tensor, usize)],
    batch: &[usize],
) -> Result<Vec<Option<(Tensor, Tensor)>>> {
    let mut total: Vec<Option<(Tensor, Tensor)>> = vec![None; net.layers().len()];
    for &idx in batch {
        let (x, label) = &dataset[idx];
        let trace = net.forward(x)?;
        let mut grad = softmax(trace.logits());
        grad.data_mut()[*label] -= 1.0;
        for (i, layer) in net.layers().iter().enumerate().rev() {
            if let Some((dw, db)) = layer.param_grads(trace.layer_input(i), &grad) {
                total[i] = Some(match total[i].take() {
                    None => (dw, db),
                    Some((aw, ab)) => (aw.add(&dw)?, ab.add(&db)?),
                });
            }
            if i > 0 {
                grad = layer.backward_input(trace.layer_input(i), trace.winners(i), &grad)?;
            }
        }
    }
    Ok(total)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(network: &Network, dataset: &[(Tensor, usize)]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for (x, label) in dataset {
        if network.predict(x)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, BiasMode};

    fn blob_setup() -> (Network, Vec<(Tensor, usize)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = fixtures::random_mlp(&mut rng, &[2, 2], BiasMode::Zero);
        (net, fixtures::two_blobs(&mut rng, 100))
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (net, data) = blob_setup();
        let cfg = SgdConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        assert_eq!(train_sgd(&net, &data, &cfg).unwrap(), net);
    }

    #[test]
    fn separates_two_blobs() {
        let (net, data) = blob_setup();
        let cfg = SgdConfig {
            epochs: 50,
            ..Default::default()
        };
        let trained = train_sgd(&net, &data, &cfg).unwrap();
        assert!(accuracy(&trained, &data).unwrap() >= 0.95);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (net, data) = blob_setup();
        let cfg = SgdConfig {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(
            train_sgd(&net, &data, &cfg).unwrap(),
            train_sgd(&net, &data, &cfg).unwrap()
        );
    }

    #[test]
    fn nonpositive_bias_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = fixtures::random_mlp(&mut rng, &[2, 4, 2], BiasMode::Zero);
        let data = fixtures::two_blobs(&mut rng, 50);
        let cfg = SgdConfig {
            nonpositive_bias: true,
            ..Default::default()
        };
        let trained = train_sgd(&net, &data, &cfg).unwrap();
        for b in trained.layers().iter().filter_map(|l| l.bias()) {
            assert!(b.data().iter().all(|&v| v <= 0.0));
        }
    }

    #[test]
    fn rejects_empty_and_bad_labels() {
        let (net, _) = blob_setup();
        assert!(matches!(
            train_sgd(&net, &[], &SgdConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let bad = vec![(Tensor::from_vec(vec![0.0, 0.0]), 5)];
        assert!(train_sgd(&net, &bad, &SgdConfig::default()).is_err());
    }
}
