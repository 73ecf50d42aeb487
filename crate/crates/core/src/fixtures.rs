//! Small reference networks and random model generators used by tests,
//! benches and the command line.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::layers::{Layer, PoolSpec};
use crate::network::Network;
use crate::tensor::Tensor;

/// Two-layer ReLU network computing `max(x1, x2)` on the positive quadrant:
///
/// `f(x) = max(0, 0.5·max(0, x1−x2) + 0.5·max(0, x2−x1) + 0.5·max(0, x1+x2))`
pub fn max_network() -> Network {
    // in × out: row j holds the weights leaving x_j.
    let hidden = Tensor::new(vec![2, 3], vec![1.0, -1.0, 1.0, -1.0, 1.0, 1.0]).unwrap();
    let top = Tensor::new(vec![3, 1], vec![0.5, 0.5, 0.5]).unwrap();
    Network::new(
        vec![2],
        1,
        vec![
            Layer::dense(hidden, Tensor::zeros(&[3])),
            Layer::ReLU,
            Layer::dense(top, Tensor::zeros(&[1])),
            Layer::ReLU,
        ],
    )
    .unwrap()
}

/// Single-output linear model `f(x) = w·x`.
pub fn linear_model(w: &[f64]) -> Network {
    let weights = Tensor::new(vec![w.len(), 1], w.to_vec()).unwrap();
    Network::new(
        vec![w.len()],
        1,
        vec![Layer::dense(weights, Tensor::zeros(&[1]))],
    )
    .unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasMode {
    Zero,
    NonPositive,
    Any,
}

fn draw_bias<R: Rng + ?Sized>(rng: &mut R, n: usize, mode: BiasMode) -> Tensor {
    let data = (0..n)
        .map(|_| match mode {
            BiasMode::Zero => 0.0,
            BiasMode::NonPositive => -rng.random_range(0.0..0.5),
            BiasMode::Any => rng.random_range(-0.5..0.5),
        })
        .collect();
    Tensor::new(vec![n], data).unwrap()
}

fn draw_weights<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// Dense ReLU network with the given unit counts (`widths[0]` inputs,
/// `widths.last()` logits). Hidden layers are followed by ReLU; the logit
/// layer is linear.
pub fn random_mlp<R: Rng + ?Sized>(rng: &mut R, widths: &[usize], bias: BiasMode) -> Network {
    assert!(widths.len() >= 2);
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let (n_in, n_out) = (pair[0], pair[1]);
        layers.push(Layer::dense(
            draw_weights(rng, &[n_in, n_out], n_in),
            draw_bias(rng, n_out, bias),
        ));
        if i + 2 < widths.len() {
            layers.push(Layer::ReLU);
        }
    }
    Network::new(vec![widths[0]], *widths.last().unwrap(), layers).unwrap()
}

/// A small convolutional network `Conv → ReLU → pool → Flatten → Dense`.
pub fn random_conv_net<R: Rng + ?Sized>(
    rng: &mut R,
    input: [usize; 3],
    channels: usize,
    kernel: usize,
    pool: Layer,
    classes: usize,
    bias: BiasMode,
) -> Network {
    let [c, h, w] = input;
    let conv = Layer::conv2d(
        draw_weights(rng, &[channels, c, kernel, kernel], c * kernel * kernel),
        draw_bias(rng, channels, bias),
        1,
        0,
    );
    let conv_shape = conv.output_shape(&input, 0).unwrap();
    let pooled = pool.output_shape(&conv_shape, 1).unwrap();
    let flat: usize = pooled.iter().product();
    let net = Network::new(
        vec![c, h, w],
        classes,
        vec![
            conv,
            Layer::ReLU,
            pool,
            Layer::Flatten,
            Layer::dense(
                draw_weights(rng, &[flat, classes], flat),
                draw_bias(rng, classes, bias),
            ),
        ],
    );
    net.unwrap()
}

/// Default pool for [`random_conv_net`].
pub fn sum_pool2() -> Layer {
    Layer::SumPool(PoolSpec::square(2))
}

/// Two Gaussian blobs in the plane, centred at `(-2, -2)` (class 0) and
/// `(2, 2)` (class 1).
pub fn two_blobs<R: Rng + ?Sized>(rng: &mut R, per_class: usize) -> Vec<(Tensor, usize)> {
    let normal = Normal::new(0.0, 0.7).unwrap();
    let mut data = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = i % 2;
        let centre = if label == 0 { -2.0 } else { 2.0 };
        let x = vec![centre + normal.sample(rng), centre + normal.sample(rng)];
        data.push((Tensor::from_vec(x), label));
    }
    data
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}
