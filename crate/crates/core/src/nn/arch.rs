//! Reference architectures and seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{Layer, LayerKind, Model};

/// Uniform in ±sqrt(6 / (fan_in + fan_out)); biases start at zero.
fn init_layer(
    kind: LayerKind,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Layer> {
    let (ws, bs) = kind
        .parameter_shapes()
        .expect("init_layer called on a parameter-free layer");
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let w = Tensor::from_fn(&ws, |_| rng.gen_range(-limit..limit))?;
    Layer::with_parameters(kind, w, Tensor::zeros(&bs))
}

/// Fully connected ReLU network, e.g. `mlp(&[784, 128, 10], seed)`.
pub fn mlp(widths: &[usize], seed: u64) -> Result<Model> {
    if widths.len() < 2 {
        return Err(Error::InvalidConfig(
            "an MLP needs at least input and output widths".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let kind = LayerKind::Dense {
            in_features: pair[0],
            out_features: pair[1],
        };
        layers.push(init_layer(kind, pair[0], pair[1], &mut rng)?);
        if i + 2 < widths.len() {
            layers.push(Layer::stateless(LayerKind::Relu)?);
        }
    }
    let name = format!(
        "mlp-{}",
        widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("-")
    );
    Model::new(name, vec![widths[0]], *widths.last().unwrap(), layers)
}

fn conv(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Layer> {
    init_layer(
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: 0,
        },
        cin * k * k,
        cout * k * k,
        rng,
    )
}

/// conv 1→8 5×5, pool 2, conv 8→16 5×5, pool 2, dense 256→10 on 28×28 input.
pub fn reference_cnn(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(1, 8, 5, &mut rng)?,
        Layer::stateless(LayerKind::Relu)?,
        Layer::stateless(LayerKind::MaxPool2d { size: 2 })?,
        conv(8, 16, 5, &mut rng)?,
        Layer::stateless(LayerKind::Relu)?,
        Layer::stateless(LayerKind::MaxPool2d { size: 2 })?,
        Layer::stateless(LayerKind::Flatten)?,
        init_layer(
            LayerKind::Dense {
                in_features: 256,
                out_features: 10,
            },
            256,
            10,
            &mut rng,
        )?,
    ];
    Model::new("cnn-mnist", vec![1, 28, 28], 10, layers)
}

/// A 6×6 single-channel toy CNN used by gradient checks.
#[cfg(test)]
pub(crate) fn tiny_cnn(seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        init_layer(
            LayerKind::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: 1,
            },
            9,
            18,
            &mut rng,
        )?,
        Layer::stateless(LayerKind::Relu)?,
        Layer::stateless(LayerKind::MaxPool2d { size: 2 })?,
        Layer::stateless(LayerKind::Flatten)?,
        init_layer(
            LayerKind::Dense {
                in_features: 18,
                out_features: 3,
            },
            18,
            3,
            &mut rng,
        )?,
    ];
    Model::new("tiny-cnn", vec![1, 6, 6], 3, layers)
}
