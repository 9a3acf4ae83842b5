// Backpropagation and minibatch SGD with momentum.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

use super::{ops, shape_batch, Dataset, LayerKind, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep pruned weights at exactly zero.
    pub respect_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            respect_mask: false,
        }
    }
}

/// Per-layer `(d_weights, d_bias)`; `None` for parameter-free layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<(Tensor, Tensor)>>,
}

enum Cache {
    Plain,
    Conv(Vec<f32>),
}

/// Mean softmax cross-entropy over the batch and its gradients.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Tensor,
    labels: &[u8],
) -> Result<(f64, Gradients)> {
    let x0 = shape_batch(model, batch)?;
    let n = x0.shape()[0];
    if labels.len() != n {
        return Err(Error::InvalidShape(format!(
            "{n} samples but {} labels",
            labels.len()
        )));
    }

    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut caches = Vec::with_capacity(model.layers.len());
    let mut x = x0;
    for (i, layer) in model.layers.iter().enumerate() {
        let (y, cache) = match layer.kind {
            LayerKind::Conv2d { .. } => {
                let (y, cols) = ops::conv2d_forward(layer, &x).map_err(|e| e.at_layer(i))?;
                (y, Cache::Conv(cols))
            }
            _ => (layer.forward(&x).map_err(|e| e.at_layer(i))?, Cache::Plain),
        };
        inputs.push(x);
        caches.push(cache);
        x = y;
    }

    let (loss, mut grad) = softmax_cross_entropy(&x, labels)?;

    let mut grads: Vec<Option<(Tensor, Tensor)>> = vec![None; model.layers.len()];
    for i in (0..model.layers.len()).rev() {
        let layer = &model.layers[i];
        let input = &inputs[i];
        let need_dx = i > 0;
        let mut step = || -> Result<Option<Tensor>> {
            Ok(match layer.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    let w = layer.weights().expect("dense weights");
                    let dw =
                        numerics::gemm_tn(input.data(), grad.data(), n, in_features, out_features);
                    let mut db = vec![0.0f64; out_features];
                    for row in grad.data().chunks(out_features) {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s += v as f64;
                        }
                    }
                    grads[i] = Some((
                        Tensor::new(vec![in_features, out_features], dw)?,
                        Tensor::new(
                            vec![out_features],
                            db.into_iter().map(|v| v as f32).collect(),
                        )?,
                    ));
                    if need_dx {
                        let dx =
                            numerics::gemm_nt(grad.data(), w.data(), n, out_features, in_features);
                        Some(Tensor::new(vec![n, in_features], dx)?)
                    } else {
                        None
                    }
                }
                LayerKind::Conv2d { .. } => {
                    let Cache::Conv(cols) = &caches[i] else {
                        unreachable!()
                    };
                    let (dx, dw, db) = ops::conv2d_backward(layer, input, cols, &grad, need_dx)?;
                    grads[i] = Some((dw, db));
                    dx
                }
                LayerKind::Relu => {
                    let dx: Vec<f32> = input
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                        .collect();
                    Some(Tensor::new(input.shape().to_vec(), dx)?)
                }
                LayerKind::MaxPool2d { size } => Some(ops::maxpool_backward(input, size, &grad)?),
                LayerKind::Flatten => Some(grad.reshape(input.shape())?),
            })
        };
        let dx = step().map_err(|e| e.at_layer(i))?;
        match dx {
            Some(d) => grad = d,
            None => break,
        }
    }
    Ok((loss, Gradients { layers: grads }))
}

fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2()?;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; n * c];
    for (i, row) in logits.data().chunks(c).enumerate() {
        let label = labels[i] as usize;
        if label >= c {
            return Err(Error::InvalidConfig(format!(
                "label {label} outside {c} classes"
            )));
        }
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        loss += z.ln() + max - row[label] as f64;
        for (j, &v) in row.iter().enumerate() {
            let p = (v as f64 - max).exp() / z;
            let target = if j == label { 1.0 } else { 0.0 };
            grad[i * c + j] = ((p - target) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, c], grad)?))
}

/// Minibatch SGD with (heavy-ball) momentum: `v ← μv + g; w ← w − lr·v`.
///
/// Bit-reproducible for a fixed seed: the shuffle comes from a seeded ChaCha8
/// stream and all arithmetic is single-threaded.
pub fn train_sgd(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::OutOfRange {
            what: "learning rate",
            value: cfg.lr as f64,
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok(model);
    }

    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = model
        .layers
        .iter()
        .map(|l| {
            l.weights()
                .zip(l.bias())
                .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.images.select_rows(chunk)?;
            let labels: Vec<u8> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads) = match loss_and_gradients(&model, &batch, &labels) {
                Ok(r) => r,
                Err(e) if e.is_non_finite() => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            for (layer, (g, v)) in model
                .layers
                .iter_mut()
                .zip(grads.layers.into_iter().zip(velocity.iter_mut()))
            {
                let (Some((gw, gb)), Some((vw, vb))) = (g, v.as_mut()) else {
                    continue;
                };
                let mask = if cfg.respect_mask {
                    layer.mask().map(|m| m.data().to_vec())
                } else {
                    None
                };
                let w = sgd_update(layer.weights().unwrap(), &gw, vw, cfg, mask.as_deref());
                let b = sgd_update(layer.bias().unwrap(), &gb, vb, cfg, None);
                match (w, b) {
                    (Ok(w), Ok(b)) => layer.set_parameters_unchecked(w, b),
                    _ => return Err(Error::Divergence { epoch, step, loss }),
                }
            }
            step += 1;
        }
    }
    Ok(model)
}

fn sgd_update(
    param: &Tensor,
    grad: &Tensor,
    velocity: &mut [f32],
    cfg: &TrainConfig,
    mask: Option<&[f32]>,
) -> Result<Tensor> {
    let mut p = param.data().to_vec();
    for (i, ((w, &g), v)) in p
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.iter_mut())
        .enumerate()
    {
        if mask.is_some_and(|m| m[i] == 0.0) {
            *v = 0.0;
            *w = 0.0;
            continue;
        }
        *v = cfg.momentum * *v + g;
        *w -= cfg.lr * *v;
    }
    Tensor::new(param.shape().to_vec(), p)
}
