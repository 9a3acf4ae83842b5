//! Small from-scratch inference and training engine.
//!
//! Weight layouts:
//! - `Dense`: `(in_features × out_features)`, so a forward pass is `x · W + b`.
//! - `Conv2d`: `(out_channels × in_channels × kh × kw)`, evaluated through
//!   im2col and the same matrix product as dense layers.

pub mod arch;
mod ops;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

pub use train::{loss_and_gradients, train_sgd, Gradients, TrainConfig};

/// Layer kind plus its kind-specific hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping pooling: window and stride are both `size`.
    MaxPool2d {
        size: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Expected weight and bias shapes, for kinds that carry parameters.
    pub fn parameter_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![in_features, out_features], vec![out_features])),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel_h, kernel_w],
                vec![out_channels],
            )),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    weights: Option<Tensor>,
    bias: Option<Tensor>,
    mask: Option<Tensor>,
}

impl Layer {
    /// A parameter-free layer (ReLU, pooling, flatten).
    pub fn stateless(kind: LayerKind) -> Result<Self> {
        if kind.parameter_shapes().is_some() {
            return Err(Error::InvalidConfig(format!(
                "{} layer needs weights",
                kind.name()
            )));
        }
        Ok(Layer {
            kind,
            weights: None,
            bias: None,
            mask: None,
        })
    }

    pub fn with_parameters(kind: LayerKind, weights: Tensor, bias: Tensor) -> Result<Self> {
        let (ws, bs) = kind.parameter_shapes().ok_or_else(|| {
            Error::InvalidConfig(format!("{} layer takes no weights", kind.name()))
        })?;
        check_shape("weights", &ws, weights.shape())?;
        check_shape("bias", &bs, bias.shape())?;
        Ok(Layer {
            kind,
            weights: Some(weights),
            bias: Some(bias),
            mask: None,
        })
    }

    pub fn weights(&self) -> Option<&Tensor> {
        self.weights.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn has_weights(&self) -> bool {
        self.weights.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.as_ref().map_or(0, Tensor::len)
    }

    /// Attaches a 0/1 pruning mask and zeroes the masked weights.
    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        let w = self.weights.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("{} layer has no weights to mask", self.kind.name()))
        })?;
        check_shape("mask", w.shape(), mask.shape())?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        self.weights = Some(w.mul(&mask)?);
        self.mask = Some(mask);
        Ok(self)
    }

    /// Replaces the weights, keeping the mask invariant (masked positions must
    /// be zero in `weights`).
    pub fn with_weights(mut self, weights: Tensor) -> Result<Self> {
        let current = self.weights.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("{} layer has no weights", self.kind.name()))
        })?;
        check_shape("weights", current.shape(), weights.shape())?;
        if let Some(mask) = &self.mask {
            let violated = mask
                .data()
                .iter()
                .zip(weights.data())
                .any(|(&m, &w)| m == 0.0 && w != 0.0);
            if violated {
                return Err(Error::InvalidConfig(
                    "non-zero weight at a pruned position".into(),
                ));
            }
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Replaces the weights with hardware-effective values and drops the mask,
    /// since faults may make pruned positions non-zero.
    pub fn with_effective_weights(mut self, weights: Tensor) -> Result<Self> {
        self.mask = None;
        self.with_weights(weights)
    }

    /// Weights as the 2-D matrix placed on crossbars: dense layers as stored,
    /// conv layers as `(C·kh·kw) × O`.
    pub fn weight_matrix(&self) -> Option<Result<Tensor>> {
        let w = self.weights.as_ref()?;
        Some(match self.kind {
            LayerKind::Conv2d { .. } => ops::conv_weight_matrix(w),
            _ => Ok(w.clone()),
        })
    }

    /// Inverse of [`Layer::weight_matrix`], installing hardware-effective
    /// weights (the mask is dropped, as for [`Layer::with_effective_weights`]).
    pub fn with_effective_weight_matrix(self, m: Tensor) -> Result<Self> {
        let shape = match &self.weights {
            Some(w) => w.shape().to_vec(),
            None => {
                return Err(Error::InvalidConfig(format!(
                    "{} layer has no weights",
                    self.kind.name()
                )))
            }
        };
        let w = match self.kind {
            LayerKind::Conv2d { .. } => ops::conv_weight_from_matrix(&m, &shape)?,
            _ => m,
        };
        self.with_effective_weights(w)
    }

    pub(crate) fn set_parameters_unchecked(&mut self, weights: Tensor, bias: Tensor) {
        self.weights = Some(weights);
        self.bias = Some(bias);
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                let (n, f) = x.dims2()?;
                if f != in_features {
                    return Err(Error::ShapeMismatch {
                        op: "dense",
                        left: x.shape().to_vec(),
                        right: vec![in_features, out_features],
                    });
                }
                let w = self.weights.as_ref().expect("dense layer has weights");
                let b = self.bias.as_ref().expect("dense layer has bias");
                let mut y = numerics::gemm_nn(x.data(), w.data(), n, in_features, out_features);
                add_row_bias(&mut y, b.data());
                Tensor::new(vec![n, out_features], y)
            }
            LayerKind::Conv2d { .. } => ops::conv2d_forward(self, x).map(|(y, _)| y),
            LayerKind::Relu => Ok(x.relu()),
            LayerKind::MaxPool2d { size } => ops::maxpool_forward(x, size),
            LayerKind::Flatten => {
                let n = x.shape()[0];
                x.reshape(&[n, x.len() / n])
            }
        }
    }
}

fn check_shape(what: &str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidShape(format!(
            "{what} shape {got:?} does not match expected {expected:?}"
        )));
    }
    Ok(())
}

pub(crate) fn add_row_bias(y: &mut [f32], bias: &[f32]) {
    for row in y.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    /// Per-sample input shape, e.g. `[784]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Builds a model and checks that a forward pass on the declared input
    /// shape goes through.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let model = Model {
            name: name.into(),
            input_shape,
            classes,
            layers,
        };
        let mut probe_shape = vec![1];
        probe_shape.extend(&model.input_shape);
        let out = forward(&model, &Tensor::zeros(&probe_shape))?;
        if out.shape() != [1, classes] {
            return Err(Error::InvalidShape(format!(
                "model produces {:?} per sample, expected {classes} logits",
                &out.shape()[1..]
            )));
        }
        Ok(model)
    }

    /// Indices of layers that carry weights.
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_weights())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Returns a copy with one layer's weights replaced.
    pub fn replace_layer(&self, index: usize, layer: Layer) -> Result<Model> {
        if index >= self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "layer index {index} out of range"
            )));
        }
        let mut m = self.clone();
        m.layers[index] = layer;
        Ok(m)
    }

    pub fn per_sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Class logits `[batch × classes]` for a batch whose trailing dimensions hold
/// `model.input_shape` elements.
pub fn forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let mut x = shape_batch(model, batch)?;
    for (i, layer) in model.layers.iter().enumerate() {
        x = layer.forward(&x).map_err(|e| e.at_layer(i))?;
    }
    Ok(x)
}

fn shape_batch(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let n = batch.shape()[0];
    let per = model.per_sample_len();
    if batch.ndim() < 2 || batch.len() != n * per {
        let mut expected = vec![n];
        expected.extend(&model.input_shape);
        return Err(Error::ShapeMismatch {
            op: "model input",
            left: batch.shape().to_vec(),
            right: expected,
        });
    }
    if batch.shape()[1..] == model.input_shape[..] {
        return Ok(batch.clone());
    }
    let mut shape = vec![n];
    shape.extend(&model.input_shape);
    batch.reshape(&shape)
}

/// Labelled samples; `images` has the sample index as leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidShape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all of them when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset {
            images: self.images.slice_rows(0, n)?,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        })
    }
}

const EVAL_CHUNK: usize = 1000;

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, c) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Number of correctly classified samples.
pub fn count_correct(model: &Model, data: &Dataset) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = forward(model, &data.images.slice_rows(start, end)?)?;
        correct += argmax_rows(&logits)?
            .into_iter()
            .zip(&data.labels[start..end])
            .filter(|&(p, &l)| p == l as usize)
            .count();
        start = end;
    }
    Ok(correct)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(count_correct(model, data)? as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn dense(w: Tensor, b: Tensor) -> Layer {
        let (i, o) = w.dims2().unwrap();
        Layer::with_parameters(
            LayerKind::Dense {
                in_features: i,
                out_features: o,
            },
            w,
            b,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_yield_bias() {
        let bias = t(&[3], &[0.5, -1.0, 2.0]);
        let m = Model::new(
            "z",
            vec![4],
            3,
            vec![dense(Tensor::zeros(&[4, 3]), bias.clone())],
        )
        .unwrap();
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 9.0, 0.1]);
        let y = forward(&m, &x).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn identity_dense_is_identity() {
        let m = Model::new(
            "id",
            vec![3],
            3,
            vec![dense(Tensor::eye(3), Tensor::zeros(&[3]))],
        )
        .unwrap();
        let x = t(&[2, 3], &[0.1, -0.2, 0.3, 4.0, 5.0, -6.0]);
        assert_eq!(forward(&m, &x).unwrap(), x);
    }

    #[test]
    fn hand_computed_three_four_two() {
        // Oracle worked by hand:
        // h = relu(x·W1 + b1), x = [1, 2, -1]
        //   W1 columns: [1,0,0], [0,1,0], [1,1,1], [-1,0,0]; b1 = [0, 0.5, -1, 0]
        //   pre = [1, 2.5, 1, -1] -> h = [1, 2.5, 1, 0]
        // y = h·W2 + b2, W2 rows [1,0],[0,1],[2,-1],[5,5], b2 = [0.1, -0.1]
        //   y = [1 + 2 + 0.1, 2.5 - 1 - 0.1] = [3.1, 1.4]
        let w1 = t(
            &[3, 4],
            &[1.0, 0.0, 1.0, -1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        );
        let b1 = t(&[4], &[0.0, 0.5, -1.0, 0.0]);
        let w2 = t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, -1.0, 5.0, 5.0]);
        let b2 = t(&[2], &[0.1, -0.1]);
        let m = Model::new(
            "probe",
            vec![3],
            2,
            vec![
                dense(w1, b1),
                Layer::stateless(LayerKind::Relu).unwrap(),
                dense(w2, b2),
            ],
        )
        .unwrap();
        let y = forward(&m, &t(&[1, 3], &[1.0, 2.0, -1.0])).unwrap();
        assert!((y.data()[0] - 3.1).abs() < 1e-6);
        assert!((y.data()[1] - 1.4).abs() < 1e-6);
    }

    #[test]
    fn shape_error_names_layer() {
        let m = Model {
            name: "bad".into(),
            input_shape: vec![4],
            classes: 2,
            layers: vec![
                dense(Tensor::zeros(&[4, 3]), Tensor::zeros(&[3])),
                dense(Tensor::zeros(&[5, 2]), Tensor::zeros(&[2])),
            ],
        };
        let err = forward(&m, &Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, .. }), "{err}");
        assert!(Model::new("bad", m.input_shape.clone(), 2, m.layers.clone()).is_err());
    }

    #[test]
    fn constant_class_zero_on_balanced_set() {
        let mut b = vec![0.0; 10];
        b[0] = 1.0;
        let m = Model::new(
            "c0",
            vec![2],
            10,
            vec![dense(Tensor::zeros(&[2, 10]), t(&[10], &b))],
        )
        .unwrap();
        let labels: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
        let data = Dataset::new(Tensor::zeros(&[100, 2]), labels, 10).unwrap();
        assert_eq!(evaluate_accuracy(&m, &data).unwrap(), 0.1);

        let one = Dataset::new(Tensor::zeros(&[1, 2]), vec![0], 10).unwrap();
        assert_eq!(evaluate_accuracy(&m, &one).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let logits = t(&[2, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(argmax_rows(&logits).unwrap(), vec![0, 1]);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            Dataset::new(Tensor::zeros(&[1, 2]), vec![], 2),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn mask_zeroes_weights_and_guards_replacement() {
        let l = dense(t(&[2, 1], &[3.0, 4.0]), Tensor::zeros(&[1]))
            .with_mask(t(&[2, 1], &[1.0, 0.0]))
            .unwrap();
        assert_eq!(l.weights().unwrap().data(), &[3.0, 0.0]);
        assert!(l.clone().with_weights(t(&[2, 1], &[1.0, 1.0])).is_err());
        let eff = l.with_effective_weights(t(&[2, 1], &[1.0, 1.0])).unwrap();
        assert!(eff.mask().is_none());
    }
}
