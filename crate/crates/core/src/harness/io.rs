//! Dataset readers and the model container format.
//!
//! Model container layout (all integers little-endian):
//!
//! ```text
//! "RFSM" | u32 version (=1) | u32 header length | JSON header | tensor blobs
//! ```
//!
//! The header lists the layers and, in blob order, every stored tensor with
//! its owning layer, role, dtype and shape. Weights and biases are raw
//! binary32 values; masks are one byte (0 or 1) per weight.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dataset, Layer, LayerKind, Model};
use crate::numerics::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"RFSM";
pub const MODEL_VERSION: u32 = 1;

const IDX_UBYTE: u8 = 0x08;

/// Raw contents of an IDX file holding unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(kind: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        kind,
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    const KIND: &str = "IDX file";
    if bytes.len() < 4 {
        return Err(format_err(KIND, bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(
            KIND,
            0,
            format!("bad magic {:02x?}", &bytes[..4]),
        ));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(format_err(
            KIND,
            2,
            format!("unsupported element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(format_err(KIND, 3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(KIND, bytes.len(), "truncated dimension table"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != expected {
        return Err(format_err(
            KIND,
            header + body.len().min(expected),
            format!(
                "dims {dims:?} need {expected} data bytes, found {}",
                body.len()
            ),
        ));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

/// Reads a file, transparently inflating `.gz` files.
fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_bytes(path)?)
}

/// Builds a dataset from an IDX image array (`n × rows × cols`) and an IDX
/// label array (`n`). Pixels are scaled to `[0, 1]`.
pub fn idx_dataset(images: IdxArray, labels: IdxArray, classes: usize) -> Result<Dataset> {
    if images.dims.len() != 3 {
        return Err(Error::InvalidShape(format!(
            "image file has dims {:?}, expected 3",
            images.dims
        )));
    }
    if labels.dims.len() != 1 {
        return Err(Error::InvalidShape(format!(
            "label file has dims {:?}, expected 1",
            labels.dims
        )));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let pixels = images.data.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, h, w], pixels)?, labels.data, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    pub dir: PathBuf,
    #[serde(default)]
    pub split: Split,
    /// Keep only the first `limit` samples.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl DatasetSpec {
    pub fn mnist(dir: impl Into<PathBuf>, split: Split) -> Self {
        DatasetSpec {
            format: DatasetFormat::Mnist,
            dir: dir.into(),
            split,
            limit: None,
        }
    }
}

fn find_file(dir: &Path, names: &[String]) -> Result<PathBuf> {
    names
        .iter()
        .flat_map(|n| [dir.join(n), dir.join(format!("{n}.gz"))])
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::io(
                dir.join(&names[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
            )
        })
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let names = |what: &str, n: u8| {
        vec![
            format!("{prefix}-{what}-idx{n}-ubyte"),
            format!("{prefix}-{what}.idx{n}-ubyte"),
        ]
    };
    let images = read_idx(&find_file(dir, &names("images", 3))?)?;
    let labels = read_idx(&find_file(dir, &names("labels", 1))?)?;
    idx_dataset(images, labels, 10)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses concatenated CIFAR-10 binary records (label byte + 3072 pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err(
            "CIFAR-10 batch",
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut bytes = Vec::new();
    for f in files {
        let path = dir.join(f);
        bytes.extend(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    parse_cifar10(&bytes)
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let data = match spec.format {
        DatasetFormat::Mnist => load_mnist(&spec.dir, spec.split)?,
        DatasetFormat::Cifar10 => load_cifar10(&spec.dir, spec.split)?,
    };
    match spec.limit {
        Some(n) => data.head(n),
        None => Ok(data),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Weights,
    Bias,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    role: Role,
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerKind>,
    tensors: Vec<TensorEntry>,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let parts = [
            (Role::Weights, layer.weights()),
            (Role::Bias, layer.bias()),
            (Role::Mask, layer.mask()),
        ];
        for (role, t) in parts {
            let Some(t) = t else { continue };
            let dtype = if role == Role::Mask {
                Dtype::U8
            } else {
                Dtype::F32
            };
            tensors.push(TensorEntry {
                layer: i,
                role,
                dtype,
                shape: t.shape().to_vec(),
            });
            match dtype {
                Dtype::F32 => t.data().iter().for_each(|v| blobs.extend(v.to_le_bytes())),
                Dtype::U8 => blobs.extend(t.data().iter().map(|&v| (v != 0.0) as u8)),
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        classes: model.classes,
        layers: model.layers.iter().map(|l| l.kind.clone()).collect(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + blobs.len());
    out.extend(MODEL_MAGIC);
    out.extend(MODEL_VERSION.to_le_bytes());
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(header);
    out.extend(blobs);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    const KIND: &str = "model file";
    if bytes.len() < 12 {
        return Err(format_err(KIND, bytes.len(), "truncated preamble"));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(format_err(
            KIND,
            0,
            format!("bad magic {:02x?}", &bytes[..4]),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(format_err(
            KIND,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start {
        return Err(format_err(KIND, bytes.len(), "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| format_err(KIND, 12, format!("bad header: {e}")))?;

    let mut params: Vec<[Option<Tensor>; 3]> =
        header.layers.iter().map(|_| [None, None, None]).collect();
    let mut offset = body_start;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let size = n * entry.dtype.size();
        if bytes.len() < offset + size {
            return Err(format_err(
                KIND,
                bytes.len(),
                format!("truncated {:?} blob of layer {}", entry.role, entry.layer),
            ));
        }
        let blob = &bytes[offset..offset + size];
        let expected = matches!(
            (entry.role, entry.dtype),
            (Role::Mask, Dtype::U8) | (Role::Weights | Role::Bias, Dtype::F32)
        );
        if !expected || entry.layer >= params.len() {
            return Err(format_err(
                KIND,
                offset,
                format!("unexpected tensor entry {entry:?}"),
            ));
        }
        let data: Vec<f32> = match entry.dtype {
            Dtype::F32 => blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::U8 => blob.iter().map(|&b| b as f32).collect(),
        };
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| format_err(KIND, offset, e.to_string()))?;
        params[entry.layer][entry.role as usize] = Some(t);
        offset += size;
    }
    if offset != bytes.len() {
        return Err(format_err(KIND, offset, "trailing bytes after last tensor"));
    }

    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, (kind, [w, b, m])) in header.layers.into_iter().zip(params).enumerate() {
        let layer = match (w, b) {
            (Some(w), Some(b)) => {
                let l = Layer::with_parameters(kind, w, b).map_err(|e| e.at_layer(i))?;
                match m {
                    Some(m) => l.with_mask(m).map_err(|e| e.at_layer(i))?,
                    None => l,
                }
            }
            (None, None) if m.is_none() => Layer::stateless(kind).map_err(|e| e.at_layer(i))?,
            _ => {
                return Err(format_err(
                    KIND,
                    12,
                    format!("layer {i} has an incomplete tensor set"),
                ))
            }
        };
        layers.push(layer);
    }
    Model::new(header.name, header.input_shape, header.classes, layers)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
