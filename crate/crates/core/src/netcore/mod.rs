//! Minimal feed-forward network engine.
//!
//! Supports Conv2D, FC, ReLU, 2x2 max-pool and flatten layers with an
//! explicit learnable/frozen parameter partition. Forward passes are pure
//! functions of the parameter store; gradients are produced for learnable
//! entries only and frozen buffers are never touched by an optimisation
//! step.

mod ops;
mod train;

pub use train::{
    evaluate, forward, loss_and_grad, train_epochs, EpochStats, Grads, SgdOptimizer, TrainConfig,
    TrainStats,
};

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::{tags, Xoshiro256StarStar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter entry {0}")]
    MissingParam(String),
    #[error("gradient key set does not match learnable entries: {0}")]
    KeyMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}

/// Layer descriptor. Conv and FC layers carry the learnable weights; the
/// rest are shape-only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2D {
        c_in: usize,
        c_out: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Fc {
        d_in: usize,
        d_out: usize,
        has_bias: bool,
    },
    Relu,
    MaxPool2,
    Flatten,
}

/// Architecture description: ordered layers over a declared input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Input shape (channels, height, width).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

/// Intermediate activation shape while walking the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape3 {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape3 {
    pub fn len(&self) -> usize {
        match *self {
            Shape3::Chw(c, h, w) => c * h * w,
            Shape3::Flat(d) => d,
        }
    }
}

/// A Conv or FC layer eligible for update compression, with its weight
/// viewed as an o x i matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetedLayer {
    /// Stable 1-based id in network order, counting Conv and FC layers only.
    pub id: u32,
    /// Index into `ModelSpec::layers`.
    pub layer_index: usize,
    pub o: usize,
    pub i: usize,
    pub has_bias: bool,
}

impl ModelSpec {
    /// Reference desk-scale architecture for 28x28 single-channel inputs.
    pub fn tiny_net() -> ModelSpec {
        ModelSpec {
            input: (1, 28, 28),
            num_classes: 10,
            layers: vec![
                Layer::Conv2D {
                    c_in: 1,
                    c_out: 8,
                    k_h: 3,
                    k_w: 3,
                    stride: 1,
                    padding: 1,
                    has_bias: true,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv2D {
                    c_in: 8,
                    c_out: 16,
                    k_h: 3,
                    k_w: 3,
                    stride: 1,
                    padding: 1,
                    has_bias: true,
                },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                Layer::Fc {
                    d_in: 784,
                    d_out: 10,
                    has_bias: true,
                },
            ],
        }
    }

    /// Output shape of every layer for the declared input, validating
    /// conformance along the way.
    pub fn output_shapes(&self) -> Result<Vec<Shape3>, NetError> {
        let (c, h, w) = self.input;
        let mut shape = Shape3::Chw(c, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape) {
                (
                    Layer::Conv2D {
                        c_in,
                        c_out,
                        k_h,
                        k_w,
                        stride,
                        padding,
                        ..
                    },
                    Shape3::Chw(c, h, w),
                ) => {
                    if *c_in != c {
                        return Err(NetError::Shape(format!(
                            "layer {idx}: conv expects {c_in} input channels, got {c}"
                        )));
                    }
                    if *stride == 0 {
                        return Err(NetError::Shape(format!("layer {idx}: stride 0")));
                    }
                    let hp = h + 2 * padding;
                    let wp = w + 2 * padding;
                    if hp < *k_h || wp < *k_w {
                        return Err(NetError::Shape(format!(
                            "layer {idx}: kernel {k_h}x{k_w} larger than padded input {hp}x{wp}"
                        )));
                    }
                    Shape3::Chw(*c_out, (hp - k_h) / stride + 1, (wp - k_w) / stride + 1)
                }
                (Layer::Fc { d_in, d_out, .. }, s) => {
                    if s.len() != *d_in {
                        return Err(NetError::Shape(format!(
                            "layer {idx}: fc expects {d_in} inputs, got {}",
                            s.len()
                        )));
                    }
                    Shape3::Flat(*d_out)
                }
                (Layer::Relu, s) => s,
                (Layer::MaxPool2, Shape3::Chw(c, h, w)) => {
                    if h < 2 || w < 2 {
                        return Err(NetError::Shape(format!(
                            "layer {idx}: max-pool on {h}x{w} input"
                        )));
                    }
                    Shape3::Chw(c, h / 2, w / 2)
                }
                (Layer::MaxPool2, Shape3::Flat(_)) => {
                    return Err(NetError::Shape(format!("layer {idx}: max-pool after flatten")))
                }
                (Layer::Flatten, s) => Shape3::Flat(s.len()),
                (Layer::Conv2D { .. }, Shape3::Flat(_)) => {
                    return Err(NetError::Shape(format!("layer {idx}: conv after flatten")))
                }
            };
            out.push(shape);
        }
        match out.last() {
            Some(s) if s.len() == self.num_classes => Ok(out),
            Some(s) => Err(NetError::Shape(format!(
                "final layer emits {} values, expected {} classes",
                s.len(),
                self.num_classes
            ))),
            None => Err(NetError::Shape("model has no layers".into())),
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.output_shapes().map(|_| ())
    }

    /// Conv and FC layers in network order with their stable ids.
    pub fn targeted(&self) -> Vec<TargetedLayer> {
        let mut out = Vec::new();
        let mut id = 0u32;
        for (layer_index, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv2D {
                    c_in,
                    c_out,
                    k_h,
                    k_w,
                    has_bias,
                    ..
                } => {
                    id += 1;
                    out.push(TargetedLayer {
                        id,
                        layer_index,
                        o: c_out,
                        i: c_in * k_h * k_w,
                        has_bias,
                    });
                }
                Layer::Fc {
                    d_in,
                    d_out,
                    has_bias,
                } => {
                    id += 1;
                    out.push(TargetedLayer {
                        id,
                        layer_index,
                        o: d_out,
                        i: d_in,
                        has_bias,
                    });
                }
                _ => {}
            }
        }
        out
    }

    pub fn weight_name(id: u32) -> String {
        format!("layer{id}.weight")
    }

    pub fn bias_name(id: u32) -> String {
        format!("layer{id}.bias")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Learnable,
    Frozen,
}

/// A named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub class: ParamClass,
    pub data: Vec<f64>,
}

impl ParamEntry {
    pub fn new(shape: Vec<usize>, class: ParamClass, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, class, data }
    }
}

/// The named set of learnable parameters and frozen buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: ParamEntry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&ParamEntry, NetError> {
        self.entries
            .get(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Entries in name order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn learnable_scalar_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.class == ParamClass::Learnable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    /// Canonical byte serialization: entries in name order, each as
    /// (name, class, shape, little-endian f64 values). Fingerprints and
    /// frozen-buffer digests are defined over this encoding.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match entry.class {
                ParamClass::Learnable => 0,
                ParamClass::Frozen => 1,
            });
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(entry.data.len() as u32).to_le_bytes());
            for &v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_bytes());
        digest.into()
    }

    /// SHA-256 over frozen entries only; unchanged across training steps.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, entry) in &self.entries {
            if entry.class == ParamClass::Frozen {
                hasher.update((name.len() as u16).to_le_bytes());
                hasher.update(name.as_bytes());
                for &v in &entry.data {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher.finalize().into()
    }
}

/// A batch of images with class labels. Pixels are expected in [0, 1].
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major (n, c, h, w).
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn image(&self, idx: usize) -> &[f64] {
        let len = self.c * self.h * self.w;
        &self.images[idx * len..(idx + 1) * len]
    }
}

/// Kaiming-uniform initialisation for every Conv/FC layer, seeded.
///
/// Weights draw from U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases from
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), in layer order, weight then bias.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamStore {
    let mut rng = Xoshiro256StarStar::stream(seed, tags::WEIGHT_INIT);
    let mut store = ParamStore::new();
    for t in spec.targeted() {
        let fan_in = t.i as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight: Vec<f64> = (0..t.o * t.i).map(|_| rng.uniform(-bound, bound)).collect();
        let shape = match spec.layers[t.layer_index] {
            Layer::Conv2D {
                c_in,
                c_out,
                k_h,
                k_w,
                ..
            } => vec![c_out, c_in, k_h, k_w],
            Layer::Fc { d_in, d_out, .. } => vec![d_out, d_in],
            _ => unreachable!(),
        };
        store.insert(
            ModelSpec::weight_name(t.id),
            ParamEntry::new(shape, ParamClass::Learnable, weight),
        );
        if t.has_bias {
            let bb = 1.0 / fan_in.sqrt();
            let bias: Vec<f64> = (0..t.o).map(|_| rng.uniform(-bb, bb)).collect();
            store.insert(
                ModelSpec::bias_name(t.id),
                ParamEntry::new(vec![t.o], ParamClass::Learnable, bias),
            );
        }
    }
    store
}

/// Views a Conv/FC weight tensor as an o x i matrix.
///
/// Conv flattening order is (c_in major, then k_h, then k_w), which is
/// exactly the row-major layout of a (c_out, c_in, k_h, k_w) tensor, so the
/// round trip is a bitwise identity.
pub fn weight_to_matrix(entry: &ParamEntry) -> Result<Matrix, NetError> {
    let (o, i) = match entry.shape.as_slice() {
        [c_out, c_in, k_h, k_w] => (*c_out, c_in * k_h * k_w),
        [d_out, d_in] => (*d_out, *d_in),
        other => {
            return Err(NetError::Shape(format!(
                "weight tensor of rank {} is not a conv or fc weight",
                other.len()
            )))
        }
    };
    Matrix::new(o, i, entry.data.clone()).map_err(|e| NetError::Shape(e.to_string()))
}

/// Writes an o x i matrix back into a weight tensor of the given shape.
pub fn matrix_to_weight(m: &Matrix, shape: &[usize]) -> Result<Vec<f64>, NetError> {
    let expect: usize = shape.iter().product();
    let (o, i) = match shape {
        [c_out, c_in, k_h, k_w] => (*c_out, c_in * k_h * k_w),
        [d_out, d_in] => (*d_out, *d_in),
        other => {
            return Err(NetError::Shape(format!(
                "target shape of rank {} is not a conv or fc weight",
                other.len()
            )))
        }
    };
    if m.rows() != o || m.cols() != i || m.data().len() != expect {
        return Err(NetError::Shape(format!(
            "matrix {}x{} does not reshape to {:?}",
            m.rows(),
            m.cols(),
            shape
        )));
    }
    Ok(m.data().to_vec())
}
