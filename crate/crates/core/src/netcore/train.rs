//! Batch drivers: forward, loss/gradient, momentum SGD, evaluation.
//!
//! Batches are processed in fixed-size shards. Shards may run on worker
//! threads, but every shard is reduced in index order, so results are
//! bit-identical regardless of thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::ops;
use super::{Batch, Layer, ModelSpec, NetError, ParamClass, ParamStore, Shape3};
use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::rng::{tags, Xoshiro256StarStar};

/// Gradients keyed like the learnable entries they belong to.
pub type Grads = BTreeMap<String, Vec<f64>>;

const SHARD: usize = 8;

struct LayerParams<'a> {
    weight: Option<&'a [f64]>,
    bias: Option<&'a [f64]>,
    id: u32,
}

fn collect_layer_params<'a>(
    spec: &ModelSpec,
    params: &'a ParamStore,
) -> Result<Vec<LayerParams<'a>>, NetError> {
    let mut out = Vec::with_capacity(spec.layers.len());
    let mut id = 0u32;
    for layer in &spec.layers {
        match layer {
            Layer::Conv2D {
                c_in,
                c_out,
                k_h,
                k_w,
                has_bias,
                ..
            } => {
                id += 1;
                let w = params.require(&ModelSpec::weight_name(id))?;
                if w.data.len() != c_out * c_in * k_h * k_w {
                    return Err(NetError::Shape(format!(
                        "layer {id}: weight has {} values, expected {}",
                        w.data.len(),
                        c_out * c_in * k_h * k_w
                    )));
                }
                let bias = if *has_bias {
                    let b = params.require(&ModelSpec::bias_name(id))?;
                    if b.data.len() != *c_out {
                        return Err(NetError::Shape(format!("layer {id}: bias length")));
                    }
                    Some(b.data.as_slice())
                } else {
                    None
                };
                out.push(LayerParams {
                    weight: Some(&w.data),
                    bias,
                    id,
                });
            }
            Layer::Fc { d_in, d_out, has_bias } => {
                id += 1;
                let w = params.require(&ModelSpec::weight_name(id))?;
                if w.data.len() != d_in * d_out {
                    return Err(NetError::Shape(format!("layer {id}: fc weight length")));
                }
                let bias = if *has_bias {
                    let b = params.require(&ModelSpec::bias_name(id))?;
                    if b.data.len() != *d_out {
                        return Err(NetError::Shape(format!("layer {id}: bias length")));
                    }
                    Some(b.data.as_slice())
                } else {
                    None
                };
                out.push(LayerParams {
                    weight: Some(&w.data),
                    bias,
                    id,
                });
            }
            _ => out.push(LayerParams {
                weight: None,
                bias: None,
                id: 0,
            }),
        }
    }
    Ok(out)
}

struct Trace {
    /// acts[k] is the input of layer k; acts.last() is the logits.
    acts: Vec<Vec<f64>>,
    /// Argmax cache per layer (empty unless max-pool).
    pools: Vec<Vec<usize>>,
}

fn forward_sample(
    spec: &ModelSpec,
    layers: &[LayerParams<'_>],
    shapes: &[Shape3],
    x: &[f64],
) -> Trace {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(x.to_vec());
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(spec.layers.len());
    for (k, layer) in spec.layers.iter().enumerate() {
        let in_shape = if k == 0 {
            Shape3::Chw(spec.input.0, spec.input.1, spec.input.2)
        } else {
            shapes[k - 1]
        };
        let mut out = Vec::new();
        let mut pool = Vec::new();
        {
            let input = acts.last().expect("nonempty");
            match (layer, in_shape) {
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
                    Shape3::Chw(_, h, w),
                ) => {
                    ops::conv_forward(
                        input,
                        *c_in,
                        h,
                        w,
                        layers[k].weight.expect("conv weight"),
                        layers[k].bias,
                        *c_out,
                        *k_h,
                        *k_w,
                        *stride,
                        *padding,
                        &mut out,
                    );
                }
                (Layer::Fc { d_out, .. }, _) => {
                    ops::fc_forward(
                        input,
                        layers[k].weight.expect("fc weight"),
                        layers[k].bias,
                        *d_out,
                        &mut out,
                    );
                }
                (Layer::Relu, _) => ops::relu_forward(input, &mut out),
                (Layer::MaxPool2, Shape3::Chw(c, h, w)) => {
                    ops::maxpool2_forward(input, c, h, w, &mut out, &mut pool)
                }
                (Layer::Flatten, _) => out.extend_from_slice(input),
                (Layer::MaxPool2 | Layer::Conv2D { .. }, Shape3::Flat(_)) => {
                    unreachable!("validated spec")
                }
            }
        }
        acts.push(out);
        pools.push(pool);
    }
    Trace { acts, pools }
}

fn backward_sample(
    spec: &ModelSpec,
    layers: &[LayerParams<'_>],
    shapes: &[Shape3],
    trace: &Trace,
    g_logits: Vec<f64>,
    grads: &mut BTreeMap<String, Vec<f64>>,
) {
    let mut g_out = g_logits;
    let mut g_in: Vec<f64> = Vec::new();
    for (k, layer) in spec.layers.iter().enumerate().rev() {
        let in_shape = if k == 0 {
            Shape3::Chw(spec.input.0, spec.input.1, spec.input.2)
        } else {
            shapes[k - 1]
        };
        let input = &trace.acts[k];
        match (layer, in_shape) {
            (
                Layer::Conv2D {
                    c_in,
                    c_out,
                    k_h,
                    k_w,
                    stride,
                    padding,
                    has_bias,
                },
                Shape3::Chw(_, h, w),
            ) => {
                let id = layers[k].id;
                let g_w = grads
                    .get_mut(&ModelSpec::weight_name(id))
                    .expect("weight grad buffer");
                // Split borrow: take bias buffer separately afterwards.
                let mut g_w_taken = std::mem::take(g_w);
                let g_b = if *has_bias {
                    Some(
                        grads
                            .get_mut(&ModelSpec::bias_name(id))
                            .expect("bias grad buffer"),
                    )
                } else {
                    None
                };
                ops::conv_backward(
                    &g_out,
                    input,
                    *c_in,
                    h,
                    w,
                    layers[k].weight.expect("conv weight"),
                    *c_out,
                    *k_h,
                    *k_w,
                    *stride,
                    *padding,
                    &mut g_in,
                    &mut g_w_taken,
                    g_b.map(|v| v.as_mut_slice()),
                );
                *grads.get_mut(&ModelSpec::weight_name(id)).unwrap() = g_w_taken;
            }
            (Layer::Fc { has_bias, .. }, _) => {
                let id = layers[k].id;
                let g_w = grads
                    .get_mut(&ModelSpec::weight_name(id))
                    .expect("weight grad buffer");
                let mut g_w_taken = std::mem::take(g_w);
                let g_b = if *has_bias {
                    Some(
                        grads
                            .get_mut(&ModelSpec::bias_name(id))
                            .expect("bias grad buffer"),
                    )
                } else {
                    None
                };
                ops::fc_backward(
                    &g_out,
                    input,
                    layers[k].weight.expect("fc weight"),
                    &mut g_in,
                    &mut g_w_taken,
                    g_b.map(|v| v.as_mut_slice()),
                );
                *grads.get_mut(&ModelSpec::weight_name(id)).unwrap() = g_w_taken;
            }
            (Layer::Relu, _) => ops::relu_backward(&g_out, input, &mut g_in),
            (Layer::MaxPool2, Shape3::Chw(..)) => {
                ops::maxpool2_backward(&g_out, &trace.pools[k], input.len(), &mut g_in)
            }
            (Layer::Flatten, _) => {
                g_in.clear();
                g_in.extend_from_slice(&g_out);
            }
            (Layer::MaxPool2 | Layer::Conv2D { .. }, Shape3::Flat(_)) => {
                unreachable!("validated spec")
            }
        }
        std::mem::swap(&mut g_out, &mut g_in);
        if k == 0 {
            break;
        }
    }
}

fn zero_grads(spec: &ModelSpec, params: &ParamStore) -> Grads {
    let mut grads = Grads::new();
    for t in spec.targeted() {
        let name = ModelSpec::weight_name(t.id);
        let len = params.get(&name).map(|e| e.data.len()).unwrap_or(t.o * t.i);
        grads.insert(name, vec![0.0; len]);
        if t.has_bias {
            grads.insert(ModelSpec::bias_name(t.id), vec![0.0; t.o]);
        }
    }
    grads
}

/// Forward pass over a batch. Returns logits of shape (n, classes).
pub fn forward(spec: &ModelSpec, params: &ParamStore, batch: &Batch) -> Result<Matrix, NetError> {
    let shapes = spec.output_shapes()?;
    let layers = collect_layer_params(spec, params)?;
    let classes = spec.num_classes;
    let sample_indices: Vec<usize> = (0..batch.n).collect();
    let rows: Vec<Vec<f64>> = sample_indices
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len() * classes);
            for &s in chunk {
                let trace = forward_sample(spec, &layers, &shapes, batch.image(s));
                out.extend_from_slice(trace.acts.last().expect("logits"));
            }
            out
        })
        .collect();
    let mut data = Vec::with_capacity(batch.n * classes);
    for r in rows {
        data.extend_from_slice(&r);
    }
    Matrix::new(batch.n, classes, data).map_err(|e| NetError::Shape(e.to_string()))
}

/// Mean softmax cross-entropy and its gradients for every learnable entry.
/// Frozen buffers receive no gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamStore,
    batch: &Batch,
) -> Result<(f64, Grads), NetError> {
    if batch.n == 0 {
        return Err(NetError::EmptyDataset);
    }
    let shapes = spec.output_shapes()?;
    let layers = collect_layer_params(spec, params)?;
    let scale = 1.0 / batch.n as f64;
    let sample_indices: Vec<usize> = (0..batch.n).collect();
    let shards: Vec<(f64, Grads)> = sample_indices
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut grads = zero_grads(spec, params);
            let mut loss = 0.0;
            let mut g_logits = Vec::new();
            for &s in chunk {
                let trace = forward_sample(spec, &layers, &shapes, batch.image(s));
                let logits = trace.acts.last().expect("logits");
                loss += ops::softmax_ce(logits, batch.labels[s], scale, &mut g_logits);
                backward_sample(spec, &layers, &shapes, &trace, g_logits.clone(), &mut grads);
            }
            (loss, grads)
        })
        .collect();
    let mut total_loss = 0.0;
    let mut grads = zero_grads(spec, params);
    for (l, g) in shards {
        total_loss += l;
        for (name, buf) in g {
            let acc = grads.get_mut(&name).expect("identical grad keys");
            for (a, b) in acc.iter_mut().zip(buf.iter()) {
                *a += b;
            }
        }
    }
    // Gradients only for learnable entries.
    grads.retain(|name, _| {
        params
            .get(name)
            .map(|e| e.class == ParamClass::Learnable)
            .unwrap_or(false)
    });
    Ok((total_loss * scale, grads))
}

/// Momentum SGD. Velocity persists across steps:
/// `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one step. Gradient keys must match the learnable entries of
    /// `params` exactly; frozen buffers are untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<(), NetError> {
        let learnable: Vec<String> = params
            .iter()
            .filter(|(_, e)| e.class == ParamClass::Learnable)
            .map(|(n, _)| n.clone())
            .collect();
        if learnable.len() != grads.len() {
            let missing = learnable
                .iter()
                .find(|n| !grads.contains_key(*n))
                .cloned()
                .or_else(|| grads.keys().find(|k| !learnable.contains(k)).cloned())
                .unwrap_or_default();
            return Err(NetError::KeyMismatch(missing));
        }
        for name in &learnable {
            let g = grads
                .get(name)
                .ok_or_else(|| NetError::KeyMismatch(name.clone()))?;
            let entry = params.get_mut(name).expect("listed above");
            if g.len() != entry.data.len() {
                return Err(NetError::KeyMismatch(format!(
                    "{name}: gradient length {} vs parameter length {}",
                    g.len(),
                    entry.data.len()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((p, vi), gi) in entry.data.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Fraction of argmax-correct predictions. Ties take the lowest class index.
pub fn evaluate(spec: &ModelSpec, params: &ParamStore, data: &Dataset) -> Result<f64, NetError> {
    if data.n == 0 {
        return Err(NetError::EmptyDataset);
    }
    let shapes = spec.output_shapes()?;
    let layers = collect_layer_params(spec, params)?;
    let sample_indices: Vec<usize> = (0..data.n).collect();
    let correct: usize = sample_indices
        .par_chunks(64)
        .map(|chunk| {
            let mut ok = 0usize;
            for &s in chunk {
                let trace = forward_sample(spec, &layers, &shapes, data.image(s));
                let logits = trace.acts.last().expect("logits");
                let mut best = 0usize;
                for (k, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = k;
                    }
                }
                if best == data.labels[s] {
                    ok += 1;
                }
            }
            ok
        })
        .sum();
    Ok(correct as f64 / data.n as f64)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

/// Plain dense training: momentum SGD over the learnable entries with a
/// seeded shuffle per epoch.
pub fn train_epochs(
    spec: &ModelSpec,
    params: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainStats, NetError> {
    if data.n == 0 {
        return Err(NetError::EmptyDataset);
    }
    let mut rng = Xoshiro256StarStar::stream(cfg.seed, tags::SHUFFLE);
    let mut opt = SgdOptimizer::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut stats = TrainStats::default();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idxs in order.chunks(cfg.batch_size) {
            let batch = data.gather(idxs);
            let (loss, grads) = loss_and_grad(spec, params, &batch)?;
            if !loss.is_finite() {
                return Err(NetError::Diverged {
                    step: stats.steps,
                    loss,
                });
            }
            opt.step(params, &grads)?;
            epoch_loss += loss;
            batches += 1;
            stats.steps += 1;
        }
        stats.epochs.push(EpochStats {
            mean_loss: epoch_loss / batches as f64,
        });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{init_params, ParamEntry};

    fn toy_batch(n: usize, classes: usize) -> Batch {
        // One bright pixel per class position.
        let c = 1;
        let h = 4;
        let w = 4;
        let mut images = vec![0.0; n * c * h * w];
        let mut labels = Vec::with_capacity(n);
        for s in 0..n {
            let label = s % classes;
            images[s * c * h * w + label] = 1.0;
            labels.push(label);
        }
        Batch {
            n,
            c,
            h,
            w,
            images,
            labels,
        }
    }

    fn toy_spec(classes: usize) -> ModelSpec {
        ModelSpec {
            input: (1, 4, 4),
            num_classes: classes,
            layers: vec![
                Layer::Flatten,
                Layer::Fc {
                    d_in: 16,
                    d_out: classes,
                    has_bias: true,
                },
            ],
        }
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let spec = toy_spec(4);
        let mut params = init_params(&spec, 0);
        for name in ["layer1.weight", "layer1.bias"] {
            params.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = toy_batch(8, 4);
        let logits = forward(&spec, &params, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_fc_reproduces_input() {
        let spec = ModelSpec {
            input: (1, 1, 4),
            num_classes: 4,
            layers: vec![
                Layer::Flatten,
                Layer::Fc {
                    d_in: 4,
                    d_out: 4,
                    has_bias: false,
                },
            ],
        };
        let mut params = ParamStore::new();
        let eye: Vec<f64> = (0..16)
            .map(|k| if k % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        params.insert(
            "layer1.weight",
            ParamEntry::new(vec![4, 4], ParamClass::Learnable, eye),
        );
        let batch = Batch {
            n: 1,
            c: 1,
            h: 1,
            w: 4,
            images: vec![0.0, 0.0, 1.0, 0.0],
            labels: vec![2],
        };
        let logits = forward(&spec, &params, &batch).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_bits() {
        let spec = ModelSpec::tiny_net();
        let params = init_params(&spec, 3);
        let mut images = vec![0.0; 2 * 28 * 28];
        for (k, v) in images.iter_mut().enumerate() {
            *v = ((k * 37) % 255) as f64 / 255.0;
        }
        let batch = Batch {
            n: 2,
            c: 1,
            h: 28,
            w: 28,
            images,
            labels: vec![1, 2],
        };
        let a = forward(&spec, &params, &batch).unwrap();
        let b = forward(&spec, &params, &batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn frozen_entries_get_no_gradient() {
        let spec = toy_spec(4);
        let mut params = init_params(&spec, 0);
        params.get_mut("layer1.bias").unwrap().class = ParamClass::Frozen;
        let batch = toy_batch(4, 4);
        let (_, grads) = loss_and_grad(&spec, &params, &batch).unwrap();
        assert!(grads.contains_key("layer1.weight"));
        assert!(!grads.contains_key("layer1.bias"));
    }

    #[test]
    fn sgd_zero_lr_keeps_bits() {
        let spec = toy_spec(4);
        let mut params = init_params(&spec, 1);
        let before = params.canonical_bytes();
        let batch = toy_batch(4, 4);
        let (_, grads) = loss_and_grad(&spec, &params, &batch).unwrap();
        SgdOptimizer::new(0.0, 0.9).step(&mut params, &grads).unwrap();
        assert_eq!(params.canonical_bytes(), before);
    }

    #[test]
    fn sgd_single_step_is_plain_descent() {
        let mut params = ParamStore::new();
        params.insert(
            "p",
            ParamEntry::new(vec![1], ParamClass::Learnable, vec![2.0]),
        );
        let mut grads = Grads::new();
        grads.insert("p".into(), vec![0.5]);
        SgdOptimizer::new(0.1, 0.0).step(&mut params, &grads).unwrap();
        assert_eq!(params.get("p").unwrap().data[0], 2.0 - 0.1 * 0.5);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        // Hand-evaluated: v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.29.
        let mut params = ParamStore::new();
        params.insert(
            "p",
            ParamEntry::new(vec![1], ParamClass::Learnable, vec![0.0]),
        );
        let mut grads = Grads::new();
        grads.insert("p".into(), vec![1.0]);
        let mut opt = SgdOptimizer::new(0.1, 0.9);
        opt.step(&mut params, &grads).unwrap();
        assert!((params.get("p").unwrap().data[0] + 0.1).abs() < 1e-15);
        opt.step(&mut params, &grads).unwrap();
        assert!((params.get("p").unwrap().data[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_key_mismatch() {
        let spec = toy_spec(4);
        let mut params = init_params(&spec, 1);
        let grads = Grads::new();
        assert!(matches!(
            SgdOptimizer::new(0.1, 0.9).step(&mut params, &grads),
            Err(NetError::KeyMismatch(_))
        ));
    }

    #[test]
    fn frozen_buffers_survive_training_bitwise() {
        let spec = toy_spec(4);
        let mut params = init_params(&spec, 2);
        params.insert(
            "aux.frozen",
            ParamEntry::new(vec![3], ParamClass::Frozen, vec![1.0, 2.0, 3.0]),
        );
        let digest = params.frozen_digest();
        let data = Dataset::from_batch(&toy_batch(16, 4), 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.1,
            momentum: 0.9,
            seed: 5,
        };
        train_epochs(&spec, &mut params, &data, &cfg).unwrap();
        assert_eq!(params.frozen_digest(), digest);
    }

    #[test]
    fn loss_decreases_on_separable_toy_problem() {
        let spec = toy_spec(4);
        let mut params = init_params(&spec, 3);
        let data = Dataset::from_batch(&toy_batch(32, 4), 4);
        let cfg = TrainConfig {
            epochs: 13, // ~50 steps at batch 8
            batch_size: 8,
            lr: 0.1,
            momentum: 0.9,
            seed: 5,
        };
        let stats = train_epochs(&spec, &mut params, &data, &cfg).unwrap();
        assert!(stats.steps >= 50);
        let first = stats.epochs.first().unwrap().mean_loss;
        let last = stats.epochs.last().unwrap().mean_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn evaluate_constant_and_perfect_predictors() {
        let spec = toy_spec(4);
        let mut params = init_params(&spec, 0);
        // Constant logits: argmax ties resolve to class 0.
        for name in ["layer1.weight", "layer1.bias"] {
            params.get_mut(name).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = toy_batch(4, 4);
        let mut single = Dataset::from_batch(&batch, 4);
        single.labels.iter_mut().for_each(|l| *l = 0);
        assert_eq!(evaluate(&spec, &params, &single).unwrap(), 1.0);
        // Perfect predictor: weight row j looks at pixel j.
        let w = params.get_mut("layer1.weight").unwrap();
        for j in 0..4 {
            w.data[j * 16 + j] = 10.0;
        }
        let data = Dataset::from_batch(&toy_batch(4, 4), 4);
        assert_eq!(evaluate(&spec, &params, &data).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let spec = toy_spec(4);
        let params = init_params(&spec, 0);
        let empty = Dataset {
            n: 0,
            c: 1,
            h: 4,
            w: 4,
            images: vec![],
            labels: vec![],
            num_classes: 4,
        };
        assert!(matches!(
            evaluate(&spec, &params, &empty),
            Err(NetError::EmptyDataset)
        ));
    }
}
