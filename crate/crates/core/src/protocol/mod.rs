//! The update protocol: server-side compact refinement producing a package,
//! and edge-side reconstitution consuming it.
//!
//! The server re-parameterises each targeted layer from the deployed
//! weights, optimises the reduced learnable set on the new data and packages
//! the learnt values. The edge re-derives every frozen buffer from its own
//! copy of the deployed weights (masks and random factors regenerate from
//! the header seed), so only learnable values ever travel. Reconstitution is
//! a pure transformation: it builds a complete new parameter store and the
//! deployed store is never mutated, which makes any rejection side-effect
//! free.

pub mod checkpoint;
pub mod package;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use package::{
    LayerRecord, MethodTag, PackageError, PackageHeader, RecordKind, UpdatePackage,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::baselines::{lru_prepare, lru_random_factors, rm_prepare, BaselineError, MaskPlan};
use crate::data::{DataError, Dataset};
use crate::linalg::Matrix;
use crate::netcore::{
    loss_and_grad, matrix_to_weight, weight_to_matrix, Grads, ModelSpec, NetError, ParamClass,
    ParamEntry, ParamStore, SgdOptimizer, TargetedLayer,
};
use crate::reparam::{
    grad_backthrough, recover_weight, reparameterise, FactorGrads, ReparamError, ReparamMethod,
    ReparamState,
};
use crate::rng::{tags, Xoshiro256StarStar, PRNG_ALGORITHM_ID};
use package::{ENTRY_BIAS, ENTRY_WEIGHT, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("layer {layer}: {source}")]
    Layer { layer: u32, source: ReparamError },
    #[error("stale model: package fingerprint does not match the deployed parameters")]
    StaleModel,
    #[error("incompatible package: {0}")]
    IncompatiblePackage(String),
    #[error("refinement diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("bad refine config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A per-layer hyperparameter: one default with optional per-layer-id
/// overrides (uniform application is the norm).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerLayer {
    pub default: usize,
    pub overrides: BTreeMap<u32, usize>,
}

impl PerLayer {
    pub fn uniform(default: usize) -> Self {
        Self {
            default,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_overrides<I: IntoIterator<Item = (u32, usize)>>(default: usize, pairs: I) -> Self {
        Self {
            default,
            overrides: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, layer_id: u32) -> usize {
        self.overrides.get(&layer_id).copied().unwrap_or(self.default)
    }
}

/// Which update method refinement runs under, with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodConfig {
    Lra { ranks: PerLayer },
    Ml { ranks: PerLayer },
    Ka { augs: PerLayer },
    Rm { p: f64 },
    Lru { ranks: PerLayer },
}

impl MethodConfig {
    pub fn tag(&self) -> MethodTag {
        match self {
            MethodConfig::Lra { .. } => MethodTag::Lra,
            MethodConfig::Ml { .. } => MethodTag::Ml,
            MethodConfig::Ka { .. } => MethodTag::Ka,
            MethodConfig::Rm { .. } => MethodTag::Rm,
            MethodConfig::Lru { .. } => MethodTag::Lru,
        }
    }

    fn hyper(&self) -> f64 {
        match self {
            MethodConfig::Lra { ranks } | MethodConfig::Ml { ranks } | MethodConfig::Lru { ranks } => {
                ranks.default as f64
            }
            MethodConfig::Ka { augs } => augs.default as f64,
            MethodConfig::Rm { p } => *p,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub method: MethodConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Debug wire mode: keep 64-bit values on the wire.
    pub wire64: bool,
}

impl RefineConfig {
    pub fn new(method: MethodConfig) -> Self {
        Self {
            method,
            epochs: 1,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            wire64: false,
        }
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        if self.batch_size == 0 {
            return Err(ProtocolError::BadConfig("batch_size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(ProtocolError::BadConfig(format!("lr {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ProtocolError::BadConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if let MethodConfig::Rm { p } = self.method {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ProtocolError::BadConfig(format!("mask proportion {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RefineStats {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Everything compact refinement produces: the transmissible package, the
/// server's own refined model (full 64-bit, the equivalence oracle), and the
/// factor store holding learnable factors plus frozen buffers.
#[derive(Debug)]
pub struct RefineOutcome {
    pub package: UpdatePackage,
    pub refined: ParamStore,
    pub factors: ParamStore,
    pub stats: RefineStats,
}

enum LayerPlan {
    Reparam(ReparamMethod),
    /// min(o, i) < requested rank: the whole weight stays learnable and is
    /// transmitted in full, flagged by the dense record kind.
    DenseFallback,
    Lru { rank: usize },
}

struct Engine {
    targeted: Vec<TargetedLayer>,
    plans: Vec<LayerPlan>,
    mask: Option<MaskPlan>,
    weight_shapes: Vec<Vec<usize>>,
}

fn factor_name(id: u32, part: &str) -> String {
    format!("layer{id}.factor.{part}")
}

fn entry_matrix(entry: &ParamEntry, rows: usize, cols: usize) -> Matrix {
    debug_assert_eq!(entry.data.len(), rows * cols);
    Matrix::new(rows, cols, entry.data.clone()).expect("factor entry shape")
}

fn insert_matrix(store: &mut ParamStore, name: String, m: &Matrix, class: ParamClass) {
    store.insert(
        name,
        ParamEntry::new(vec![m.rows(), m.cols()], class, m.data().to_vec()),
    );
}

impl Engine {
    /// Builds the session plan and the factor store from the deployed
    /// parameters. Targeted weights become factors; every other learnable
    /// entry is carried over verbatim and stays learnable.
    fn build(
        spec: &ModelSpec,
        theta1: &ParamStore,
        config: &RefineConfig,
    ) -> Result<(Engine, ParamStore), ProtocolError> {
        let targeted = spec.targeted();
        let weight_shapes: Vec<Vec<usize>> = targeted
            .iter()
            .map(|t| {
                theta1
                    .require(&ModelSpec::weight_name(t.id))
                    .map(|e| e.shape.clone())
            })
            .collect::<Result<_, _>>()?;

        if let MethodConfig::Rm { p } = config.method {
            let mask = rm_prepare(theta1, config.seed, p)?;
            let engine = Engine {
                targeted,
                plans: Vec::new(),
                mask: Some(mask),
                weight_shapes,
            };
            return Ok((engine, theta1.clone()));
        }

        let mut factors = ParamStore::new();
        let targeted_weight_names: Vec<String> = targeted
            .iter()
            .map(|t| ModelSpec::weight_name(t.id))
            .collect();
        for (name, entry) in theta1.iter() {
            if !targeted_weight_names.contains(name) {
                factors.insert(name.clone(), entry.clone());
            }
        }

        let mut plans = Vec::with_capacity(targeted.len());
        match &config.method {
            MethodConfig::Lra { ranks } | MethodConfig::Ml { ranks } => {
                let is_ml = matches!(config.method, MethodConfig::Ml { .. });
                for t in &targeted {
                    let rank = ranks.get(t.id);
                    let m = t.o.min(t.i);
                    if rank > m {
                        let phi = weight_to_matrix(theta1.require(&ModelSpec::weight_name(t.id))?)?;
                        insert_matrix(
                            &mut factors,
                            factor_name(t.id, "dense"),
                            &phi,
                            ParamClass::Learnable,
                        );
                        plans.push(LayerPlan::DenseFallback);
                        continue;
                    }
                    let method = if is_ml {
                        ReparamMethod::Ml { rank }
                    } else {
                        ReparamMethod::Lra { rank }
                    };
                    let phi = weight_to_matrix(theta1.require(&ModelSpec::weight_name(t.id))?)?;
                    let mut unused = Xoshiro256StarStar::stream(config.seed, tags::KA_INIT);
                    let state = reparameterise(&phi, method, &mut unused)
                        .map_err(|source| ProtocolError::Layer { layer: t.id, source })?;
                    match &state {
                        ReparamState::Lra { l, r } => {
                            insert_matrix(&mut factors, factor_name(t.id, "l"), l, ParamClass::Learnable);
                            insert_matrix(&mut factors, factor_name(t.id, "r"), r, ParamClass::Learnable);
                        }
                        ReparamState::Ml { l, r } => {
                            insert_matrix(&mut factors, factor_name(t.id, "l"), l, ParamClass::Learnable);
                            insert_matrix(&mut factors, factor_name(t.id, "r"), r, ParamClass::Frozen);
                        }
                        ReparamState::Ka { .. } => unreachable!(),
                    }
                    plans.push(LayerPlan::Reparam(method));
                }
            }
            MethodConfig::Ka { augs } => {
                let mut rng = Xoshiro256StarStar::stream(config.seed, tags::KA_INIT);
                for t in &targeted {
                    let aug = augs.get(t.id);
                    let method = ReparamMethod::Ka { aug };
                    let phi = weight_to_matrix(theta1.require(&ModelSpec::weight_name(t.id))?)?;
                    let state = reparameterise(&phi, method, &mut rng)
                        .map_err(|source| ProtocolError::Layer { layer: t.id, source })?;
                    if let ReparamState::Ka {
                        u,
                        v,
                        u_aug,
                        v_aug,
                        s,
                    } = &state
                    {
                        insert_matrix(&mut factors, factor_name(t.id, "u"), u, ParamClass::Frozen);
                        insert_matrix(&mut factors, factor_name(t.id, "v"), v, ParamClass::Frozen);
                        insert_matrix(
                            &mut factors,
                            factor_name(t.id, "u_aug"),
                            u_aug,
                            ParamClass::Learnable,
                        );
                        insert_matrix(
                            &mut factors,
                            factor_name(t.id, "v_aug"),
                            v_aug,
                            ParamClass::Learnable,
                        );
                        factors.insert(
                            factor_name(t.id, "s"),
                            ParamEntry::new(vec![s.len()], ParamClass::Learnable, s.clone()),
                        );
                    }
                    plans.push(LayerPlan::Reparam(method));
                }
            }
            MethodConfig::Lru { ranks } => {
                let layer_ranks: Vec<usize> = targeted.iter().map(|t| ranks.get(t.id)).collect();
                let state = lru_prepare(spec, theta1, config.seed, &layer_ranks)?;
                for layer in &state.layers {
                    insert_matrix(
                        &mut factors,
                        factor_name(layer.layer_id, "l"),
                        &layer.l,
                        ParamClass::Learnable,
                    );
                    insert_matrix(
                        &mut factors,
                        factor_name(layer.layer_id, "r"),
                        &layer.r,
                        ParamClass::Frozen,
                    );
                    insert_matrix(
                        &mut factors,
                        factor_name(layer.layer_id, "base"),
                        &layer.base,
                        ParamClass::Frozen,
                    );
                    plans.push(LayerPlan::Lru { rank: layer.rank });
                }
            }
            MethodConfig::Rm { .. } => unreachable!("handled above"),
        }
        let engine = Engine {
            targeted,
            plans,
            mask: None,
            weight_shapes,
        };
        Ok((engine, factors))
    }

    fn read_state(&self, factors: &ParamStore, idx: usize) -> Result<ReparamState, ProtocolError> {
        let t = self.targeted[idx];
        let m = t.o.min(t.i);
        let state = match self.plans[idx] {
            LayerPlan::Reparam(ReparamMethod::Lra { rank }) => ReparamState::Lra {
                l: entry_matrix(factors.require(&factor_name(t.id, "l"))?, t.o, rank),
                r: entry_matrix(factors.require(&factor_name(t.id, "r"))?, rank, t.i),
            },
            LayerPlan::Reparam(ReparamMethod::Ml { rank }) => ReparamState::Ml {
                l: entry_matrix(factors.require(&factor_name(t.id, "l"))?, t.o, rank),
                r: entry_matrix(factors.require(&factor_name(t.id, "r"))?, rank, t.i),
            },
            LayerPlan::Reparam(ReparamMethod::Ka { aug }) => ReparamState::Ka {
                u: entry_matrix(factors.require(&factor_name(t.id, "u"))?, t.o, m),
                v: entry_matrix(factors.require(&factor_name(t.id, "v"))?, t.i, m),
                u_aug: entry_matrix(factors.require(&factor_name(t.id, "u_aug"))?, t.o, aug),
                v_aug: entry_matrix(factors.require(&factor_name(t.id, "v_aug"))?, t.i, aug),
                s: factors.require(&factor_name(t.id, "s"))?.data.clone(),
            },
            LayerPlan::DenseFallback | LayerPlan::Lru { .. } => {
                unreachable!("read_state called for non-reparam plan")
            }
        };
        Ok(state)
    }

    fn effective_weight(&self, factors: &ParamStore, idx: usize) -> Result<Matrix, ProtocolError> {
        let t = self.targeted[idx];
        match self.plans[idx] {
            LayerPlan::Reparam(_) => Ok(recover_weight(&self.read_state(factors, idx)?)),
            LayerPlan::DenseFallback => Ok(entry_matrix(
                factors.require(&factor_name(t.id, "dense"))?,
                t.o,
                t.i,
            )),
            LayerPlan::Lru { rank } => {
                let l = entry_matrix(factors.require(&factor_name(t.id, "l"))?, t.o, rank);
                let r = entry_matrix(factors.require(&factor_name(t.id, "r"))?, rank, t.i);
                let base = entry_matrix(factors.require(&factor_name(t.id, "base"))?, t.o, t.i);
                Ok(base.add(&l.matmul(&r).expect("factor shapes")).expect("same shape"))
            }
        }
    }

    /// Writes the effective dense view of the factors into the working
    /// store the network engine runs on.
    fn materialize(&self, factors: &ParamStore, working: &mut ParamStore) -> Result<(), ProtocolError> {
        if self.mask.is_some() {
            let names: Vec<String> = working.names().cloned().collect();
            for name in names {
                let src = factors.require(&name)?.data.clone();
                working.get_mut(&name).expect("same keys").data = src;
            }
            return Ok(());
        }
        for idx in 0..self.targeted.len() {
            let t = self.targeted[idx];
            let w = self.effective_weight(factors, idx)?;
            let data = matrix_to_weight(&w, &self.weight_shapes[idx])?;
            working
                .get_mut(&ModelSpec::weight_name(t.id))
                .expect("targeted weight present")
                .data = data;
        }
        // Biases and any other untargeted learnables live in the factor
        // store under their original names.
        let names: Vec<String> = working.names().cloned().collect();
        for name in names {
            if let Some(entry) = factors.get(&name) {
                working.get_mut(&name).expect("same keys").data = entry.data.clone();
            }
        }
        Ok(())
    }

    /// Routes dense gradients (w.r.t. effective weights and biases) into
    /// gradients keyed like the factor store's learnable entries.
    fn route(&self, factors: &ParamStore, mut dense: Grads) -> Result<Grads, ProtocolError> {
        if let Some(mask) = &self.mask {
            mask.apply_to_grads(&mut dense);
            return Ok(dense);
        }
        let mut out = Grads::new();
        for idx in 0..self.targeted.len() {
            let t = self.targeted[idx];
            let g_data = dense
                .remove(&ModelSpec::weight_name(t.id))
                .ok_or_else(|| NetError::MissingParam(ModelSpec::weight_name(t.id)))?;
            let g = Matrix::new(t.o, t.i, g_data).expect("gradient shape");
            match self.plans[idx] {
                LayerPlan::Reparam(_) => {
                    let state = self.read_state(factors, idx)?;
                    let fg = grad_backthrough(&state, &g)
                        .map_err(|source| ProtocolError::Layer { layer: t.id, source })?;
                    match fg {
                        FactorGrads::Lra { dl, dr } => {
                            out.insert(factor_name(t.id, "l"), dl.into_data());
                            out.insert(factor_name(t.id, "r"), dr.into_data());
                        }
                        FactorGrads::Ml { dl } => {
                            out.insert(factor_name(t.id, "l"), dl.into_data());
                        }
                        FactorGrads::Ka { du_aug, ds, dv_aug } => {
                            out.insert(factor_name(t.id, "u_aug"), du_aug.into_data());
                            out.insert(factor_name(t.id, "s"), ds);
                            out.insert(factor_name(t.id, "v_aug"), dv_aug.into_data());
                        }
                    }
                }
                LayerPlan::DenseFallback => {
                    out.insert(factor_name(t.id, "dense"), g.into_data());
                }
                LayerPlan::Lru { rank } => {
                    let r = entry_matrix(factors.require(&factor_name(t.id, "r"))?, rank, t.i);
                    out.insert(
                        factor_name(t.id, "l"),
                        g.matmul_transb(&r).expect("factor shapes").into_data(),
                    );
                }
            }
        }
        // Bias and other pass-through gradients keep their names.
        for (name, g) in dense {
            out.insert(name, g);
        }
        Ok(out)
    }

    /// Per-layer records of the final factor values, in layer order.
    fn build_records(&self, factors: &ParamStore) -> Result<Vec<LayerRecord>, ProtocolError> {
        if let Some(mask) = &self.mask {
            let mut records = Vec::with_capacity(mask.masks.len());
            for (name, entry_mask) in &mask.masks {
                let (layer_id, entry_tag, o, i) = parse_entry_name(name, &self.targeted)
                    .ok_or_else(|| {
                        ProtocolError::IncompatiblePackage(format!(
                            "learnable entry {name} has no wire identity"
                        ))
                    })?;
                let entry = factors.require(name)?;
                let values: Vec<f64> = entry
                    .data
                    .iter()
                    .zip(entry_mask.iter())
                    .filter(|(_, &keep)| keep)
                    .map(|(&v, _)| v)
                    .collect();
                records.push(LayerRecord {
                    layer_id,
                    kind: RecordKind::MaskedEntry,
                    entry_tag,
                    o: o as u32,
                    i: i as u32,
                    rn: values.len() as u32,
                    values,
                });
            }
            return Ok(records);
        }
        let mut records = Vec::with_capacity(self.targeted.len());
        for idx in 0..self.targeted.len() {
            let t = self.targeted[idx];
            let record = match self.plans[idx] {
                LayerPlan::Reparam(ReparamMethod::Lra { rank }) => {
                    let mut values = factors.require(&factor_name(t.id, "l"))?.data.clone();
                    values.extend_from_slice(&factors.require(&factor_name(t.id, "r"))?.data);
                    LayerRecord {
                        layer_id: t.id,
                        kind: RecordKind::LraFactors,
                        entry_tag: ENTRY_WEIGHT,
                        o: t.o as u32,
                        i: t.i as u32,
                        rn: rank as u32,
                        values,
                    }
                }
                LayerPlan::Reparam(ReparamMethod::Ml { rank }) => LayerRecord {
                    layer_id: t.id,
                    kind: RecordKind::MlFactor,
                    entry_tag: ENTRY_WEIGHT,
                    o: t.o as u32,
                    i: t.i as u32,
                    rn: rank as u32,
                    values: factors.require(&factor_name(t.id, "l"))?.data.clone(),
                },
                LayerPlan::Reparam(ReparamMethod::Ka { aug }) => {
                    let mut values = factors.require(&factor_name(t.id, "u_aug"))?.data.clone();
                    values.extend_from_slice(&factors.require(&factor_name(t.id, "s"))?.data);
                    values.extend_from_slice(&factors.require(&factor_name(t.id, "v_aug"))?.data);
                    LayerRecord {
                        layer_id: t.id,
                        kind: RecordKind::KaFactors,
                        entry_tag: ENTRY_WEIGHT,
                        o: t.o as u32,
                        i: t.i as u32,
                        rn: aug as u32,
                        values,
                    }
                }
                LayerPlan::DenseFallback => LayerRecord {
                    layer_id: t.id,
                    kind: RecordKind::DenseWeight,
                    entry_tag: ENTRY_WEIGHT,
                    o: t.o as u32,
                    i: t.i as u32,
                    rn: 0,
                    values: factors.require(&factor_name(t.id, "dense"))?.data.clone(),
                },
                LayerPlan::Lru { rank } => LayerRecord {
                    layer_id: t.id,
                    kind: RecordKind::LruFactor,
                    entry_tag: ENTRY_WEIGHT,
                    o: t.o as u32,
                    i: t.i as u32,
                    rn: rank as u32,
                    values: factors.require(&factor_name(t.id, "l"))?.data.clone(),
                },
            };
            records.push(record);
        }
        Ok(records)
    }

    /// Untargeted learnable values transmitted in full (biases and anything
    /// else that is not a targeted weight). Empty for RM, whose mask governs
    /// every learnable scalar.
    fn build_untargeted(&self, factors: &ParamStore) -> Vec<(String, Vec<f64>)> {
        if self.mask.is_some() {
            return Vec::new();
        }
        factors
            .iter()
            .filter(|(name, entry)| {
                entry.class == ParamClass::Learnable && !name.contains(".factor.")
            })
            .map(|(name, entry)| (name.clone(), entry.data.clone()))
            .collect()
    }
}

fn parse_entry_name(name: &str, targeted: &[TargetedLayer]) -> Option<(u32, u8, usize, usize)> {
    let rest = name.strip_prefix("layer")?;
    let (id_str, suffix) = rest.split_once('.')?;
    let id: u32 = id_str.parse().ok()?;
    let t = targeted.iter().find(|t| t.id == id)?;
    match suffix {
        "weight" => Some((id, ENTRY_WEIGHT, t.o, t.i)),
        "bias" => Some((id, ENTRY_BIAS, t.o, 1)),
        _ => None,
    }
}

/// One refinement session: the per-layer plan, the factor store under
/// optimisation, and the working dense view the network engine runs on.
///
/// Exposed so gradient oracles can evaluate the loss as a pure function of
/// the factor store: perturb a factor scalar, call [`RefineSession::loss`].
pub struct RefineSession {
    spec: ModelSpec,
    engine: Engine,
    factors: ParamStore,
    working: ParamStore,
    fingerprint: [u8; 32],
    config: RefineConfig,
}

impl RefineSession {
    pub fn new(
        spec: &ModelSpec,
        theta1: &ParamStore,
        config: &RefineConfig,
    ) -> Result<Self, ProtocolError> {
        config.validate()?;
        spec.validate()?;
        if !theta1.all_finite() {
            return Err(ProtocolError::Net(NetError::NonFinite(
                "deployed parameters".into(),
            )));
        }
        let fingerprint = theta1.fingerprint();
        let (engine, factors) = Engine::build(spec, theta1, config)?;
        Ok(Self {
            spec: spec.clone(),
            engine,
            factors,
            working: theta1.clone(),
            fingerprint,
            config: config.clone(),
        })
    }

    pub fn factors(&self) -> &ParamStore {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut ParamStore {
        &mut self.factors
    }

    /// Loss of the current factor values on a batch.
    pub fn loss(&mut self, batch: &crate::netcore::Batch) -> Result<f64, ProtocolError> {
        self.engine.materialize(&self.factors, &mut self.working)?;
        let logits = crate::netcore::forward(&self.spec, &self.working, batch)?;
        Ok(mean_cross_entropy(&logits, &batch.labels))
    }

    /// Loss and gradients keyed like the factor store's learnable entries.
    pub fn loss_and_factor_grads(
        &mut self,
        batch: &crate::netcore::Batch,
    ) -> Result<(f64, Grads), ProtocolError> {
        self.engine.materialize(&self.factors, &mut self.working)?;
        let (loss, dense) = loss_and_grad(&self.spec, &self.working, batch)?;
        let fgrads = self.engine.route(&self.factors, dense)?;
        Ok((loss, fgrads))
    }

    /// Dense parameter store with the current factor values materialized.
    pub fn materialized(&mut self) -> Result<ParamStore, ProtocolError> {
        self.engine.materialize(&self.factors, &mut self.working)?;
        Ok(self.working.clone())
    }

    fn train(&mut self, d2: &Dataset) -> Result<RefineStats, ProtocolError> {
        if d2.n == 0 {
            return Err(ProtocolError::Net(NetError::EmptyDataset));
        }
        let mut opt = SgdOptimizer::new(self.config.lr, self.config.momentum);
        let mut shuffle_rng = Xoshiro256StarStar::stream(self.config.seed, tags::SHUFFLE);
        let mut order: Vec<usize> = (0..d2.n).collect();
        let mut stats = RefineStats::default();
        for _ in 0..self.config.epochs {
            shuffle_rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let batch = d2.gather(chunk);
                self.engine.materialize(&self.factors, &mut self.working)?;
                let (loss, dense) = loss_and_grad(&self.spec, &self.working, &batch)?;
                if !loss.is_finite() {
                    return Err(ProtocolError::Diverged {
                        step: stats.steps,
                        loss,
                    });
                }
                let fgrads = self.engine.route(&self.factors, dense)?;
                opt.step(&mut self.factors, &fgrads)?;
                epoch_loss += loss;
                batches += 1;
                stats.steps += 1;
            }
            stats.epoch_losses.push(epoch_loss / batches as f64);
        }
        Ok(stats)
    }

    /// Packages the current factor values.
    pub fn build_package(&self) -> Result<UpdatePackage, ProtocolError> {
        let mut package = UpdatePackage {
            header: PackageHeader {
                version: FORMAT_VERSION,
                method: self.config.method.tag(),
                prng_algorithm: PRNG_ALGORITHM_ID,
                wire64: self.config.wire64,
                seed: self.config.seed,
                hyper: self.config.method.hyper(),
                layer_count: self.engine.targeted.len() as u32,
                fingerprint: self.fingerprint,
            },
            records: self.engine.build_records(&self.factors)?,
            untargeted: self.engine.build_untargeted(&self.factors),
        };
        if !self.config.wire64 {
            package.quantize_to_f32();
        }
        Ok(package)
    }
}

/// Mean softmax cross-entropy of logits against labels.
pub fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let z = logits.row(row);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        total += sum.ln() - (z[label] - max);
    }
    total / labels.len() as f64
}

/// Server-side compact refinement: re-parameterise every targeted layer from
/// the deployed weights, optimise the reduced learnable set on the new data,
/// and package the learnt values. Frozen buffers are never packaged.
pub fn compact_refine(
    spec: &ModelSpec,
    theta1: &ParamStore,
    d2: &Dataset,
    config: &RefineConfig,
) -> Result<RefineOutcome, ProtocolError> {
    let mut session = RefineSession::new(spec, theta1, config)?;
    let stats = session.train(d2)?;
    let refined = session.materialized()?;
    let package = session.build_package()?;
    Ok(RefineOutcome {
        package,
        refined,
        factors: session.factors,
        stats,
    })
}

fn record_for_layer<'a>(
    records: &'a [LayerRecord],
    id: u32,
) -> Result<&'a LayerRecord, ProtocolError> {
    records
        .iter()
        .find(|r| r.layer_id == id)
        .ok_or_else(|| ProtocolError::IncompatiblePackage(format!("no record for layer {id}")))
}

fn expect_len(record: &LayerRecord, expected: usize) -> Result<(), ProtocolError> {
    if record.values.len() != expected {
        return Err(ProtocolError::IncompatiblePackage(format!(
            "layer {}: record carries {} values, expected {expected}",
            record.layer_id,
            record.values.len()
        )));
    }
    Ok(())
}

/// Edge-side reconstitution: rebuild the updated parameter store from the
/// deployed parameters plus the update package.
///
/// Frozen knowledge re-derives from the deployed weights (SVD factors) or
/// regenerates from the header seed (masks, random factors). The deployed
/// store is never mutated; any error leaves it bit-unchanged.
pub fn reconstitute(
    spec: &ModelSpec,
    theta1: &ParamStore,
    package: &UpdatePackage,
) -> Result<ParamStore, ProtocolError> {
    if package.header.fingerprint != theta1.fingerprint() {
        return Err(ProtocolError::StaleModel);
    }
    let targeted = spec.targeted();
    if package.header.layer_count as usize != targeted.len() {
        return Err(ProtocolError::IncompatiblePackage(format!(
            "package targets {} layers, model has {}",
            package.header.layer_count,
            targeted.len()
        )));
    }

    if package.header.method == MethodTag::Rm {
        let plan = rm_prepare(theta1, package.header.seed, package.header.hyper)?;
        if package.records.len() != plan.masks.len() {
            return Err(ProtocolError::IncompatiblePackage(format!(
                "package carries {} masked records, model has {} learnable entries",
                package.records.len(),
                plan.masks.len()
            )));
        }
        let mut values = Vec::with_capacity(plan.selected);
        for ((name, entry_mask), record) in plan.masks.iter().zip(package.records.iter()) {
            if record.kind != RecordKind::MaskedEntry {
                return Err(ProtocolError::IncompatiblePackage(format!(
                    "record for {name} is not a masked entry"
                )));
            }
            let (layer_id, entry_tag, _, _) =
                parse_entry_name(name, &targeted).ok_or_else(|| {
                    ProtocolError::IncompatiblePackage(format!("unmappable entry {name}"))
                })?;
            if record.layer_id != layer_id || record.entry_tag != entry_tag {
                return Err(ProtocolError::IncompatiblePackage(format!(
                    "record order mismatch at {name}"
                )));
            }
            let selected = entry_mask.iter().filter(|&&b| b).count();
            expect_len(record, selected)?;
            values.extend_from_slice(&record.values);
        }
        let mut theta2 = theta1.clone();
        plan.scatter_selected(&mut theta2, &values)?;
        return Ok(theta2);
    }

    let mut theta2 = theta1.clone();

    // LRU regenerates every random factor from the seed in layer order
    // before any weight is assembled.
    let lru_factors = if package.header.method == MethodTag::Lru {
        let mut dims = Vec::with_capacity(targeted.len());
        for t in &targeted {
            let record = record_for_layer(&package.records, t.id)?;
            if record.kind != RecordKind::LruFactor {
                return Err(ProtocolError::IncompatiblePackage(format!(
                    "layer {}: expected an additive factor record",
                    t.id
                )));
            }
            dims.push((t.o, t.i, record.rn as usize));
        }
        Some(lru_random_factors(package.header.seed, &dims))
    } else {
        None
    };

    for (idx, t) in targeted.iter().enumerate() {
        let record = record_for_layer(&package.records, t.id)?;
        if record.o as usize != t.o || record.i as usize != t.i {
            return Err(ProtocolError::IncompatiblePackage(format!(
                "layer {}: record is {}x{}, model expects {}x{}",
                t.id, record.o, record.i, t.o, t.i
            )));
        }
        let weight_entry = theta1.require(&ModelSpec::weight_name(t.id))?;
        let m = t.o.min(t.i);
        let weight = match record.kind {
            RecordKind::LraFactors => {
                let rank = record.rn as usize;
                expect_len(record, rank * (t.o + t.i))?;
                let l = Matrix::new(t.o, rank, record.values[..t.o * rank].to_vec())
                    .expect("validated length");
                let r = Matrix::new(rank, t.i, record.values[t.o * rank..].to_vec())
                    .expect("validated length");
                l.matmul(&r).expect("factor shapes")
            }
            RecordKind::MlFactor => {
                let rank = record.rn as usize;
                if rank > m {
                    return Err(ProtocolError::IncompatiblePackage(format!(
                        "layer {}: rank {rank} exceeds min(o, i) = {m}",
                        t.id
                    )));
                }
                expect_len(record, rank * t.o)?;
                let phi = weight_to_matrix(weight_entry)?;
                let factors = crate::linalg::svd(&phi).map_err(|e| ProtocolError::Layer {
                    layer: t.id,
                    source: ReparamError::Linalg(e),
                })?;
                let (_, r) = crate::linalg::truncate(&factors, rank).map_err(|e| {
                    ProtocolError::Layer {
                        layer: t.id,
                        source: ReparamError::Linalg(e),
                    }
                })?;
                let l = Matrix::new(t.o, rank, record.values.clone()).expect("validated length");
                l.matmul(&r).expect("factor shapes")
            }
            RecordKind::KaFactors => {
                let aug = record.rn as usize;
                expect_len(record, t.o * aug + (m + aug) + t.i * aug)?;
                let phi = weight_to_matrix(weight_entry)?;
                let factors = crate::linalg::svd(&phi).map_err(|e| ProtocolError::Layer {
                    layer: t.id,
                    source: ReparamError::Linalg(e),
                })?;
                let u_aug = Matrix::new(t.o, aug, record.values[..t.o * aug].to_vec())
                    .expect("validated length");
                let s = record.values[t.o * aug..t.o * aug + m + aug].to_vec();
                let v_aug = Matrix::new(t.i, aug, record.values[t.o * aug + m + aug..].to_vec())
                    .expect("validated length");
                // The augmenting vectors fold into the weight and are
                // discarded with the rest of the factor state.
                recover_weight(&ReparamState::Ka {
                    u: factors.u,
                    v: factors.v,
                    u_aug,
                    v_aug,
                    s,
                })
            }
            RecordKind::DenseWeight => {
                expect_len(record, t.o * t.i)?;
                Matrix::new(t.o, t.i, record.values.clone()).expect("validated length")
            }
            RecordKind::LruFactor => {
                let rank = record.rn as usize;
                expect_len(record, t.o * rank)?;
                let l = Matrix::new(t.o, rank, record.values.clone()).expect("validated length");
                let r = &lru_factors.as_ref().expect("prepared above")[idx];
                let base = weight_to_matrix(weight_entry)?;
                base.add(&l.matmul(r).expect("factor shapes")).expect("same shape")
            }
            RecordKind::MaskedEntry => {
                return Err(ProtocolError::IncompatiblePackage(format!(
                    "layer {}: masked record under method {}",
                    t.id,
                    package.header.method.name()
                )));
            }
        };
        let data = matrix_to_weight(&weight, &weight_entry.shape)?;
        theta2
            .get_mut(&ModelSpec::weight_name(t.id))
            .expect("cloned from theta1")
            .data = data;
    }

    for (name, values) in &package.untargeted {
        let entry = theta2.get_mut(name).ok_or_else(|| {
            ProtocolError::IncompatiblePackage(format!("untargeted entry {name} not in model"))
        })?;
        if entry.data.len() != values.len() {
            return Err(ProtocolError::IncompatiblePackage(format!(
                "untargeted entry {name}: {} values, model expects {}",
                values.len(),
                entry.data.len()
            )));
        }
        entry.data = values.clone();
    }
    Ok(theta2)
}

/// Transmitted learnable scalar count divided by the model's parameter
/// count.
pub fn update_fraction(package: &UpdatePackage, theta: &ParamStore) -> f64 {
    update_fraction_counts(package.scalar_count(), theta.learnable_scalar_count())
}

pub fn update_fraction_counts(transmitted: usize, total: usize) -> f64 {
    transmitted as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthConfig};
    use crate::netcore::{evaluate, forward, init_params};
    use crate::reparam::param_count;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            input: (1, 8, 8),
            num_classes: 4,
            layers: vec![
                crate::netcore::Layer::Conv2D {
                    c_in: 1,
                    c_out: 3,
                    k_h: 3,
                    k_w: 3,
                    stride: 1,
                    padding: 1,
                    has_bias: true,
                },
                crate::netcore::Layer::Relu,
                crate::netcore::Layer::MaxPool2,
                crate::netcore::Layer::Flatten,
                crate::netcore::Layer::Fc {
                    d_in: 48,
                    d_out: 4,
                    has_bias: true,
                },
            ],
        }
    }

    fn small_data(n: usize) -> Dataset {
        let cfg = SynthConfig {
            train: n,
            test: 1,
            ..SynthConfig::default()
        };
        let (mut train, _) = generate(&cfg);
        // Downscale labels and crop to an 8x8 window for the 4-class toy net.
        let mut images = Vec::with_capacity(n * 64);
        for s in 0..n {
            let img = train.image(s);
            for y in 0..8 {
                for x in 0..8 {
                    images.push(img[(y + 10) * 28 + (x + 10)]);
                }
            }
        }
        train.labels.iter_mut().for_each(|l| *l %= 4);
        Dataset {
            n,
            c: 1,
            h: 8,
            w: 8,
            images,
            labels: train.labels[..n].to_vec(),
            num_classes: 4,
        }
    }

    fn probe(n: usize) -> crate::netcore::Batch {
        small_data(n).gather(&(0..n).collect::<Vec<_>>())
    }

    fn configs() -> Vec<MethodConfig> {
        vec![
            MethodConfig::Lra {
                ranks: PerLayer::uniform(2),
            },
            MethodConfig::Ml {
                ranks: PerLayer::uniform(2),
            },
            MethodConfig::Ka {
                augs: PerLayer::uniform(1),
            },
            MethodConfig::Rm { p: 0.1 },
            MethodConfig::Lru {
                ranks: PerLayer::uniform(1),
            },
        ]
    }

    #[test]
    fn zero_epoch_ka_preserves_deployed_logits() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 5);
        let data = small_data(32);
        let mut config = RefineConfig::new(MethodConfig::Ka {
            augs: PerLayer::uniform(1),
        });
        config.epochs = 0;
        config.seed = 9;
        let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
        let theta2 = reconstitute(&spec, &theta1, &outcome.package).unwrap();
        let batch = probe(8);
        let before = forward(&spec, &theta1, &batch).unwrap();
        let after = forward(&spec, &theta2, &batch).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-6);
    }

    #[test]
    fn end_to_end_equivalence_for_all_methods() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 6);
        let data = small_data(64);
        let batch = probe(16);
        for method in configs() {
            let mut config = RefineConfig::new(method.clone());
            config.epochs = 2;
            config.batch_size = 16;
            config.seed = 11;
            let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
            let theta2 = reconstitute(&spec, &theta1, &outcome.package).unwrap();
            let server = forward(&spec, &outcome.refined, &batch).unwrap();
            let edge = forward(&spec, &theta2, &batch).unwrap();
            let diff = server.max_abs_diff(&edge);
            assert!(
                diff < 1e-6,
                "{}: server/edge logits differ by {diff}",
                method.tag().name()
            );
        }
    }

    #[test]
    fn debug_wire_mode_is_near_exact() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 7);
        let data = small_data(32);
        for method in configs() {
            let mut config = RefineConfig::new(method);
            config.epochs = 1;
            config.batch_size = 16;
            config.seed = 3;
            config.wire64 = true;
            let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
            let bytes = outcome.package.serialize();
            let decoded = UpdatePackage::deserialize(&bytes).unwrap();
            let theta2 = reconstitute(&spec, &theta1, &decoded).unwrap();
            let batch = probe(8);
            let server = forward(&spec, &outcome.refined, &batch).unwrap();
            let edge = forward(&spec, &theta2, &batch).unwrap();
            assert!(server.max_abs_diff(&edge) < 1e-12);
        }
    }

    #[test]
    fn package_scalar_count_matches_formulas() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 8);
        let data = small_data(16);
        let untargeted = 3 + 4; // biases
        for (method, expected) in [
            (
                MethodConfig::Ka {
                    augs: PerLayer::uniform(2),
                },
                param_count(ReparamMethod::Ka { aug: 2 }, 3, 9, false)
                    + param_count(ReparamMethod::Ka { aug: 2 }, 4, 48, false)
                    + untargeted,
            ),
            (
                MethodConfig::Lra {
                    ranks: PerLayer::uniform(2),
                },
                param_count(ReparamMethod::Lra { rank: 2 }, 3, 9, false)
                    + param_count(ReparamMethod::Lra { rank: 2 }, 4, 48, false)
                    + untargeted,
            ),
        ] {
            let mut config = RefineConfig::new(method);
            config.epochs = 1;
            config.batch_size = 8;
            let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
            assert_eq!(outcome.package.scalar_count(), expected);
        }
    }

    #[test]
    fn rm_package_counts_match_rounding() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 9);
        let data = small_data(16);
        let mut config = RefineConfig::new(MethodConfig::Rm { p: 0.25 });
        config.epochs = 1;
        config.batch_size = 8;
        let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
        let total = theta1.learnable_scalar_count();
        assert_eq!(
            outcome.package.scalar_count(),
            (0.25 * total as f64).round() as usize
        );
        assert!(outcome.package.untargeted.is_empty());
    }

    #[test]
    fn stale_fingerprint_is_rejected_before_any_work() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 10);
        let other = init_params(&spec, 11);
        let data = small_data(16);
        let mut config = RefineConfig::new(MethodConfig::Ka {
            augs: PerLayer::uniform(0),
        });
        config.epochs = 0;
        let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
        let before = other.canonical_bytes();
        assert!(matches!(
            reconstitute(&spec, &other, &outcome.package),
            Err(ProtocolError::StaleModel)
        ));
        assert_eq!(other.canonical_bytes(), before);
    }

    #[test]
    fn frozen_factors_survive_refinement() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 12);
        let data = small_data(48);
        for method in [
            MethodConfig::Ml {
                ranks: PerLayer::uniform(2),
            },
            MethodConfig::Ka {
                augs: PerLayer::uniform(1),
            },
            MethodConfig::Lru {
                ranks: PerLayer::uniform(1),
            },
        ] {
            let mut config = RefineConfig::new(method.clone());
            config.epochs = 0;
            config.seed = 21;
            let initial = compact_refine(&spec, &theta1, &data, &config).unwrap();
            config.epochs = 3;
            let trained = compact_refine(&spec, &theta1, &data, &config).unwrap();
            assert_eq!(
                initial.factors.frozen_digest(),
                trained.factors.frozen_digest(),
                "{}: frozen buffers changed",
                method.tag().name()
            );
        }
    }

    #[test]
    fn rm_unselected_scalars_are_bit_identical() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 13);
        let data = small_data(48);
        let mut config = RefineConfig::new(MethodConfig::Rm { p: 0.2 });
        config.epochs = 3;
        config.seed = 33;
        let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
        let plan = rm_prepare(&theta1, config.seed, 0.2).unwrap();
        let mut changed = 0usize;
        for (name, mask) in &plan.masks {
            let before = &theta1.get(name).unwrap().data;
            let after = &outcome.refined.get(name).unwrap().data;
            for ((&b, &a), &selected) in before.iter().zip(after.iter()).zip(mask.iter()) {
                if selected {
                    if a != b {
                        changed += 1;
                    }
                } else {
                    assert_eq!(a.to_bits(), b.to_bits(), "unselected scalar moved in {name}");
                }
            }
        }
        assert!(changed > 0, "training never moved a selected scalar");
    }

    #[test]
    fn lru_initial_logits_are_bit_identical() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 14);
        let data = small_data(16);
        let mut config = RefineConfig::new(MethodConfig::Lru {
            ranks: PerLayer::uniform(2),
        });
        config.epochs = 0;
        let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
        let batch = probe(8);
        let a = forward(&spec, &theta1, &batch).unwrap();
        let b = forward(&spec, &outcome.refined, &batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn degenerate_rank_falls_back_to_dense() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 15);
        let data = small_data(16);
        // min(o, i) = 3 on the conv layer; rank 4 forces the fallback there.
        let mut config = RefineConfig::new(MethodConfig::Lra {
            ranks: PerLayer::uniform(4),
        });
        config.epochs = 1;
        config.batch_size = 8;
        let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
        assert_eq!(outcome.package.records[0].kind, RecordKind::DenseWeight);
        assert_eq!(outcome.package.records[1].kind, RecordKind::LraFactors);
        let theta2 = reconstitute(&spec, &theta1, &outcome.package).unwrap();
        let batch = probe(8);
        let server = forward(&spec, &outcome.refined, &batch).unwrap();
        let edge = forward(&spec, &theta2, &batch).unwrap();
        assert!(server.max_abs_diff(&edge) < 1e-6);
    }

    #[test]
    fn update_fraction_is_monotone_in_hyper() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 16);
        let data = small_data(16);
        let mut last = BTreeMap::new();
        for (name, methods) in [
            (
                "lra",
                (1..=3)
                    .map(|r| MethodConfig::Lra {
                        ranks: PerLayer::uniform(r),
                    })
                    .collect::<Vec<_>>(),
            ),
            (
                "ka",
                (0..=2)
                    .map(|n| MethodConfig::Ka {
                        augs: PerLayer::uniform(n),
                    })
                    .collect(),
            ),
            (
                "rm",
                [0.05, 0.1, 0.3]
                    .into_iter()
                    .map(|p| MethodConfig::Rm { p })
                    .collect(),
            ),
        ] {
            last.clear();
            for method in methods {
                let mut config = RefineConfig::new(method);
                config.epochs = 0;
                let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
                let f = update_fraction(&outcome.package, &theta1);
                if let Some(prev) = last.get(name) {
                    assert!(f > *prev, "{name}: fraction not increasing");
                }
                last.insert(name, f);
            }
        }
    }

    #[test]
    fn refined_model_improves_on_training_data() {
        let spec = small_spec();
        let theta1 = init_params(&spec, 17);
        let data = small_data(128);
        let before = evaluate(&spec, &theta1, &data).unwrap();
        let mut config = RefineConfig::new(MethodConfig::Lra {
            ranks: PerLayer::uniform(3),
        });
        config.epochs = 12;
        config.batch_size = 16;
        config.lr = 0.1;
        let outcome = compact_refine(&spec, &theta1, &data, &config).unwrap();
        let after = evaluate(&spec, &outcome.refined, &data).unwrap();
        assert!(
            after > before,
            "training accuracy did not improve: {before} -> {after}"
        );
        assert!(
            outcome.stats.epoch_losses.last().unwrap()
                < outcome.stats.epoch_losses.first().unwrap()
        );
    }
}
