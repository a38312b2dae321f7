//! Competitor update methods under the same refine/transmit/reconstitute
//! protocol: Random Mask (RM) and Low Rank Update (LRU).
//!
//! Both regenerate their random structure on the edge from the package seed,
//! so only the refined learnable values travel.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::netcore::{weight_to_matrix, ModelSpec, NetError, ParamClass, ParamStore};
use crate::rng::{tags, Xoshiro256StarStar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("selection proportion {0} out of range (0, 1]")]
    BadProportion(f64),
    #[error("rank {rank} exceeds min(o, i) = {max} for layer {layer}")]
    RankTooLarge { layer: u32, rank: usize, max: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Seed-reproducible binary mask over every learnable scalar of the model.
///
/// Selection: the flattened parameter indices (entries in name order, values
/// in storage order) are permuted with the seeded stream and the first
/// round(P * total) indices are selected.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub seed: u64,
    pub p: f64,
    pub selected: usize,
    pub total: usize,
    /// Per-entry boolean masks, keyed like the learnable entries.
    pub masks: BTreeMap<String, Vec<bool>>,
}

pub fn rm_prepare(params: &ParamStore, seed: u64, p: f64) -> Result<MaskPlan, BaselineError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(BaselineError::BadProportion(p));
    }
    let entries: Vec<(&String, usize)> = params
        .iter()
        .filter(|(_, e)| e.class == ParamClass::Learnable)
        .map(|(n, e)| (n, e.data.len()))
        .collect();
    let total: usize = entries.iter().map(|(_, len)| len).sum();
    let k = (p * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    Xoshiro256StarStar::stream(seed, tags::RM_MASK).shuffle(&mut order);
    let mut flat = vec![false; total];
    for &idx in order.iter().take(k) {
        flat[idx] = true;
    }
    let mut masks = BTreeMap::new();
    let mut offset = 0usize;
    for (name, len) in entries {
        masks.insert(name.clone(), flat[offset..offset + len].to_vec());
        offset += len;
    }
    Ok(MaskPlan {
        seed,
        p,
        selected: k,
        total,
        masks,
    })
}

impl MaskPlan {
    /// Transmitted scalar count: exactly the selected parameters. The mask
    /// itself costs nothing on the wire; it regenerates from the seed.
    pub fn update_size(&self) -> usize {
        self.selected
    }

    /// Zeroes gradient components of unselected scalars so they stay
    /// bit-identical under any number of optimisation steps.
    pub fn apply_to_grads(&self, grads: &mut BTreeMap<String, Vec<f64>>) {
        for (name, g) in grads.iter_mut() {
            if let Some(mask) = self.masks.get(name) {
                for (gv, &keep) in g.iter_mut().zip(mask.iter()) {
                    if !keep {
                        *gv = 0.0;
                    }
                }
            }
        }
    }

    /// Selected values in flatten order (entries in name order).
    pub fn gather_selected(&self, params: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.selected);
        for (name, mask) in &self.masks {
            let entry = params.get(name).expect("mask built from this store");
            for (&v, &keep) in entry.data.iter().zip(mask.iter()) {
                if keep {
                    out.push(v);
                }
            }
        }
        out
    }

    /// Writes packaged values back into the selected positions.
    pub fn scatter_selected(&self, params: &mut ParamStore, values: &[f64]) -> Result<(), NetError> {
        if values.len() != self.selected {
            return Err(NetError::KeyMismatch(format!(
                "mask expects {} selected values, package carries {}",
                self.selected,
                values.len()
            )));
        }
        let mut cursor = 0usize;
        for (name, mask) in &self.masks {
            let entry = params
                .get_mut(name)
                .ok_or_else(|| NetError::MissingParam(name.clone()))?;
            for (v, &keep) in entry.data.iter_mut().zip(mask.iter()) {
                if keep {
                    *v = values[cursor];
                    cursor += 1;
                }
            }
        }
        Ok(())
    }
}

/// Per-layer additive low-rank state: the refined weight is
/// `base + L * R` with `R` random and frozen and `base` the deployed weight.
#[derive(Debug, Clone)]
pub struct LruLayer {
    pub layer_id: u32,
    pub rank: usize,
    /// Learnable o x r mapping, initialised to zero so the pre-refinement
    /// model output is bit-identical to the deployed model's.
    pub l: Matrix,
    /// Frozen random r x i factor, U(-a, a) with a = 1/sqrt(i).
    pub r: Matrix,
    /// Frozen deployed weight.
    pub base: Matrix,
}

#[derive(Debug, Clone)]
pub struct LruState {
    pub seed: u64,
    pub layers: Vec<LruLayer>,
}

/// Regenerates the random R factors for the given (o, i, rank) triples.
/// One stream drawn in layer order; the edge replays the same procedure.
pub fn lru_random_factors(seed: u64, dims: &[(usize, usize, usize)]) -> Vec<Matrix> {
    let mut rng = Xoshiro256StarStar::stream(seed, tags::LRU_FACTORS);
    dims.iter()
        .map(|&(_, i, rank)| {
            let a = 1.0 / (i as f64).sqrt();
            Matrix::from_fn(rank, i, |_, _| rng.uniform(-a, a))
        })
        .collect()
}

/// Builds the LRU state over every targeted layer. `ranks` is indexed like
/// `spec.targeted()`.
pub fn lru_prepare(
    spec: &ModelSpec,
    params: &ParamStore,
    seed: u64,
    ranks: &[usize],
) -> Result<LruState, BaselineError> {
    let targeted = spec.targeted();
    assert_eq!(targeted.len(), ranks.len(), "one rank per targeted layer");
    let mut dims = Vec::with_capacity(targeted.len());
    for (t, &rank) in targeted.iter().zip(ranks.iter()) {
        let max = t.o.min(t.i);
        if rank < 1 || rank > max {
            return Err(BaselineError::RankTooLarge {
                layer: t.id,
                rank,
                max,
            });
        }
        dims.push((t.o, t.i, rank));
    }
    let factors = lru_random_factors(seed, &dims);
    let mut layers = Vec::with_capacity(targeted.len());
    for ((t, &rank), r) in targeted.iter().zip(ranks.iter()).zip(factors) {
        let weight = params.require(&ModelSpec::weight_name(t.id))?;
        let base = weight_to_matrix(weight)?;
        layers.push(LruLayer {
            layer_id: t.id,
            rank,
            l: Matrix::zeros(t.o, rank),
            r,
            base,
        });
    }
    Ok(LruState { seed, layers })
}

impl LruLayer {
    /// `base + L * R`.
    pub fn effective_weight(&self) -> Matrix {
        let correction = self.l.matmul(&self.r).expect("factor shapes agree");
        self.base.add(&correction).expect("same shape")
    }

    /// dL = G * R^T; frozen R and base receive no gradient.
    pub fn grad_l(&self, g: &Matrix) -> Matrix {
        g.matmul_transb(&self.r).expect("factor shapes agree")
    }
}

impl LruState {
    /// Transmitted scalar count: the L matrices plus every untargeted
    /// learnable scalar. Seeds stand in for the R factors at zero cost.
    pub fn update_size(&self, untargeted_scalars: usize) -> usize {
        self.layers
            .iter()
            .map(|layer| layer.l.rows() * layer.rank)
            .sum::<usize>()
            + untargeted_scalars
    }
}
