//! Server-side re-parameterisations of a layer weight matrix.
//!
//! Each method splits a layer into learnable parameters and frozen buffers:
//!
//! * LRA keeps both truncated SVD factors learnable; no knowledge is reused.
//! * ML freezes the base-filter matrix R and learns only the mapping L.
//! * KA freezes U and V in full, augments them with n learnable columns and
//!   re-learns the whole singular-weight vector.
//!
//! The recovered weight is an intermediate of the forward pass, never a leaf:
//! gradients flow through `grad_backthrough` into the factors only.

use thiserror::Error;

use crate::linalg::{scale_cols, svd, truncate, LinalgError, Matrix};
use crate::rng::Xoshiro256StarStar;

/// Magnitude of the KA augmentation init. Small enough that the initial
/// recovered weight stays at the deployed model's accuracy level.
pub const KA_INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReparamError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("rank {rank} exceeds min(o, i) = {max} for a {o}x{i} layer")]
    RankTooLarge {
        rank: usize,
        max: usize,
        o: usize,
        i: usize,
    },
    #[error("gradient shape {got} does not match layer shape {expected}")]
    GradShape { expected: String, got: String },
}

/// Method tag with its compactness hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReparamMethod {
    Lra { rank: usize },
    Ml { rank: usize },
    Ka { aug: usize },
}

impl ReparamMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ReparamMethod::Lra { .. } => "lra",
            ReparamMethod::Ml { .. } => "ml",
            ReparamMethod::Ka { .. } => "ka",
        }
    }
}

/// Per-layer factor state: the learnable factors plus the frozen knowledge
/// needed to recover the weight.
#[derive(Debug, Clone, PartialEq)]
pub enum ReparamState {
    /// Learnable: l (o x r), r (r x i). No frozen buffers.
    Lra { l: Matrix, r: Matrix },
    /// Learnable: l (o x r). Frozen: r (r x i).
    Ml { l: Matrix, r: Matrix },
    /// Learnable: u_aug (o x n), s (m + n), v_aug (i x n).
    /// Frozen: u (o x m), v (i x m).
    Ka {
        u: Matrix,
        v: Matrix,
        u_aug: Matrix,
        v_aug: Matrix,
        s: Vec<f64>,
    },
}

/// Gradients for the learnable factors of a state. Frozen buffers never
/// appear here.
#[derive(Debug, Clone)]
pub enum FactorGrads {
    Lra { dl: Matrix, dr: Matrix },
    Ml { dl: Matrix },
    Ka { du_aug: Matrix, ds: Vec<f64>, dv_aug: Matrix },
}

/// Builds the factor state for one layer from its current weight matrix.
///
/// KA draws its augmentation init uniformly from [-1e-4, 1e-4] in a pinned
/// order: u_aug row-major, then v_aug row-major, then the trailing n entries
/// of s. The leading m entries of s start at the current singular values so
/// refinement starts from the deployed accuracy level.
pub fn reparameterise(
    phi: &Matrix,
    method: ReparamMethod,
    rng: &mut Xoshiro256StarStar,
) -> Result<ReparamState, ReparamError> {
    let (o, i) = (phi.rows(), phi.cols());
    let m = o.min(i);
    let factors = svd(phi)?;
    match method {
        ReparamMethod::Lra { rank } | ReparamMethod::Ml { rank } if rank > m => {
            Err(ReparamError::RankTooLarge { rank, max: m, o, i })
        }
        ReparamMethod::Lra { rank } => {
            let (l, r) = truncate(&factors, rank)?;
            Ok(ReparamState::Lra { l, r })
        }
        ReparamMethod::Ml { rank } => {
            let (l, r) = truncate(&factors, rank)?;
            Ok(ReparamState::Ml { l, r })
        }
        ReparamMethod::Ka { aug } => {
            let u_aug = Matrix::from_fn(o, aug, |_, _| rng.uniform(-KA_INIT_RANGE, KA_INIT_RANGE));
            let v_aug = Matrix::from_fn(i, aug, |_, _| rng.uniform(-KA_INIT_RANGE, KA_INIT_RANGE));
            let mut s = factors.s.clone();
            s.extend((0..aug).map(|_| rng.uniform(-KA_INIT_RANGE, KA_INIT_RANGE)));
            Ok(ReparamState::Ka {
                u: factors.u,
                v: factors.v,
                u_aug,
                v_aug,
                s,
            })
        }
    }
}

/// Recovers the o x i weight matrix from a factor state. Pure; used inside
/// the training forward pass and during edge reconstitution.
pub fn recover_weight(state: &ReparamState) -> Matrix {
    match state {
        ReparamState::Lra { l, r } | ReparamState::Ml { l, r } => {
            l.matmul(r).expect("factor shapes agree")
        }
        ReparamState::Ka {
            u,
            v,
            u_aug,
            v_aug,
            s,
        } => {
            let u_cat = hcat(u, u_aug);
            let v_cat = hcat(v, v_aug);
            let scaled = scale_cols(&u_cat, s);
            scaled.matmul_transb(&v_cat).expect("factor shapes agree")
        }
    }
}

fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    Matrix::from_fn(a.rows(), a.cols() + b.cols(), |r, c| {
        if c < a.cols() {
            a.get(r, c)
        } else {
            b.get(r, c - a.cols())
        }
    })
}

/// Routes the loss gradient w.r.t. the recovered weight into the learnable
/// factors. Frozen buffers receive no gradient.
pub fn grad_backthrough(state: &ReparamState, g: &Matrix) -> Result<FactorGrads, ReparamError> {
    let (o, i) = match state {
        ReparamState::Lra { l, r } | ReparamState::Ml { l, r } => (l.rows(), r.cols()),
        ReparamState::Ka { u, v, .. } => (u.rows(), v.rows()),
    };
    if g.rows() != o || g.cols() != i {
        return Err(ReparamError::GradShape {
            expected: format!("{o}x{i}"),
            got: format!("{}x{}", g.rows(), g.cols()),
        });
    }
    match state {
        ReparamState::Lra { l, r } => Ok(FactorGrads::Lra {
            dl: g.matmul_transb(r)?,
            dr: l.transpose().matmul(g)?,
        }),
        ReparamState::Ml { l: _, r } => Ok(FactorGrads::Ml {
            dl: g.matmul_transb(r)?,
        }),
        ReparamState::Ka {
            u,
            v,
            u_aug,
            v_aug,
            s,
        } => {
            let m = u.cols();
            let n = u_aug.cols();
            let u_cat = hcat(u, u_aug);
            let v_cat = hcat(v, v_aug);
            // ds_k = u_k^T * G * v_k for every column k of the augmented pair.
            let mut ds = Vec::with_capacity(m + n);
            for k in 0..m + n {
                let mut acc = 0.0;
                for row in 0..o {
                    let g_row = g.row(row);
                    let mut dot = 0.0;
                    for (col, &gv) in g_row.iter().enumerate() {
                        dot += gv * v_cat.get(col, k);
                    }
                    acc += u_cat.get(row, k) * dot;
                }
                ds.push(acc);
            }
            let s_tail = &s[m..];
            // du' = G * V' * diag(s_tail); dv' = G^T * U' * diag(s_tail).
            let du_aug = scale_cols(&g.matmul(v_aug)?, s_tail);
            let dv_aug = scale_cols(&g.transpose().matmul(u_aug)?, s_tail);
            Ok(FactorGrads::Ka {
                du_aug,
                ds,
                dv_aug,
            })
        }
    }
}

/// Learnable scalar count for one layer under a method.
///
/// LRA: r(o + i). ML: r * o. KA: n(o + i) + (min(o, i) + n). Bias adds o.
pub fn param_count(method: ReparamMethod, o: usize, i: usize, has_bias: bool) -> usize {
    let m = o.min(i);
    let factors = match method {
        ReparamMethod::Lra { rank } => rank * (o + i),
        ReparamMethod::Ml { rank } => rank * o,
        ReparamMethod::Ka { aug } => aug * (o + i) + (m + aug),
    };
    factors + if has_bias { o } else { 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tags, Xoshiro256StarStar};

    fn rng() -> Xoshiro256StarStar {
        Xoshiro256StarStar::stream(11, tags::KA_INIT)
    }

    fn seeded(o: usize, i: usize, seed: u64) -> Matrix {
        let mut r = Xoshiro256StarStar::seed_from_u64(seed);
        Matrix::from_fn(o, i, |_, _| r.uniform(-1.0, 1.0))
    }

    fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            num += (x - y) * (x - y);
            den += x * x;
        }
        (num / den).sqrt()
    }

    #[test]
    fn ka_zero_augmentation_recovers_exactly() {
        let phi = seeded(4, 6, 1);
        let state = reparameterise(&phi, ReparamMethod::Ka { aug: 0 }, &mut rng()).unwrap();
        if let ReparamState::Ka { s, u_aug, v_aug, .. } = &state {
            assert_eq!(s.len(), 4);
            assert_eq!(u_aug.cols(), 0);
            assert_eq!(v_aug.cols(), 0);
        } else {
            panic!("wrong variant");
        }
        let recon = recover_weight(&state);
        assert!(rel_frob(&phi, &recon) <= 1e-9);
    }

    #[test]
    fn lra_full_rank_is_lossless() {
        let phi = seeded(5, 3, 2);
        let state = reparameterise(&phi, ReparamMethod::Lra { rank: 3 }, &mut rng()).unwrap();
        assert!(rel_frob(&phi, &recover_weight(&state)) <= 1e-9);
        let state = reparameterise(&phi, ReparamMethod::Ml { rank: 3 }, &mut rng()).unwrap();
        assert!(rel_frob(&phi, &recover_weight(&state)) <= 1e-9);
    }

    #[test]
    fn lra_truncated_diagonal() {
        let phi = Matrix::diag(&[3.0, 2.0, 1.0]);
        let state = reparameterise(&phi, ReparamMethod::Lra { rank: 2 }, &mut rng()).unwrap();
        let recon = recover_weight(&state);
        let expected = Matrix::diag(&[3.0, 2.0, 0.0]);
        assert!(recon.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn ml_identity_mapping_returns_r() {
        // L = I when phi is orthonormal-rows times nothing: use phi = R built
        // from identity: phi = I (3x5 truncated identity).
        let phi = Matrix::from_fn(3, 5, |r, c| if r == c { 1.0 } else { 0.0 });
        let state = reparameterise(&phi, ReparamMethod::Ml { rank: 3 }, &mut rng()).unwrap();
        if let ReparamState::Ml { l, r } = &state {
            assert!(l.max_abs_diff(&Matrix::identity(3)) < 1e-12);
            let recon = recover_weight(&state);
            assert!(recon.max_abs_diff(r) < 1e-12 && recon.max_abs_diff(&phi) < 1e-12);
        } else {
            panic!("wrong variant");
        }
    }

    #[test]
    fn ka_inactive_augmentation_matches_svd() {
        let phi = seeded(4, 6, 3);
        let mut state = reparameterise(&phi, ReparamMethod::Ka { aug: 2 }, &mut rng()).unwrap();
        if let ReparamState::Ka { u_aug, v_aug, s, .. } = &mut state {
            u_aug.data_mut().iter_mut().for_each(|v| *v = 0.0);
            v_aug.data_mut().iter_mut().for_each(|v| *v = 0.0);
            s[4] = 0.0;
            s[5] = 0.0;
        }
        assert!(rel_frob(&phi, &recover_weight(&state)) <= 1e-9);
    }

    #[test]
    fn ka_init_perturbs_weight_negligibly() {
        let phi = seeded(4, 6, 4);
        let state = reparameterise(&phi, ReparamMethod::Ka { aug: 1 }, &mut rng()).unwrap();
        let recon = recover_weight(&state);
        // One augmented direction with all entries <= 1e-4 contributes at
        // most 1e-12 per weight entry.
        assert!(recon.max_abs_diff(&phi) < 1e-9);
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let phi = seeded(3, 4, 5);
        assert!(matches!(
            reparameterise(&phi, ReparamMethod::Lra { rank: 4 }, &mut rng()),
            Err(ReparamError::RankTooLarge { .. })
        ));
    }

    #[test]
    fn zero_gradient_backs_through_to_zero() {
        let phi = seeded(3, 4, 6);
        for method in [
            ReparamMethod::Lra { rank: 2 },
            ReparamMethod::Ml { rank: 2 },
            ReparamMethod::Ka { aug: 1 },
        ] {
            let state = reparameterise(&phi, method, &mut rng()).unwrap();
            let g = Matrix::zeros(3, 4);
            match grad_backthrough(&state, &g).unwrap() {
                FactorGrads::Lra { dl, dr } => {
                    assert!(dl.data().iter().all(|&v| v == 0.0));
                    assert!(dr.data().iter().all(|&v| v == 0.0));
                }
                FactorGrads::Ml { dl } => assert!(dl.data().iter().all(|&v| v == 0.0)),
                FactorGrads::Ka { du_aug, ds, dv_aug } => {
                    assert!(du_aug.data().iter().all(|&v| v == 0.0));
                    assert!(ds.iter().all(|&v| v == 0.0));
                    assert!(dv_aug.data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn grad_shape_mismatch_is_rejected() {
        let phi = seeded(3, 4, 7);
        let state = reparameterise(&phi, ReparamMethod::Lra { rank: 2 }, &mut rng()).unwrap();
        assert!(matches!(
            grad_backthrough(&state, &Matrix::zeros(4, 3)),
            Err(ReparamError::GradShape { .. })
        ));
    }

    // Finite-difference oracle over recover_weight with a fixed linear loss.
    fn fd_check(method: ReparamMethod, o: usize, i: usize) {
        let phi = seeded(o, i, 8);
        let state = reparameterise(&phi, method, &mut rng()).unwrap();
        // loss = sum(W .* C) for a fixed coefficient matrix C => dL/dW = C.
        let coeff = seeded(o, i, 9);
        let loss = |st: &ReparamState| -> f64 {
            recover_weight(st)
                .data()
                .iter()
                .zip(coeff.data().iter())
                .map(|(w, c)| w * c)
                .sum()
        };
        let grads = grad_backthrough(&state, &coeff).unwrap();
        let eps = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-4,
                "fd mismatch: analytic {analytic} vs numeric {numeric}"
            );
        };
        match (&state, &grads) {
            (ReparamState::Lra { l, r }, FactorGrads::Lra { dl, dr }) => {
                for idx in 0..l.data().len() {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    if let (ReparamState::Lra { l: lp, .. }, ReparamState::Lra { l: lm, .. }) =
                        (&mut plus, &mut minus)
                    {
                        lp.data_mut()[idx] += eps;
                        lm.data_mut()[idx] -= eps;
                    }
                    check(dl.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * eps));
                }
                for idx in 0..r.data().len() {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    if let (ReparamState::Lra { r: rp, .. }, ReparamState::Lra { r: rm, .. }) =
                        (&mut plus, &mut minus)
                    {
                        rp.data_mut()[idx] += eps;
                        rm.data_mut()[idx] -= eps;
                    }
                    check(dr.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * eps));
                }
            }
            (ReparamState::Ml { l, .. }, FactorGrads::Ml { dl }) => {
                for idx in 0..l.data().len() {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    if let (ReparamState::Ml { l: lp, .. }, ReparamState::Ml { l: lm, .. }) =
                        (&mut plus, &mut minus)
                    {
                        lp.data_mut()[idx] += eps;
                        lm.data_mut()[idx] -= eps;
                    }
                    check(dl.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * eps));
                }
            }
            (ReparamState::Ka { u_aug, v_aug, s, .. }, FactorGrads::Ka { du_aug, ds, dv_aug }) => {
                for idx in 0..u_aug.data().len() {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    if let (
                        ReparamState::Ka { u_aug: up, .. },
                        ReparamState::Ka { u_aug: um, .. },
                    ) = (&mut plus, &mut minus)
                    {
                        up.data_mut()[idx] += eps;
                        um.data_mut()[idx] -= eps;
                    }
                    check(du_aug.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * eps));
                }
                for idx in 0..v_aug.data().len() {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    if let (
                        ReparamState::Ka { v_aug: vp, .. },
                        ReparamState::Ka { v_aug: vm, .. },
                    ) = (&mut plus, &mut minus)
                    {
                        vp.data_mut()[idx] += eps;
                        vm.data_mut()[idx] -= eps;
                    }
                    check(dv_aug.data()[idx], (loss(&plus) - loss(&minus)) / (2.0 * eps));
                }
                for idx in 0..s.len() {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    if let (ReparamState::Ka { s: sp, .. }, ReparamState::Ka { s: sm, .. }) =
                        (&mut plus, &mut minus)
                    {
                        sp[idx] += eps;
                        sm[idx] -= eps;
                    }
                    check(ds[idx], (loss(&plus) - loss(&minus)) / (2.0 * eps));
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(ReparamMethod::Lra { rank: 2 }, 3, 4);
        fd_check(ReparamMethod::Ml { rank: 2 }, 3, 4);
        fd_check(ReparamMethod::Ka { aug: 2 }, 3, 4);
    }

    #[test]
    fn param_count_formulas() {
        assert_eq!(
            param_count(ReparamMethod::Lra { rank: 2 }, 4, 6, false),
            20
        );
        // KA o=4, i=6, n=1, bias: 10 + 5 + 4 = 19.
        assert_eq!(param_count(ReparamMethod::Ka { aug: 1 }, 4, 6, true), 19);
        assert_eq!(param_count(ReparamMethod::Ml { rank: 3 }, 4, 6, false), 12);
    }

    #[test]
    fn table_scale_arithmetic_for_ka() {
        // ResNet18-shaped spot check, reproduced as arithmetic only:
        // KA n=3 across its targeted layers plus untargeted parameters gives
        // 127939 of 11173962 total, i.e. 1.14%.
        let fraction = 127_939.0 / 11_173_962.0;
        assert_eq!(format!("{:.2}", fraction * 100.0), "1.14");
    }

    #[test]
    fn reparameterise_is_method_shape_consistent() {
        let phi = seeded(6, 4, 10);
        let state = reparameterise(&phi, ReparamMethod::Ka { aug: 3 }, &mut rng()).unwrap();
        if let ReparamState::Ka { u, v, u_aug, v_aug, s } = state {
            assert_eq!((u.rows(), u.cols()), (6, 4));
            assert_eq!((v.rows(), v.cols()), (4, 4));
            assert_eq!((u_aug.rows(), u_aug.cols()), (6, 3));
            assert_eq!((v_aug.rows(), v_aug.cols()), (4, 3));
            assert_eq!(s.len(), 7);
        } else {
            panic!("wrong variant");
        }
    }
}
