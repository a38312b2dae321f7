//! Named invariant suite behind the `verify` command: every property the
//! protocol relies on, each runnable in isolation and reporting pass/fail.

use std::time::Instant;

use crate::baselines::rm_prepare;
use crate::data::synth::{generate, SynthConfig};
use crate::data::Dataset;
use crate::linalg::{gram_identity_error, reconstruction_error, svd, truncate, Matrix};
use crate::netcore::{forward, init_params, Batch, Layer, ModelSpec};
use crate::protocol::{
    compact_refine, reconstitute, update_fraction, MethodConfig, PerLayer, RefineConfig,
    RefineSession, UpdatePackage,
};
use crate::reparam::param_count;
use crate::rng::Xoshiro256StarStar;

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub outcome: Result<(), String>,
    pub millis: u128,
}

/// Runs every property and reports results in order.
pub fn run_all() -> Vec<PropertyResult> {
    let checks: Vec<(&'static str, fn() -> Result<(), String>)> = vec![
        ("svd-reconstruction", svd_reconstruction),
        ("svd-orthonormality", svd_orthonormality),
        ("svd-determinism", svd_determinism),
        ("svd-canonicalisation-idempotent", svd_canonicalisation),
        ("truncate-eckart-young", truncate_eckart_young),
        ("gradient-dense", gradient_dense),
        ("gradient-lra", || gradient_for_method(method_lra())),
        ("gradient-ml", || gradient_for_method(method_ml())),
        ("gradient-ka", || gradient_for_method(method_ka())),
        ("gradient-lru", || gradient_for_method(method_lru())),
        ("frozen-buffer-immutability", frozen_buffers),
        ("rm-mask-exactness", rm_mask_exactness),
        ("param-count-exactness", param_count_exactness),
        ("package-round-trip", package_round_trip),
        ("package-corruption-rejected", package_corruption),
        ("end-to-end-equivalence", end_to_end_equivalence),
        ("seed-reproducibility", seed_reproducibility),
        ("subset-nestedness", subset_nestedness),
        ("update-fraction-monotonic", update_fraction_monotonic),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = f();
            PropertyResult {
                name,
                outcome,
                millis: start.elapsed().as_millis(),
            }
        })
        .collect()
}

fn fail(msg: impl Into<String>) -> Result<(), String> {
    Err(msg.into())
}

fn random_matrix(rng: &mut Xoshiro256StarStar, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

fn svd_cases() -> Vec<Matrix> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(2001);
    let mut cases = Vec::new();
    for _ in 0..40 {
        let rows = rng.below(20) as usize + 1;
        let cols = rng.below(24) as usize + 1;
        cases.push(random_matrix(&mut rng, rows, cols));
    }
    cases.push(Matrix::diag(&[3.0, 2.0, 1.0]));
    cases.push(Matrix::zeros(4, 3));
    cases
}

fn svd_reconstruction() -> Result<(), String> {
    for (idx, a) in svd_cases().iter().enumerate() {
        let f = svd(a).map_err(|e| format!("case {idx}: {e}"))?;
        let err = reconstruction_error(a, &f);
        if err > 1e-9 {
            return fail(format!("case {idx}: reconstruction error {err}"));
        }
    }
    Ok(())
}

fn svd_orthonormality() -> Result<(), String> {
    for (idx, a) in svd_cases().iter().enumerate() {
        let f = svd(a).map_err(|e| format!("case {idx}: {e}"))?;
        let eu = gram_identity_error(&f.u);
        let ev = gram_identity_error(&f.v);
        if eu > 1e-10 || ev > 1e-10 {
            return fail(format!("case {idx}: gram deviation u={eu} v={ev}"));
        }
        if f.s.windows(2).any(|w| w[0] < w[1]) {
            return fail(format!("case {idx}: singular values not sorted"));
        }
    }
    Ok(())
}

fn svd_determinism() -> Result<(), String> {
    for (idx, a) in svd_cases().iter().enumerate() {
        let f1 = svd(a).map_err(|e| e.to_string())?;
        let f2 = svd(a).map_err(|e| e.to_string())?;
        if f1.u.data() != f2.u.data() || f1.s != f2.s || f1.v.data() != f2.v.data() {
            return fail(format!("case {idx}: two runs differ bitwise"));
        }
    }
    Ok(())
}

fn svd_canonicalisation() -> Result<(), String> {
    for (idx, a) in svd_cases().iter().enumerate() {
        let mut f = svd(a).map_err(|e| e.to_string())?;
        let (u, v) = (f.u.data().to_vec(), f.v.data().to_vec());
        crate::linalg::canonicalise(&mut f);
        if f.u.data() != u.as_slice() || f.v.data() != v.as_slice() {
            return fail(format!("case {idx}: canonicalisation not idempotent"));
        }
    }
    Ok(())
}

fn truncate_eckart_young() -> Result<(), String> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(2002);
    let a = random_matrix(&mut rng, 8, 6);
    let f = svd(&a).map_err(|e| e.to_string())?;
    for r in [1usize, 2, 4] {
        let (l, rm) = truncate(&f, r).map_err(|e| e.to_string())?;
        let best = l.matmul(&rm).map_err(|e| e.to_string())?;
        let best_err = frob_diff(&a, &best);
        for _ in 0..100 {
            let x = random_matrix(&mut rng, 8, r);
            let y = random_matrix(&mut rng, r, 6);
            let b = x.matmul(&y).map_err(|e| e.to_string())?;
            if best_err > frob_diff(&a, &b) + 1e-9 {
                return fail(format!("rank {r}: a random competitor beat the SVD"));
            }
        }
    }
    Ok(())
}

fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Three-targeted-layer net small enough for exhaustive finite differences.
pub fn fd_spec() -> ModelSpec {
    ModelSpec {
        input: (1, 6, 6),
        num_classes: 3,
        layers: vec![
            Layer::Conv2D {
                c_in: 1,
                c_out: 2,
                k_h: 3,
                k_w: 3,
                stride: 1,
                padding: 1,
                has_bias: true,
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv2D {
                c_in: 2,
                c_out: 3,
                k_h: 2,
                k_w: 2,
                stride: 1,
                padding: 0,
                has_bias: true,
            },
            Layer::Relu,
            Layer::Flatten,
            Layer::Fc {
                d_in: 12,
                d_out: 3,
                has_bias: true,
            },
        ],
    }
}

pub fn fd_batch(n: usize) -> Batch {
    let mut rng = Xoshiro256StarStar::seed_from_u64(2003);
    let mut images = Vec::with_capacity(n * 36);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..36 {
            images.push(rng.uniform(0.0, 1.0));
        }
        labels.push(rng.below(3) as usize);
    }
    Batch {
        n,
        c: 1,
        h: 6,
        w: 6,
        images,
        labels,
    }
}

/// Compares analytic factor gradients against central finite differences of
/// the session loss. `sabotage` lets a deliberate error be injected to prove
/// the check can fail.
pub fn check_session_gradients(
    method: MethodConfig,
    sabotage: Option<f64>,
) -> Result<usize, String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 41);
    let mut config = RefineConfig::new(method);
    config.seed = 17;
    let mut session =
        RefineSession::new(&spec, &theta1, &config).map_err(|e| e.to_string())?;
    let batch = fd_batch(5);
    let (_, mut grads) = session
        .loss_and_factor_grads(&batch)
        .map_err(|e| e.to_string())?;
    if let Some(delta) = sabotage {
        if let Some(g) = grads.values_mut().next() {
            g[0] += delta;
        }
    }
    let names: Vec<String> = grads.keys().cloned().collect();
    let eps = 1e-5;
    let mut checked = 0usize;
    for name in names {
        let len = session.factors().get(&name).expect("graded entry").data.len();
        for idx in 0..len {
            let original = session.factors().get(&name).unwrap().data[idx];
            session.factors_mut().get_mut(&name).unwrap().data[idx] = original + eps;
            let plus = session.loss(&batch).map_err(|e| e.to_string())?;
            session.factors_mut().get_mut(&name).unwrap().data[idx] = original - eps;
            let minus = session.loss(&batch).map_err(|e| e.to_string())?;
            session.factors_mut().get_mut(&name).unwrap().data[idx] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[&name][idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            if (analytic - numeric).abs() / denom > 1e-4 {
                return Err(format!(
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn method_lra() -> MethodConfig {
    MethodConfig::Lra {
        ranks: PerLayer::uniform(2),
    }
}

fn method_ml() -> MethodConfig {
    MethodConfig::Ml {
        ranks: PerLayer::uniform(2),
    }
}

fn method_ka() -> MethodConfig {
    MethodConfig::Ka {
        augs: PerLayer::uniform(1),
    }
}

fn method_lru() -> MethodConfig {
    MethodConfig::Lru {
        ranks: PerLayer::uniform(1),
    }
}

fn gradient_for_method(method: MethodConfig) -> Result<(), String> {
    check_session_gradients(method, None).map(|_| ())
}

fn gradient_dense() -> Result<(), String> {
    // Dense training path: every weight and bias scalar by finite
    // differences.
    let spec = fd_spec();
    let params = init_params(&spec, 42);
    let batch = fd_batch(5);
    let (_, grads) =
        crate::netcore::loss_and_grad(&spec, &params, &batch).map_err(|e| e.to_string())?;
    let eps = 1e-5;
    for (name, g) in &grads {
        for idx in 0..g.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data[idx] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data[idx] -= eps;
            let lp = loss_of(&spec, &plus, &batch)?;
            let lm = loss_of(&spec, &minus, &batch)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = g[idx];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            if (analytic - numeric).abs() / denom > 1e-4 {
                return fail(format!(
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
                ));
            }
        }
    }
    Ok(())
}

fn loss_of(
    spec: &ModelSpec,
    params: &crate::netcore::ParamStore,
    batch: &Batch,
) -> Result<f64, String> {
    let logits = forward(spec, params, batch).map_err(|e| e.to_string())?;
    Ok(crate::protocol::mean_cross_entropy(&logits, &batch.labels))
}

fn toy_refine_data(n: usize) -> Dataset {
    let cfg = SynthConfig {
        train: n,
        test: 1,
        ..SynthConfig::default()
    };
    let (full, _) = generate(&cfg);
    let mut images = Vec::with_capacity(n * 36);
    for s in 0..n {
        let img = full.image(s);
        for y in 0..6 {
            for x in 0..6 {
                images.push(img[(y + 11) * 28 + (x + 11)]);
            }
        }
    }
    Dataset {
        n,
        c: 1,
        h: 6,
        w: 6,
        images,
        labels: full.labels[..n].iter().map(|l| l % 3).collect(),
        num_classes: 3,
    }
}

fn all_methods() -> Vec<MethodConfig> {
    vec![
        method_lra(),
        method_ml(),
        method_ka(),
        MethodConfig::Rm { p: 0.2 },
        method_lru(),
    ]
}

fn frozen_buffers() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 43);
    let data = toy_refine_data(32);
    for method in [method_ml(), method_ka(), method_lru()] {
        let name = method.tag().name();
        let mut config = RefineConfig::new(method);
        config.seed = 5;
        config.epochs = 0;
        let before = compact_refine(&spec, &theta1, &data, &config)
            .map_err(|e| e.to_string())?
            .factors
            .frozen_digest();
        config.epochs = 2;
        let after = compact_refine(&spec, &theta1, &data, &config)
            .map_err(|e| e.to_string())?
            .factors
            .frozen_digest();
        if before != after {
            return fail(format!("{name}: frozen buffers changed during refinement"));
        }
    }
    Ok(())
}

fn rm_mask_exactness() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 44);
    let total = theta1.learnable_scalar_count();
    for p in [0.1, 0.25, 1.0] {
        let plan = rm_prepare(&theta1, 7, p).map_err(|e| e.to_string())?;
        if plan.selected != (p * total as f64).round() as usize {
            return fail(format!("p={p}: selected {} scalars", plan.selected));
        }
    }
    let data = toy_refine_data(32);
    let mut config = RefineConfig::new(MethodConfig::Rm { p: 0.2 });
    config.seed = 8;
    config.epochs = 2;
    let outcome = compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
    let plan = rm_prepare(&theta1, 8, 0.2).map_err(|e| e.to_string())?;
    for (name, mask) in &plan.masks {
        let before = &theta1.get(name).unwrap().data;
        let after = &outcome.refined.get(name).unwrap().data;
        for ((&b, &a), &selected) in before.iter().zip(after.iter()).zip(mask.iter()) {
            if !selected && a.to_bits() != b.to_bits() {
                return fail(format!("unselected scalar moved in {name}"));
            }
        }
    }
    Ok(())
}

fn param_count_exactness() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 45);
    let data = toy_refine_data(8);
    let targeted = spec.targeted();
    for method in [method_lra(), method_ml(), method_ka()] {
        let mut config = RefineConfig::new(method.clone());
        config.epochs = 0;
        let outcome = compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
        let expected: usize = targeted
            .iter()
            .map(|t| {
                let rm = match &method {
                    MethodConfig::Lra { ranks } => crate::reparam::ReparamMethod::Lra {
                        rank: ranks.get(t.id),
                    },
                    MethodConfig::Ml { ranks } => crate::reparam::ReparamMethod::Ml {
                        rank: ranks.get(t.id),
                    },
                    MethodConfig::Ka { augs } => crate::reparam::ReparamMethod::Ka {
                        aug: augs.get(t.id),
                    },
                    _ => unreachable!(),
                };
                param_count(rm, t.o, t.i, t.has_bias)
            })
            .sum();
        if outcome.package.scalar_count() != expected {
            return fail(format!(
                "{}: packaged {} scalars, formula says {expected}",
                method.tag().name(),
                outcome.package.scalar_count()
            ));
        }
    }
    Ok(())
}

fn package_round_trip() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 46);
    let data = toy_refine_data(8);
    for method in all_methods() {
        let mut config = RefineConfig::new(method);
        config.epochs = 1;
        config.batch_size = 8;
        let outcome = compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
        let bytes = outcome.package.serialize();
        let decoded = UpdatePackage::deserialize(&bytes).map_err(|e| e.to_string())?;
        if decoded != outcome.package || decoded.serialize() != bytes {
            return fail("round trip is not byte-identical");
        }
    }
    Ok(())
}

fn package_corruption() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 47);
    let data = toy_refine_data(8);
    let mut config = RefineConfig::new(method_ka());
    config.epochs = 0;
    let outcome = compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
    let bytes = outcome.package.serialize();
    let mut corrupt = bytes.clone();
    corrupt[bytes.len() / 2] ^= 0x20;
    if UpdatePackage::deserialize(&corrupt).is_ok() {
        return fail("corrupted payload was accepted");
    }
    Ok(())
}

fn end_to_end_equivalence() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 48);
    let data = toy_refine_data(48);
    let batch = toy_refine_data(12).gather(&(0..12).collect::<Vec<_>>());
    for method in all_methods() {
        let name = method.tag().name();
        let mut config = RefineConfig::new(method);
        config.epochs = 2;
        config.batch_size = 12;
        config.seed = 19;
        let outcome = compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
        let theta2 =
            reconstitute(&spec, &theta1, &outcome.package).map_err(|e| e.to_string())?;
        let server = forward(&spec, &outcome.refined, &batch).map_err(|e| e.to_string())?;
        let edge = forward(&spec, &theta2, &batch).map_err(|e| e.to_string())?;
        let diff = server.max_abs_diff(&edge);
        if diff > 1e-6 {
            return fail(format!("{name}: logits differ by {diff}"));
        }
    }
    Ok(())
}

fn seed_reproducibility() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 49);
    let data = toy_refine_data(24);
    let mut config = RefineConfig::new(method_ka());
    config.epochs = 2;
    config.batch_size = 8;
    config.seed = 23;
    let a = compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
    let b = compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
    if a.package.serialize() != b.package.serialize() {
        return fail("identical config and seed produced different package bytes");
    }
    Ok(())
}

fn subset_nestedness() -> Result<(), String> {
    let data = toy_refine_data(100);
    let small = data.subset_indices(0.1, 3).map_err(|e| e.to_string())?;
    let large = data.subset_indices(0.5, 3).map_err(|e| e.to_string())?;
    if large[..small.len()] != small[..] {
        return fail("smaller subset is not a prefix of the larger one");
    }
    Ok(())
}

fn update_fraction_monotonic() -> Result<(), String> {
    let spec = fd_spec();
    let theta1 = init_params(&spec, 50);
    let data = toy_refine_data(8);
    let series: Vec<(&str, Vec<MethodConfig>)> = vec![
        (
            "lra",
            (1..=2)
                .map(|r| MethodConfig::Lra {
                    ranks: PerLayer::uniform(r),
                })
                .collect(),
        ),
        (
            "ml",
            (1..=2)
                .map(|r| MethodConfig::Ml {
                    ranks: PerLayer::uniform(r),
                })
                .collect(),
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
            [0.1, 0.2, 0.5]
                .into_iter()
                .map(|p| MethodConfig::Rm { p })
                .collect(),
        ),
        (
            "lru",
            (1..=2)
                .map(|r| MethodConfig::Lru {
                    ranks: PerLayer::uniform(r),
                })
                .collect(),
        ),
    ];
    for (name, methods) in series {
        let mut prev = None;
        for method in methods {
            let mut config = RefineConfig::new(method);
            config.epochs = 0;
            let outcome =
                compact_refine(&spec, &theta1, &data, &config).map_err(|e| e.to_string())?;
            let f = update_fraction(&outcome.package, &theta1);
            if let Some(p) = prev {
                if f <= p {
                    return fail(format!("{name}: fraction not strictly increasing"));
                }
            }
            prev = Some(f);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_properties_pass() {
        let results = run_all();
        assert!(results.len() >= 12, "only {} properties", results.len());
        for r in &results {
            assert!(r.outcome.is_ok(), "{}: {:?}", r.name, r.outcome);
        }
    }

    #[test]
    fn injected_gradient_bug_is_caught_by_name() {
        let err = check_session_gradients(method_lra(), Some(0.05)).unwrap_err();
        assert!(err.contains("analytic"), "unexpected failure message: {err}");
    }

    use crate::netcore::{Grads, ParamClass};

    #[test]
    fn frozen_entries_never_receive_gradients() {
        // The learnable/frozen partition: the grads produced equal exactly
        // the declared learnable set, for all methods.
        let spec = fd_spec();
        let theta1 = init_params(&spec, 51);
        let batch = fd_batch(4);
        for method in all_methods() {
            let config = RefineConfig::new(method);
            let mut session = RefineSession::new(&spec, &theta1, &config).unwrap();
            let (_, grads) = session.loss_and_factor_grads(&batch).unwrap();
            let learnable: Vec<&String> = session
                .factors()
                .iter()
                .filter(|(_, e)| e.class == ParamClass::Learnable)
                .map(|(n, _)| n)
                .collect();
            assert_eq!(grads.len(), learnable.len());
            for name in learnable {
                assert!(grads.contains_key(name), "missing gradient for {name}");
            }
        }
    }

    #[test]
    fn grads_type_is_reexported_consistently() {
        let _: Grads = Grads::new();
    }
}
