//! Deterministic synthetic digit corpus.
//!
//! Renders 28x28 grayscale digits from stroke skeletons with seeded
//! per-sample shape jitter, affine distortion, stroke-width variation and
//! pixel noise. The corpus stands in for handwritten-digit data in
//! environments without the real files: the generator writes standard IDX
//! files, so the ingestion path is identical either way. Per-sample streams
//! derive from (seed, sample index), which makes generation order-free and
//! reproducible.

use std::path::Path;

use rayon::prelude::*;

use super::{write_idx, DataError, Dataset, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use crate::rng::{derive_seed, tags, Xoshiro256StarStar};

const SIDE: usize = 28;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
    /// Control-point jitter in unit-box coordinates.
    pub jitter: f64,
    /// Max rotation in radians.
    pub rotation: f64,
    /// Scale range around 1.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Max shear coefficient.
    pub shear: f64,
    /// Max translation in unit-box coordinates.
    pub translate: f64,
    /// Stroke half-width range in pixels.
    pub stroke_min: f64,
    pub stroke_max: f64,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 20080,
            train: 60_000,
            test: 10_000,
            jitter: 0.050,
            rotation: 0.30,
            scale_min: 0.78,
            scale_max: 1.18,
            shear: 0.28,
            translate: 0.10,
            stroke_min: 0.55,
            stroke_max: 1.35,
            noise: 0.06,
        }
    }
}

type Quad = [(f64, f64); 3];

/// Quadratic-Bezier skeletons per digit, in a unit box with y pointing down.
fn glyph(digit: usize) -> Vec<Quad> {
    match digit {
        0 => vec![
            [(0.50, 0.08), (0.84, 0.10), (0.80, 0.50)],
            [(0.80, 0.50), (0.84, 0.90), (0.50, 0.92)],
            [(0.50, 0.92), (0.16, 0.90), (0.20, 0.50)],
            [(0.20, 0.50), (0.16, 0.10), (0.50, 0.08)],
        ],
        1 => vec![
            [(0.34, 0.24), (0.46, 0.14), (0.56, 0.08)],
            [(0.56, 0.08), (0.56, 0.50), (0.56, 0.92)],
        ],
        2 => vec![
            [(0.22, 0.28), (0.28, 0.04), (0.54, 0.08)],
            [(0.54, 0.08), (0.82, 0.12), (0.72, 0.38)],
            [(0.72, 0.38), (0.50, 0.62), (0.22, 0.90)],
            [(0.22, 0.90), (0.50, 0.90), (0.80, 0.90)],
        ],
        3 => vec![
            [(0.26, 0.14), (0.58, 0.02), (0.70, 0.24)],
            [(0.70, 0.24), (0.74, 0.44), (0.46, 0.50)],
            [(0.46, 0.50), (0.80, 0.54), (0.74, 0.74)],
            [(0.74, 0.74), (0.66, 0.96), (0.26, 0.86)],
        ],
        4 => vec![
            [(0.62, 0.08), (0.40, 0.36), (0.18, 0.64)],
            [(0.18, 0.64), (0.50, 0.64), (0.84, 0.64)],
            [(0.62, 0.08), (0.62, 0.50), (0.62, 0.92)],
        ],
        5 => vec![
            [(0.74, 0.10), (0.50, 0.10), (0.28, 0.10)],
            [(0.28, 0.10), (0.27, 0.29), (0.26, 0.46)],
            [(0.26, 0.46), (0.74, 0.40), (0.73, 0.66)],
            [(0.73, 0.66), (0.70, 0.94), (0.26, 0.86)],
        ],
        6 => vec![
            [(0.66, 0.08), (0.36, 0.18), (0.29, 0.52)],
            [(0.29, 0.52), (0.24, 0.92), (0.52, 0.90)],
            [(0.52, 0.90), (0.78, 0.88), (0.72, 0.64)],
            [(0.72, 0.64), (0.66, 0.44), (0.30, 0.54)],
        ],
        7 => vec![
            [(0.20, 0.10), (0.50, 0.10), (0.80, 0.10)],
            [(0.80, 0.10), (0.56, 0.50), (0.42, 0.92)],
        ],
        8 => vec![
            [(0.50, 0.08), (0.76, 0.12), (0.68, 0.30)],
            [(0.68, 0.30), (0.60, 0.46), (0.50, 0.48)],
            [(0.50, 0.48), (0.40, 0.46), (0.32, 0.30)],
            [(0.32, 0.30), (0.24, 0.12), (0.50, 0.08)],
            [(0.50, 0.48), (0.80, 0.56), (0.70, 0.78)],
            [(0.70, 0.78), (0.62, 0.96), (0.50, 0.92)],
            [(0.50, 0.92), (0.30, 0.94), (0.28, 0.74)],
            [(0.28, 0.74), (0.24, 0.56), (0.50, 0.48)],
        ],
        9 => vec![
            [(0.64, 0.30), (0.62, 0.08), (0.44, 0.10)],
            [(0.44, 0.10), (0.22, 0.12), (0.28, 0.34)],
            [(0.28, 0.34), (0.34, 0.52), (0.64, 0.42)],
            [(0.64, 0.30), (0.68, 0.60), (0.58, 0.92)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

fn render(digit: usize, cfg: &SynthConfig, rng: &mut Xoshiro256StarStar) -> Vec<u8> {
    let jitter = cfg.jitter;
    let mut quads = glyph(digit);
    for quad in quads.iter_mut() {
        for point in quad.iter_mut() {
            point.0 += rng.uniform(-jitter, jitter);
            point.1 += rng.uniform(-jitter, jitter);
        }
    }

    let theta = rng.uniform(-cfg.rotation, cfg.rotation);
    let scale_x = rng.uniform(cfg.scale_min, cfg.scale_max);
    let scale_y = rng.uniform(cfg.scale_min, cfg.scale_max);
    let shear = rng.uniform(-cfg.shear, cfg.shear);
    let tx = rng.uniform(-cfg.translate, cfg.translate);
    let ty = rng.uniform(-cfg.translate, cfg.translate);
    let (sin, cos) = (theta.sin(), theta.cos());

    // Unit box -> pixel coordinates: distort about the glyph centre, then
    // place into a 20px box centred in the 28px canvas.
    let map = |x: f64, y: f64| -> (f64, f64) {
        let (ux, uy) = (x - 0.5, y - 0.5);
        let (ux, uy) = (ux + shear * uy, uy);
        let (ux, uy) = (ux * scale_x, uy * scale_y);
        let (ux, uy) = (cos * ux - sin * uy, sin * ux + cos * uy);
        let (ux, uy) = (ux + 0.5 + tx, uy + 0.5 + ty);
        (4.0 + 20.0 * ux, 4.0 + 20.0 * uy)
    };

    // Flatten the curves to short line pieces in pixel space.
    const STEPS: usize = 14;
    let mut pieces: Vec<((f64, f64), (f64, f64))> = Vec::new();
    for quad in &quads {
        let mut prev = map(quad[0].0, quad[0].1);
        for s in 1..=STEPS {
            let t = s as f64 / STEPS as f64;
            let omt = 1.0 - t;
            let x = omt * omt * quad[0].0 + 2.0 * omt * t * quad[1].0 + t * t * quad[2].0;
            let y = omt * omt * quad[0].1 + 2.0 * omt * t * quad[1].1 + t * t * quad[2].1;
            let cur = map(x, y);
            pieces.push((prev, cur));
            prev = cur;
        }
    }

    let half_width = rng.uniform(cfg.stroke_min, cfg.stroke_max);
    let falloff = 0.9;
    let mut canvas = vec![0.0f64; SIDE * SIDE];
    let reach = half_width + falloff;
    for &((x0, y0), (x1, y1)) in &pieces {
        let min_x = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let max_x = (x0.max(x1) + reach).ceil().min((SIDE - 1) as f64) as usize;
        let min_y = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let max_y = (y0.max(y1) + reach).ceil().min((SIDE - 1) as f64) as usize;
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len_sq = dx * dx + dy * dy;
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let (fx, fy) = (px as f64, py as f64);
                let t = if len_sq > 0.0 {
                    (((fx - x0) * dx + (fy - y0) * dy) / len_sq).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (x0 + t * dx, y0 + t * dy);
                let dist = ((fx - cx) * (fx - cx) + (fy - cy) * (fy - cy)).sqrt();
                let v = if dist <= half_width {
                    1.0
                } else {
                    (1.0 - (dist - half_width) / falloff).max(0.0)
                };
                let idx = py * SIDE + px;
                if v > canvas[idx] {
                    canvas[idx] = v;
                }
            }
        }
    }

    let contrast = rng.uniform(0.72, 1.0);
    let noise = cfg.noise;
    canvas
        .iter()
        .map(|&v| {
            let mut v = v * contrast;
            if noise > 0.0 {
                v += rng.uniform(-noise, noise);
            }
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn generate_split(cfg: &SynthConfig, count: usize, index_offset: u64) -> Dataset {
    let base = derive_seed(cfg.seed, tags::SYNTH_DATA);
    let samples: Vec<(Vec<u8>, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(base, index_offset + i as u64));
            let digit = rng.below(10) as usize;
            (render(digit, cfg, &mut rng), digit)
        })
        .collect();
    let mut images = Vec::with_capacity(count * SIDE * SIDE);
    let mut labels = Vec::with_capacity(count);
    for (pixels, label) in samples {
        images.extend(pixels.iter().map(|&b| b as f64 / 255.0));
        labels.push(label);
    }
    Dataset {
        n: count,
        c: 1,
        h: SIDE,
        w: SIDE,
        images,
        labels,
        num_classes: 10,
    }
}

/// Generates the train and test splits. Sample streams are indexed globally,
/// so the two splits are disjoint draws from the same distribution.
pub fn generate(cfg: &SynthConfig) -> (Dataset, Dataset) {
    let train = generate_split(cfg, cfg.train, 0);
    let test = generate_split(cfg, cfg.test, cfg.train as u64);
    (train, test)
}

/// Generates and writes the corpus into `dir` with the standard file names.
pub fn write_standard_files(dir: &Path, cfg: &SynthConfig) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let (train, test) = generate(cfg);
    write_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS), &train)?;
    write_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), &test)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            train: 64,
            test: 16,
            ..SynthConfig::default()
        };
        let (a_train, a_test) = generate(&cfg);
        let (b_train, b_test) = generate(&cfg);
        assert_eq!(a_train.images, b_train.images);
        assert_eq!(a_train.labels, b_train.labels);
        assert_eq!(a_test.images, b_test.images);
        assert_eq!(a_test.labels, b_test.labels);
    }

    #[test]
    fn splits_differ_and_cover_classes() {
        let cfg = SynthConfig {
            train: 400,
            test: 400,
            ..SynthConfig::default()
        };
        let (train, test) = generate(&cfg);
        assert_ne!(train.images[..784], test.images[..784]);
        assert!(train.covers_all_classes());
        assert!(test.covers_all_classes());
    }

    #[test]
    fn pixels_are_quantised_to_byte_levels() {
        let cfg = SynthConfig {
            train: 8,
            test: 1,
            ..SynthConfig::default()
        };
        let (train, _) = generate(&cfg);
        for &v in &train.images {
            let byte = (v * 255.0).round();
            assert!((v - byte / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_through_idx_files_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train: 32,
            test: 8,
            ..SynthConfig::default()
        };
        write_standard_files(dir.path(), &cfg).unwrap();
        let (train, test) = super::super::load_dir(dir.path()).unwrap();
        let (gen_train, gen_test) = generate(&cfg);
        assert_eq!(train.images, gen_train.images);
        assert_eq!(test.labels, gen_test.labels);
    }
}
