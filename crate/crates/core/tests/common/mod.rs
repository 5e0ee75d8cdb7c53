//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ipr_core::sampler::standard_normal;
use ipr_core::schedule::{forward_noise, Layout, NoiseLevelVector, NoiseSchedule, RegionSample};
use ipr_core::tasks::even_pixels::{EvenPixelsImage, HUE_BINS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sudoku validity via per-unit bitmasks, written without the crate's checker.
pub fn bitmask_valid(cells: &[u8], order: usize) -> bool {
    let side = order * order;
    let full = (1u32 << side) - 1;
    let mut rows = vec![0u32; side];
    let mut cols = vec![0u32; side];
    let mut boxes = vec![0u32; side];
    for r in 0..side {
        for c in 0..side {
            let d = cells[r * side + c];
            if d == 0 || d as usize > side {
                return false;
            }
            let bit = 1 << (d - 1);
            rows[r] |= bit;
            cols[c] |= bit;
            boxes[(r / order) * order + c / order] |= bit;
        }
    }
    rows.iter().chain(&cols).chain(&boxes).all(|m| *m == full)
}

/// All valid 4x4 grids, by trying every choice of four row permutations.
pub fn enumerate_4x4() -> Vec<Vec<u8>> {
    let mut perms = Vec::new();
    for a in 1..=4u8 {
        for b in 1..=4u8 {
            for c in 1..=4u8 {
                for d in 1..=4u8 {
                    let p = [a, b, c, d];
                    if (1..=4u8).all(|x| p.contains(&x)) {
                        perms.push(p);
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for r0 in &perms {
        for r1 in &perms {
            for r2 in &perms {
                for r3 in &perms {
                    let g: Vec<u8> = [r0, r1, r2, r3].iter().flat_map(|r| r.iter().copied()).collect();
                    if bitmask_valid(&g, 2) {
                        out.push(g);
                    }
                }
            }
        }
    }
    out
}

/// Pixels closer (circularly, in histogram bins) to the second peak than to
/// the first. Peaks: the fullest bin (lowest index on ties), then the fullest
/// bin at least `sep` bins away from it.
pub fn nearest_peak_count(image: &EvenPixelsImage, sep: usize) -> Option<usize> {
    let bin = |h: f64| ((h.rem_euclid(1.0) * HUE_BINS as f64) as usize).min(HUE_BINS - 1);
    let dist = |a: usize, b: usize| {
        let d = if a > b { a - b } else { b - a };
        d.min(HUE_BINS - d)
    };
    let mut hist = vec![0usize; HUE_BINS];
    for p in image.pixels() {
        hist[bin(p.h)] += 1;
    }
    let mut p1 = 0;
    for b in 0..HUE_BINS {
        if hist[b] > hist[p1] {
            p1 = b;
        }
    }
    let mut p2: Option<usize> = None;
    for b in 0..HUE_BINS {
        if dist(b, p1) >= sep && hist[b] > 0 && p2.is_none_or(|q| hist[b] > hist[q]) {
            p2 = Some(b);
        }
    }
    let p2 = p2?;
    Some(
        image
            .pixels()
            .iter()
            .filter(|p| {
                let b = bin(p.h);
                dist(b, p2) < dist(b, p1)
            })
            .count(),
    )
}

pub mod gaussian {
    use ipr_core::denoiser::{train, DenoiserModel, ModelConfig, TrainConfig};
    use ipr_core::schedule::{Layout, NoiseLevelVector, RegionSample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    pub const MEAN: f64 = 0.5;
    pub const STD: f64 = 0.5;

    /// `E[eps | x_t]` for `x0 ~ N(MEAN, STD^2)` under `alpha = 1 - t`, `sigma = t`.
    pub fn optimal_eps(x: f64, t: f64) -> f64 {
        let (a, s) = (1.0 - t, t);
        s * (x - a * MEAN) / (a * a * STD * STD + s * s)
    }

    /// 50 `(x_t, t)` points: ten levels times five marginal quantiles.
    pub fn test_grid() -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for i in 0..10 {
            let t = 0.05 + 0.1 * i as f64;
            let (a, s) = (1.0 - t, t);
            let sd = (a * a * STD * STD + s * s).sqrt();
            for z in [-1.5, -0.75, 0.0, 0.75, 1.5] {
                pts.push((a * MEAN + z * sd, t));
            }
        }
        pts
    }

    /// Trains a one-region, one-dimensional denoiser and returns its mean
    /// squared distance from the optimal noise prediction on the test grid.
    pub fn trained_mse(seed: u64, steps: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(MEAN, STD).unwrap();
        let data: Vec<RegionSample<f64>> = (0..4096)
            .map(|_| RegionSample::clean(vec![normal.sample(&mut rng)], 1, Layout::flat(1)).unwrap())
            .collect();
        let cfg = ModelConfig {
            data_std: (MEAN * MEAN + STD * STD).sqrt(),
            heads: 1,
            ..ModelConfig::new(1, 1, 16, 1)
        };
        let mut model = DenoiserModel::new(cfg, &mut rng).unwrap();
        let tc = TrainConfig {
            steps,
            batch_size: 128,
            learning_rate: 0.05,
            mix_weights: [0.5, 0.5, 0.0],
            seed,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &tc).unwrap();
        let grid = test_grid();
        grid.iter()
            .map(|&(x, t)| {
                let s = RegionSample::new(vec![x], 1, NoiseLevelVector::new(vec![t]).unwrap(), Layout::flat(1)).unwrap();
                (model.predict(&s).unwrap()[0] - optimal_eps(x, t)).powi(2)
            })
            .sum::<f64>()
            / grid.len() as f64
    }
}

/// Largest deviation, in standard errors, of the Monte-Carlo mean and variance
/// of `forward_noise` from `(alpha x0, sigma^2)`.
pub fn forward_worst_z(t: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = NoiseSchedule::linear();
    let x0 = RegionSample::clean(vec![0.8, -1.2], 2, Layout::flat(1)).unwrap();
    let levels = NoiseLevelVector::new(vec![t]).unwrap();
    let (a, s) = (1.0 - t, t);
    let mut worst = 0.0f64;
    for k in 0..2 {
        let xs: Vec<f64> = (0..draws)
            .map(|_| forward_noise(&sched, &x0, &levels, &standard_normal(2, &mut rng)).unwrap().as_slice()[k])
            .collect();
        let n = draws as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let mean_se = s / n.sqrt();
        let var_se = s * s * (2.0 / (n - 1.0)).sqrt();
        worst = worst
            .max((mean - a * x0.as_slice()[k]).abs() / mean_se)
            .max((var - s * s).abs() / var_se);
    }
    worst
}

pub mod mechanics {
    use ipr_core::denoiser::{DenoiserModel, ModelConfig};
    use ipr_core::refine::{iteration_cost, refine, subset_size, RefinementConfig};
    use ipr_core::sampler::{SchedulerConfig, SelectionPolicy};
    use ipr_core::schedule::{Layout, RegionSample};
    use rand::seq::index;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub const DIM: usize = 2;

    /// An all-zero model: refinement mechanics do not depend on its output.
    pub fn stub(n: usize) -> DenoiserModel<f64> {
        DenoiserModel::zeros(ModelConfig::new(n, DIM, 4, 1)).unwrap()
    }

    pub fn clean(n: usize, rng: &mut ChaCha8Rng) -> RegionSample<f64> {
        let data = (0..n * DIM).map(|_| StandardNormal.sample(rng)).collect();
        RegionSample::clean(data, DIM, Layout::flat(n)).unwrap()
    }

    pub fn config(ratio: f64, iterations: usize, condition: Vec<usize>, s: usize, omega: f64) -> RefinementConfig {
        RefinementConfig {
            resampling_ratio: ratio,
            iterations,
            condition,
            refine_scheduler: SchedulerConfig {
                steps_per_patch: s,
                overlap_ratio: omega,
                selection: SelectionPolicy::Random,
                ..SchedulerConfig::default()
            },
            ..RefinementConfig::default()
        }
    }

    /// `R ((m - 1) stride + S)` with `m = floor(ratio (n - c))` resampled regions.
    pub fn closed_form_calls(n: usize, c: usize, ratio: f64, r: usize, s: usize, omega: f64) -> usize {
        let m = (ratio * (n - c) as f64 + 1e-9).floor() as usize;
        if m == 0 {
            return 0;
        }
        let stride = (((1.0 - omega) * s as f64 - 1e-9).ceil() as usize).max(1);
        r * ((m - 1) * stride + s)
    }

    /// Refines a random clean sample with the stub model and checks every
    /// mechanical guarantee; the first violation is returned.
    pub fn check_refinement(
        n: usize,
        c: usize,
        ratio: f64,
        iterations: usize,
        s: usize,
        omega: f64,
        seed: u64,
    ) -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut condition = index::sample(&mut rng, n, c).into_vec();
        condition.sort_unstable();
        let x0 = clean(n, &mut rng);
        let cfg = config(ratio, iterations, condition.clone(), s, omega);
        let out = refine(&stub(n), &x0, &cfg, None, None, &mut rng).map_err(|e| e.to_string())?;
        let ctx = format!("n={n} c={c} ratio={ratio} R={iterations} S={s} omega={omega}");
        if out.snapshots.len() != iterations + 1 || out.subsets.len() != iterations {
            return Err(format!("{ctx}: wrong snapshot or subset count"));
        }
        for (k, m) in out.subsets.iter().enumerate() {
            if m.len() != subset_size(n - c, ratio) {
                return Err(format!("{ctx}: |M| = {}", m.len()));
            }
            if m.iter().any(|r| condition.contains(r)) {
                return Err(format!("{ctx}: subset meets the condition set"));
            }
            let (prev, next) = (&out.snapshots[k].1, &out.snapshots[k + 1].1);
            for r in (0..n).filter(|r| !m.contains(r)) {
                if prev.region(r).iter().zip(next.region(r)).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!("{ctx}: region {r} changed outside the subset"));
                }
            }
            if !next.is_clean() {
                return Err(format!("{ctx}: iteration {} left noisy regions", k + 1));
            }
        }
        if iterations == 0 && out.sample != x0 {
            return Err(format!("{ctx}: R = 0 changed the sample"));
        }
        let per_iteration = iteration_cost(n, c, ratio, &cfg.refine_scheduler);
        if out.ledger.per_iteration_calls.iter().any(|k| *k != per_iteration) {
            return Err(format!("{ctx}: per-iteration calls differ from the schedule"));
        }
        let want = closed_form_calls(n, c, ratio, iterations, s, omega);
        if out.ledger.refinement_calls != want {
            return Err(format!("{ctx}: {} calls, closed form {want}", out.ledger.refinement_calls));
        }
        Ok(())
    }
}

/// Disagreements between the crate's checker and the bitmask oracle over all
/// valid 4x4 grids plus `invalid` random fillings.
pub fn checker_disagreements(invalid: usize, seed: u64) -> usize {
    use ipr_core::tasks::sudoku::{check_sudoku_valid, SudokuGrid};
    use rand::Rng;
    let check = |g: &[u8]| check_sudoku_valid(&SudokuGrid::from_digits(2, g).unwrap()).unwrap().valid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let valid = enumerate_4x4().iter().filter(|g| !check(g)).count();
    let random = (0..invalid)
        .filter(|_| {
            let g: Vec<u8> = (0..16).map(|_| rng.random_range(1..=4)).collect();
            check(&g) != bitmask_valid(&g, 2)
        })
        .count();
    valid + random
}

/// Two hue clusters with jitter inside each; `h1` near the wrap point half the
/// time.
pub fn jittered_image(rng: &mut ChaCha8Rng) -> EvenPixelsImage {
    use ipr_core::tasks::even_pixels::{Hsv, PIXELS};
    use rand::Rng;
    let h1: f64 = if rng.random_bool(0.5) { rng.random_range(-0.05..0.05) } else { rng.random() };
    let h2 = h1 + rng.random_range(0.1..0.9);
    let count = rng.random_range(300..=724);
    let pixels = (0..PIXELS)
        .map(|i| {
            let base = if i < count { h1 } else { h2 };
            let h = (base + rng.random_range(-0.01..0.01)).rem_euclid(1.0);
            Hsv { h, s: 1.0, v: 0.7 }
        })
        .collect();
    EvenPixelsImage::new(pixels).unwrap()
}

/// Images on which the evaluator's cluster split disagrees with the
/// nearest-peak oracle.
pub fn evaluator_disagreements(images: usize, seed: u64) -> usize {
    use ipr_core::tasks::even_pixels::{eval_even_pixels, HALF, MIN_PEAK_SEPARATION};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..images)
        .filter(|_| {
            let img = jittered_image(&mut rng);
            let e = eval_even_pixels(&img);
            let want = nearest_peak_count(&img, MIN_PEAK_SEPARATION);
            e.peaks.map(|_| e.n_c1) != want || want.is_some_and(|n| e.pixel_error != n.abs_diff(HALF))
        })
        .count()
}
