//! Iterative partial refinement: repeatedly re-noise a random subset of a
//! finished sample and regenerate it conditioned on everything else.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::sampler::{
    build_schedule, run_jobs, standard_normal, Anchors, DenoiseJob, GenerationTrace, SchedulerConfig,
};
use crate::scalar::Scalar;
use crate::schedule::{RegionSample, T_MAX};
use crate::tasks::sudoku::SudokuGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Fresh standard-normal draws at every re-noise.
    #[default]
    Fresh,
    /// Reuse the noise each region started from in the initial generation.
    FixedInitial,
}

impl NoiseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::Fresh => "fresh",
            NoiseMode::FixedInitial => "fixed_initial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(NoiseMode::Fresh),
            "fixed_initial" => Ok(NoiseMode::FixedInitial),
            _ => Err(Error::Config(format!("unknown noise mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegionMode {
    #[default]
    RandomEachIteration,
    /// The subset drawn in the first iteration is reused for all later ones.
    FixedFirstIteration,
}

impl RegionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionMode::RandomEachIteration => "random",
            RegionMode::FixedFirstIteration => "fixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" | "random_each_iteration" => Ok(RegionMode::RandomEachIteration),
            "fixed" | "fixed_first_iteration" => Ok(RegionMode::FixedFirstIteration),
            _ => Err(Error::Config(format!("unknown region mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementConfig {
    pub resampling_ratio: f64,
    pub iterations: usize,
    pub noise_mode: NoiseMode,
    pub region_mode: RegionMode,
    /// Regions never resampled (puzzle hints).
    pub condition: Vec<usize>,
    pub refine_scheduler: SchedulerConfig,
    /// Keep a snapshot every this many iterations (the final one is always kept).
    pub snapshot_every: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            resampling_ratio: 0.25,
            iterations: 20,
            noise_mode: NoiseMode::Fresh,
            region_mode: RegionMode::RandomEachIteration,
            condition: Vec::new(),
            refine_scheduler: SchedulerConfig {
                steps_per_patch: 10,
                overlap_ratio: 0.8,
                ..SchedulerConfig::default()
            },
            snapshot_every: 1,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.resampling_ratio) {
            return Err(Error::Config(format!(
                "resampling_ratio must lie in [0, 1], got {}",
                self.resampling_ratio
            )));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot cadence must be at least 1".into()));
        }
        self.refine_scheduler.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ComputeLedger {
    /// Denoiser steps spent on the initial generation.
    pub baseline_calls: usize,
    pub refinement_calls: usize,
    pub per_iteration_calls: Vec<usize>,
}

impl ComputeLedger {
    fn record(&mut self, calls: usize) {
        self.refinement_calls += calls;
        self.per_iteration_calls.push(calls);
    }
}

/// `floor(ratio * free)`, robust to products that land a rounding error
/// below an integer (0.1 * 30 = 2.9999999999999996).
pub fn subset_size(free: usize, ratio: f64) -> usize {
    (ratio * free as f64 + 1e-9).floor() as usize
}

/// Steps one refinement iteration costs: the schedule length for `|M|` regions.
pub fn iteration_cost(n: usize, condition_len: usize, ratio: f64, scheduler: &SchedulerConfig) -> usize {
    build_schedule(subset_size(n.saturating_sub(condition_len), ratio), scheduler).total_steps
}

/// Draws the regions to resample at iteration `iteration` (0-based), sorted.
pub fn select_subset<R: Rng + ?Sized>(
    n: usize,
    condition: &[usize],
    ratio: f64,
    mode: RegionMode,
    rng: &mut R,
    previous: Option<&[usize]>,
    iteration: usize,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("resampling_ratio must lie in [0, 1], got {ratio}")));
    }
    let mut fixed = vec![false; n];
    for &c in condition {
        if c >= n {
            return Err(Error::Usage(format!("condition region {c} out of range")));
        }
        fixed[c] = true;
    }
    if mode == RegionMode::FixedFirstIteration && iteration > 0 {
        return match previous {
            Some(p) => Ok(p.to_vec()),
            None => Err(Error::Usage("fixed region mode needs the first iteration's subset".into())),
        };
    }
    let free: Vec<usize> = (0..n).filter(|r| !fixed[*r]).collect();
    let size = subset_size(free.len(), ratio);
    let mut subset: Vec<usize> = index::sample(rng, free.len(), size).into_iter().map(|i| free[i]).collect();
    subset.sort_unstable();
    Ok(subset)
}

/// Returns `sample` with the regions in `subset` replaced by noise at `T_MAX`.
pub fn renoise<T: Scalar, R: Rng + ?Sized>(
    sample: &RegionSample<T>,
    subset: &[usize],
    mode: NoiseMode,
    stored_noise: Option<&[T]>,
    rng: &mut R,
) -> Result<RegionSample<T>> {
    let d = sample.dim();
    let mut out = sample.clone();
    if let Some(&r) = subset.iter().find(|r| **r >= sample.n_regions()) {
        return Err(Error::Usage(format!("region {r} out of range")));
    }
    match mode {
        NoiseMode::Fresh => {
            for &r in subset {
                let z: Vec<T> = standard_normal(d, rng);
                out.region_mut(r).copy_from_slice(&z);
                out.set_level(r, T::lit(T_MAX))?;
            }
        }
        NoiseMode::FixedInitial => {
            let noise = stored_noise.ok_or_else(|| Error::Config("fixed_initial noise mode needs stored noise".into()))?;
            if noise.len() != sample.as_slice().len() {
                return Err(Error::Config(format!(
                    "stored noise has {} values, sample {}",
                    noise.len(),
                    sample.as_slice().len()
                )));
            }
            for &r in subset {
                out.region_mut(r).copy_from_slice(&noise[r * d..(r + 1) * d]);
                out.set_level(r, T::lit(T_MAX))?;
            }
        }
    }
    Ok(out)
}

/// One sample to refine.
#[derive(Clone, Debug)]
pub struct RefineJob<T> {
    /// Fully denoised starting point `x^(0)`.
    pub x0: RegionSample<T>,
    pub condition: Vec<usize>,
    /// Initial-generation noise for every region; needed for fixed-noise mode.
    pub stored_noise: Option<Vec<T>>,
    pub baseline_calls: usize,
}

#[derive(Clone, Debug)]
pub struct RefineOutput<T> {
    pub sample: RegionSample<T>,
    /// `(iteration, sample)` pairs, starting with iteration 0 (the input).
    pub snapshots: Vec<(usize, RegionSample<T>)>,
    pub ledger: ComputeLedger,
    /// The resampled subset of every iteration.
    pub subsets: Vec<Vec<usize>>,
}

/// One refinement iteration for a single sample; returns the new sample, the
/// subset used and the denoiser steps spent.
#[allow(clippy::too_many_arguments)]
pub fn refine_iteration<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    sample: &RegionSample<T>,
    config: &RefinementConfig,
    stored_noise: Option<&[T]>,
    previous: Option<&[usize]>,
    anchors: Option<&Anchors<'_, T>>,
    rng: &mut R,
    iteration: usize,
) -> Result<(RegionSample<T>, Vec<usize>, usize)> {
    config.validate()?;
    if !sample.is_clean() {
        return Err(Error::Usage("refinement needs a fully denoised sample".into()));
    }
    let subset = select_subset(
        sample.n_regions(),
        &config.condition,
        config.resampling_ratio,
        config.region_mode,
        rng,
        previous,
        iteration,
    )?;
    let noisy = renoise(sample, &subset, config.noise_mode, stored_noise, rng)?;
    let mut jobs = [DenoiseJob {
        sample: noisy,
        pending: subset.clone(),
        rng,
        trace: GenerationTrace::default(),
        record_steps: false,
    }];
    run_jobs(model, &config.refine_scheduler, anchors, &mut jobs)?;
    let [job] = jobs;
    Ok((job.sample, subset, job.trace.denoiser_calls))
}

/// Refines one sample for `config.iterations` iterations.
pub fn refine<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    x0: &RegionSample<T>,
    config: &RefinementConfig,
    stored_noise: Option<&[T]>,
    anchors: Option<&Anchors<'_, T>>,
    rng: &mut R,
) -> Result<RefineOutput<T>> {
    let job = RefineJob {
        x0: x0.clone(),
        condition: config.condition.clone(),
        stored_noise: stored_noise.map(<[T]>::to_vec),
        baseline_calls: 0,
    };
    let mut out = refine_batch(model, std::slice::from_ref(&job), config, anchors, &mut [rng])?;
    Ok(out.pop().expect("one output"))
}

/// Refines several samples in lockstep, each with its own generator and
/// condition set (`config.condition` is ignored in favour of the jobs').
/// Results are identical to refining each sample alone.
pub fn refine_batch<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    jobs: &[RefineJob<T>],
    config: &RefinementConfig,
    anchors: Option<&Anchors<'_, T>>,
    rngs: &mut [&mut R],
) -> Result<Vec<RefineOutput<T>>> {
    config.validate()?;
    if jobs.len() != rngs.len() {
        return Err(Error::Usage("one generator per refinement job required".into()));
    }
    for j in jobs {
        if !j.x0.is_clean() {
            return Err(Error::Usage("refinement needs a fully denoised sample".into()));
        }
    }
    let mut outs: Vec<RefineOutput<T>> = jobs
        .iter()
        .map(|j| RefineOutput {
            sample: j.x0.clone(),
            snapshots: vec![(0, j.x0.clone())],
            ledger: ComputeLedger {
                baseline_calls: j.baseline_calls,
                ..ComputeLedger::default()
            },
            subsets: Vec::new(),
        })
        .collect();

    for it in 0..config.iterations {
        let mut denoise = Vec::with_capacity(jobs.len());
        for ((job, out), rng) in jobs.iter().zip(&outs).zip(rngs.iter_mut()) {
            let subset = select_subset(
                job.x0.n_regions(),
                &job.condition,
                config.resampling_ratio,
                config.region_mode,
                &mut **rng,
                out.subsets.first().map(Vec::as_slice),
                it,
            )?;
            let noisy = renoise(&out.sample, &subset, config.noise_mode, job.stored_noise.as_deref(), &mut **rng)?;
            denoise.push(DenoiseJob {
                sample: noisy,
                pending: subset,
                rng: &mut **rng,
                trace: GenerationTrace::default(),
                record_steps: false,
            });
        }
        run_jobs(model, &config.refine_scheduler, anchors, &mut denoise)?;
        let last = it + 1 == config.iterations;
        for (out, dj) in outs.iter_mut().zip(denoise) {
            out.ledger.record(dj.trace.denoiser_calls);
            out.subsets.push(dj.pending);
            out.sample = dj.sample;
            if (it + 1) % config.snapshot_every == 0 || last {
                out.snapshots.push((it + 1, out.sample.clone()));
            }
        }
    }
    Ok(outs)
}

/// Swaps the region vectors of `k` disjoint pairs of non-condition cells
/// holding different digits. Returns the corrupted sample and the pairs.
pub fn corrupt_swap<T: Scalar, R: Rng + ?Sized>(
    sample: &RegionSample<T>,
    grid: &SudokuGrid,
    k: usize,
    condition: &[usize],
    rng: &mut R,
) -> Result<(RegionSample<T>, Vec<(usize, usize)>)> {
    if grid.len() != sample.n_regions() {
        return Err(Error::Dimension("grid and sample sizes differ".into()));
    }
    let digits = grid.digits()?;
    let mut free: Vec<usize> = (0..grid.len()).filter(|c| !condition.contains(c)).collect();
    if 2 * k > free.len() {
        return Err(Error::Usage(format!(
            "{k} swaps need {} free cells, only {} available",
            2 * k,
            free.len()
        )));
    }
    const MAX_RESTARTS: usize = 10_000;
    for _ in 0..MAX_RESTARTS {
        let (chosen, _) = free.partial_shuffle(rng, 2 * k);
        let pairs: Vec<(usize, usize)> = chosen.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        if pairs.iter().any(|(a, b)| digits[*a] == digits[*b]) {
            continue;
        }
        let mut out = sample.clone();
        for &(a, b) in &pairs {
            let va = sample.region(a).to_vec();
            out.region_mut(a).copy_from_slice(sample.region(b));
            out.region_mut(b).copy_from_slice(&va);
        }
        return Ok((out, pairs));
    }
    Err(Error::Usage(format!("could not find {k} disjoint differing-digit pairs")))
}
