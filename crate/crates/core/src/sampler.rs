//! Sequential (per-region scheduled) generation with overlapping windows.
//!
//! Regions are activated one at a time in slots spaced `stride` steps apart.
//! Once active, a region descends from `T_MAX` to 0 in `steps_per_patch`
//! equal decrements while every other region stays where it is. Which pending
//! region fills a slot is decided when the slot opens, from the state at that
//! moment.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{DenoiserModel, Workspace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{predict_x0_into, Layout, NoiseLevelVector, NoiseSchedule, RegionSample, T_MAX};

/// Samples per forward call when many jobs run in lockstep.
const MAX_FORWARD_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SelectionPolicy {
    /// Lowest pending index first.
    Sequential,
    /// Uniform over pending regions.
    Random,
    /// Pending region whose current clean estimate is nearest to a task anchor.
    #[default]
    Confidence,
}

impl SelectionPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionPolicy::Sequential => "sequential",
            SelectionPolicy::Random => "random",
            SelectionPolicy::Confidence => "confidence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "random" => Ok(Self::Random),
            "confidence" => Ok(Self::Confidence),
            other => Err(Error::Config(format!("unknown selection policy '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub steps_per_patch: usize,
    pub overlap_ratio: f64,
    pub stochasticity: f64,
    pub selection: SelectionPolicy,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            steps_per_patch: 3,
            overlap_ratio: 0.0,
            stochasticity: 0.5,
            selection: SelectionPolicy::Confidence,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_patch == 0 {
            return Err(Error::Config("steps_per_patch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(Error::Config("overlap_ratio must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.stochasticity) {
            return Err(Error::Config("stochasticity must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-region step windows for `n` regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepSchedule {
    pub regions: usize,
    pub steps_per_patch: usize,
    pub stride: usize,
    /// Total schedule length `T`.
    pub total_steps: usize,
}

impl StepSchedule {
    /// Steps `[start, start + S)` for the region in activation slot `k`.
    pub fn window(&self, k: usize) -> std::ops::Range<usize> {
        let start = k * self.stride;
        start..start + self.steps_per_patch
    }

    /// `(t_from, t_to)` for local step `j` inside a window.
    pub fn levels<T: Scalar>(&self, j: usize) -> (T, T) {
        (self.level_at(j), self.level_at(j + 1))
    }

    fn level_at<T: Scalar>(&self, j: usize) -> T {
        if j >= self.steps_per_patch {
            T::zero()
        } else {
            T::lit(T_MAX * (1.0 - j as f64 / self.steps_per_patch as f64))
        }
    }

    /// Slots whose window covers step `s`.
    pub fn active_slots(&self, s: usize) -> std::ops::Range<usize> {
        if self.regions == 0 {
            return 0..0;
        }
        let hi = (s / self.stride + 1).min(self.regions);
        let lo = if s + 1 > self.steps_per_patch {
            (s + 1 - self.steps_per_patch).div_ceil(self.stride)
        } else {
            0
        };
        lo.min(hi)..hi
    }
}

/// `stride = max(1, ceil((1 - overlap) S))`, `T = (n - 1) stride + S`.
pub fn build_schedule(n: usize, config: &SchedulerConfig) -> StepSchedule {
    let s = config.steps_per_patch.max(1);
    // tolerate float noise such as (1 - 0.8) * 10 = 2.0000000000000004
    let raw = (1.0 - config.overlap_ratio) * s as f64;
    let stride = ((raw - 1e-9).ceil() as usize).max(1);
    let total_steps = if n == 0 { 0 } else { (n - 1) * stride + s };
    StepSchedule {
        regions: n,
        steps_per_patch: s,
        stride,
        total_steps,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub active: Vec<usize>,
    pub levels_before: Vec<f64>,
    pub levels_after: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationTrace {
    pub steps: Vec<StepRecord>,
    pub denoiser_calls: usize,
    /// `T` of the schedule that was run.
    pub total_steps: usize,
    /// Regions in the order their slots opened.
    pub activation_order: Vec<usize>,
}

/// One active region in a reverse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveRegion<T> {
    pub region: usize,
    pub t_from: T,
    pub t_to: T,
}

/// Reverse update of the active regions given an already computed `eps_hat`.
pub fn apply_reverse_update<T: Scalar, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    sample: &mut RegionSample<T>,
    eps_hat: &[T],
    active: &[ActiveRegion<T>],
    stochasticity: f64,
    rng: &mut R,
) -> Result<()> {
    let d = sample.dim();
    let gamma = T::lit(stochasticity);
    let keep = T::lit((1.0 - stochasticity * stochasticity).max(0.0).sqrt());
    let mut x0 = vec![T::zero(); d];
    for a in active {
        if a.t_to > a.t_from {
            return Err(Error::Schedule(format!(
                "region {} asked to go from {} up to {}",
                a.region, a.t_from, a.t_to
            )));
        }
        if sample.level(a.region) != a.t_from {
            return Err(Error::Schedule(format!(
                "region {} is at level {}, step starts at {}",
                a.region,
                sample.level(a.region),
                a.t_from
            )));
        }
        let e = &eps_hat[a.region * d..(a.region + 1) * d];
        predict_x0_into(schedule, a.t_from, sample.region(a.region), e, &mut x0)?;
        let (alpha, sigma) = schedule.eval(a.t_to)?;
        let out = sample.region_mut(a.region);
        for k in 0..d {
            let mut dir = e[k];
            if stochasticity > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                dir = keep * dir + gamma * T::lit(z);
            }
            out[k] = alpha * x0[k] + sigma * dir;
        }
        sample.set_level(a.region, a.t_to)?;
    }
    Ok(())
}

/// One reverse step (`denoise_step`): predict noise, then update `active`.
pub fn denoise_step<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    sample: &mut RegionSample<T>,
    active: &[ActiveRegion<T>],
    stochasticity: f64,
    rng: &mut R,
) -> Result<()> {
    let eps_hat = model.predict(sample)?;
    apply_reverse_update(model.schedule(), sample, &eps_hat, active, stochasticity, rng)
}

/// Anchor vectors for the confidence policy (e.g. a glyph codebook).
#[derive(Clone, Copy, Debug)]
pub struct Anchors<'a, T> {
    pub entries: &'a [T],
    pub dim: usize,
}

impl<'a, T: Scalar> Anchors<'a, T> {
    pub fn new(entries: &'a [T], dim: usize) -> Self {
        Self { entries, dim }
    }

    /// Squared distance from `v` to its nearest anchor.
    pub fn nearest_distance(&self, v: &[T]) -> T {
        self.entries
            .chunks_exact(self.dim)
            .map(|c| c.iter().zip(v).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>())
            .fold(T::infinity(), |a, b| a.min(b))
    }
}

/// Picks the next region to activate. `x0_hat` holds the current clean
/// estimate of every region back to back.
pub fn select_next_region<T: Scalar, R: Rng + ?Sized>(
    policy: SelectionPolicy,
    pending: &[usize],
    x0_hat: &[T],
    anchors: Option<&Anchors<'_, T>>,
    rng: &mut R,
) -> Result<usize> {
    if pending.is_empty() {
        return Err(Error::Usage("no pending regions to select from".into()));
    }
    match policy {
        SelectionPolicy::Sequential => Ok(*pending.iter().min().expect("nonempty")),
        SelectionPolicy::Random => Ok(pending[rng.random_range(0..pending.len())]),
        SelectionPolicy::Confidence => {
            let anchors = anchors.ok_or_else(|| Error::Usage("confidence selection needs anchors".into()))?;
            let d = anchors.dim;
            let mut best: Option<(T, usize)> = None;
            for &r in pending {
                let dist = anchors.nearest_distance(&x0_hat[r * d..(r + 1) * d]);
                let better = match best {
                    None => true,
                    Some((bd, br)) => dist < bd || (dist == bd && r < br),
                };
                if better {
                    best = Some((dist, r));
                }
            }
            Ok(best.expect("nonempty").1)
        }
    }
}

/// A sample partway through scheduled denoising of its `pending` regions.
pub struct DenoiseJob<'r, T, R: ?Sized> {
    pub sample: RegionSample<T>,
    pub pending: Vec<usize>,
    pub rng: &'r mut R,
    pub trace: GenerationTrace,
    /// Step records are kept only when set.
    pub record_steps: bool,
}

/// Runs every job's schedule to completion in lockstep, sharing forward calls.
pub fn run_jobs<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    config: &SchedulerConfig,
    anchors: Option<&Anchors<'_, T>>,
    jobs: &mut [DenoiseJob<'_, T, R>],
) -> Result<()> {
    config.validate()?;
    let (n, d) = (model.config().n_regions, model.config().dim);
    for j in jobs.iter() {
        if j.sample.n_regions() != n || j.sample.dim() != d {
            return Err(Error::Dimension("sample does not match model".into()));
        }
    }
    let schedules: Vec<StepSchedule> = jobs.iter().map(|j| build_schedule(j.pending.len(), config)).collect();
    let mut slots: Vec<Vec<usize>> = jobs.iter().map(|j| Vec::with_capacity(j.pending.len())).collect();
    let mut waiting: Vec<Vec<usize>> = jobs
        .iter()
        .map(|j| {
            let mut p = j.pending.clone();
            p.sort_unstable();
            p
        })
        .collect();
    for (j, s) in jobs.iter_mut().zip(&schedules) {
        j.trace.total_steps = s.total_steps;
    }
    let horizon = schedules.iter().map(|s| s.total_steps).max().unwrap_or(0);
    let sched = *model.schedule();
    let mut x0 = vec![T::zero(); n * d];
    let mut ws = Workspace::new();

    for step in 0..horizon {
        let live: Vec<usize> = (0..jobs.len()).filter(|&i| step < schedules[i].total_steps).collect();
        let eps = batched_predict(model, jobs, &live, &mut ws)?;
        for (slot_idx, &ji) in live.iter().enumerate() {
            let job = &mut jobs[ji];
            let sch = &schedules[ji];
            let e = &eps[slot_idx * n * d..(slot_idx + 1) * n * d];

            if step % sch.stride == 0 && step / sch.stride < sch.regions {
                if config.selection == SelectionPolicy::Confidence {
                    for &r in &waiting[ji] {
                        predict_x0_into(
                            &sched,
                            job.sample.level(r),
                            job.sample.region(r),
                            &e[r * d..(r + 1) * d],
                            &mut x0[r * d..(r + 1) * d],
                        )?;
                    }
                }
                let pick = select_next_region(config.selection, &waiting[ji], &x0, anchors, &mut *job.rng)?;
                waiting[ji].retain(|&r| r != pick);
                slots[ji].push(pick);
                job.trace.activation_order.push(pick);
            }

            let active: Vec<ActiveRegion<T>> = sch
                .active_slots(step)
                .map(|k| {
                    let (t_from, t_to) = sch.levels(step - sch.window(k).start);
                    ActiveRegion {
                        region: slots[ji][k],
                        t_from,
                        t_to,
                    }
                })
                .collect();
            if active.is_empty() {
                continue;
            }
            let before: Vec<f64> = active.iter().map(|a| job.sample.level(a.region).as_f64()).collect();
            apply_reverse_update(&sched, &mut job.sample, e, &active, config.stochasticity, &mut *job.rng)?;
            job.trace.denoiser_calls += 1;
            if job.record_steps {
                job.trace.steps.push(StepRecord {
                    step,
                    active: active.iter().map(|a| a.region).collect(),
                    levels_before: before,
                    levels_after: active.iter().map(|a| a.t_to.as_f64()).collect(),
                });
            }
        }
    }
    Ok(())
}

fn batched_predict<T: Scalar, R: ?Sized>(
    model: &DenoiserModel<T>,
    jobs: &[DenoiseJob<'_, T, R>],
    live: &[usize],
    ws: &mut Workspace<T>,
) -> Result<Vec<T>> {
    let (n, d) = (model.config().n_regions, model.config().dim);
    let mut out = Vec::with_capacity(live.len() * n * d);
    for chunk in live.chunks(MAX_FORWARD_BATCH) {
        let mut x = Vec::with_capacity(chunk.len() * n * d);
        let mut t = Vec::with_capacity(chunk.len() * n);
        for &i in chunk {
            if !jobs[i].sample.is_finite() {
                return Err(Error::Numeric("sampler state"));
            }
            x.extend_from_slice(jobs[i].sample.as_slice());
            t.extend_from_slice(jobs[i].sample.levels().as_slice());
        }
        let e = model.predict_batch_in(ws, &x, &t, chunk.len());
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("denoiser output"));
        }
        out.extend_from_slice(e);
    }
    Ok(out)
}

/// Region id to clean value, for regions given as fixed input.
pub type Condition<T> = Vec<(usize, Vec<T>)>;

#[derive(Clone, Debug)]
pub struct GenerationOutput<T> {
    pub sample: RegionSample<T>,
    pub trace: GenerationTrace,
    /// Standard-normal noise drawn for every region before denoising began.
    pub initial_noise: Vec<T>,
}

/// Draws `n * d` standard-normal values.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<T> {
    (0..len)
        .map(|_| T::lit(StandardNormal.sample(rng)))
        .collect()
}

fn initial_state<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    layout: Layout,
    condition: &Condition<T>,
    rng: &mut R,
) -> Result<(RegionSample<T>, Vec<usize>, Vec<T>)> {
    let (n, d) = (model.config().n_regions, model.config().dim);
    if layout.len() != n {
        return Err(Error::Dimension(format!("layout has {} regions, model {}", layout.len(), n)));
    }
    let noise: Vec<T> = standard_normal(n * d, rng);
    let mut fixed = vec![false; n];
    let mut data = noise.clone();
    let mut levels = vec![T::lit(T_MAX); n];
    for (r, v) in condition {
        if *r >= n {
            return Err(Error::Usage(format!("condition region {r} out of range")));
        }
        if v.len() != d {
            return Err(Error::Dimension(format!("condition value for region {r} has dim {}", v.len())));
        }
        data[r * d..(r + 1) * d].copy_from_slice(v);
        levels[*r] = T::zero();
        fixed[*r] = true;
    }
    let pending = (0..n).filter(|r| !fixed[*r]).collect();
    let sample = RegionSample::new(data, d, NoiseLevelVector::new(levels)?, layout)?;
    Ok((sample, pending, noise))
}

/// Initial sequential generation of one sample.
pub fn generate<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    layout: Layout,
    config: &SchedulerConfig,
    condition: &Condition<T>,
    anchors: Option<&Anchors<'_, T>>,
    rng: &mut R,
) -> Result<GenerationOutput<T>> {
    let mut out = generate_batch(model, layout, config, std::slice::from_ref(condition), anchors, &mut [rng], true)?;
    Ok(out.pop().expect("one output"))
}

/// Generates one sample per condition, each driven by its own generator.
pub fn generate_batch<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    layout: Layout,
    config: &SchedulerConfig,
    conditions: &[Condition<T>],
    anchors: Option<&Anchors<'_, T>>,
    rngs: &mut [&mut R],
    record_steps: bool,
) -> Result<Vec<GenerationOutput<T>>> {
    if conditions.len() != rngs.len() {
        return Err(Error::Usage("one generator per condition required".into()));
    }
    let mut jobs = Vec::with_capacity(conditions.len());
    let mut noises = Vec::with_capacity(conditions.len());
    for (cond, rng) in conditions.iter().zip(rngs.iter_mut()) {
        let (sample, pending, noise) = initial_state(model, layout, cond, &mut **rng)?;
        noises.push(noise);
        jobs.push(DenoiseJob {
            sample,
            pending,
            rng: &mut **rng,
            trace: GenerationTrace::default(),
            record_steps,
        });
    }
    run_jobs(model, config, anchors, &mut jobs)?;
    Ok(jobs
        .into_iter()
        .zip(noises)
        .map(|(j, initial_noise)| GenerationOutput {
            sample: j.sample,
            trace: j.trace,
            initial_noise,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(s: usize, omega: f64) -> SchedulerConfig {
        SchedulerConfig {
            steps_per_patch: s,
            overlap_ratio: omega,
            stochasticity: 0.0,
            selection: SelectionPolicy::Sequential,
        }
    }

    #[test]
    fn schedule_formulas() {
        let s = build_schedule(4, &cfg(3, 0.0));
        assert_eq!((s.stride, s.total_steps), (3, 12));
        assert_eq!((0..4).map(|k| s.window(k).start).collect::<Vec<_>>(), vec![0, 3, 6, 9]);

        let s = build_schedule(4, &cfg(10, 0.8));
        assert_eq!((s.stride, s.total_steps), (2, 16));

        let s = build_schedule(7, &cfg(1, 1.0));
        assert_eq!((s.stride, s.total_steps), (1, 7));
        let s = build_schedule(7, &cfg(5, 1.0));
        assert_eq!((s.stride, s.total_steps), (1, 11));

        let s = build_schedule(13, &cfg(10, 0.8));
        assert_eq!(s.total_steps, 34);
        let s = build_schedule(64, &cfg(30, 0.9));
        assert_eq!((s.stride, s.total_steps), (3, 219));
    }

    #[test]
    fn window_levels_descend_in_equal_steps() {
        let s = build_schedule(2, &cfg(4, 0.0));
        let lv: Vec<f64> = (0..=4).map(|j| s.level_at(j)).collect();
        assert!((lv[0] - T_MAX).abs() < 1e-15);
        assert_eq!(lv[4], 0.0);
        for w in lv.windows(2) {
            assert!((w[0] - w[1] - T_MAX / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn active_slots_match_windows() {
        for (n, s_, om) in [(5, 3, 0.0), (6, 10, 0.8), (4, 4, 0.5), (9, 1, 1.0), (3, 7, 0.95)] {
            let s = build_schedule(n, &cfg(s_, om));
            for step in 0..s.total_steps + 2 {
                let brute: Vec<usize> = (0..n).filter(|&k| s.window(k).contains(&step)).collect();
                let fast: Vec<usize> = s.active_slots(step).collect();
                assert_eq!(brute, fast, "n={n} S={s_} step={step}");
            }
        }
    }

    #[test]
    fn selection_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = vec![0.0f64; 8 * 2];
        assert_eq!(select_next_region(SelectionPolicy::Sequential, &[3, 7, 1], &x0, None, &mut rng).unwrap(), 1);
        assert!(matches!(
            select_next_region::<f64, _>(SelectionPolicy::Random, &[], &x0, None, &mut rng),
            Err(Error::Usage(_))
        ));

        let anchors = [1.0, 0.0, 0.0, 1.0];
        let a = Anchors::new(&anchors[..], 2);
        let mut x0 = vec![0.5f64; 8];
        x0[2 * 2] = 0.0;
        x0[2 * 2 + 1] = 1.0;
        assert_eq!(
            select_next_region(SelectionPolicy::Confidence, &[0, 1, 2, 3], &x0, Some(&a), &mut rng).unwrap(),
            2
        );
        // ties resolve to the lowest index
        let x0 = vec![0.5f64; 8];
        assert_eq!(
            select_next_region(SelectionPolicy::Confidence, &[3, 1, 2], &x0, Some(&a), &mut rng).unwrap(),
            1
        );
    }

    #[test]
    fn random_selection_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pending = [2, 4, 6, 8];
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let r = select_next_region::<f64, _>(SelectionPolicy::Random, &pending, &[], None, &mut rng).unwrap();
            counts[pending.iter().position(|p| *p == r).unwrap()] += 1;
        }
        let se = (0.25f64 * 0.75 / draws as f64).sqrt();
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 3.0 * se);
        }
    }

    fn tiny_model(n: usize) -> DenoiserModel<f64> {
        let mut c = ModelConfig::new(n, 2, 8, 1);
        c.heads = 2;
        DenoiserModel::new(c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn generate_counts_steps_and_ends_clean() {
        let m = tiny_model(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate(&m, Layout::new(4, 4), &cfg(3, 0.0), &vec![], None, &mut rng).unwrap();
        assert_eq!(out.trace.total_steps, 48);
        assert_eq!(out.trace.denoiser_calls, 48);
        assert!(out.sample.is_clean());
        assert_eq!(out.initial_noise.len(), 32);
        let mut order = out.trace.activation_order.clone();
        order.sort_unstable();
        assert_eq!(order, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn single_region_takes_s_steps() {
        let m = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate(&m, Layout::flat(1), &cfg(7, 0.3), &vec![], None, &mut rng).unwrap();
        assert_eq!(out.trace.total_steps, 7);
        assert_eq!(out.trace.denoiser_calls, 7);
    }

    #[test]
    fn fully_conditioned_is_identity() {
        let m = tiny_model(3);
        let cond: Condition<f64> = (0..3).map(|r| (r, vec![r as f64, -(r as f64)])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate(&m, Layout::flat(3), &cfg(3, 0.0), &cond, None, &mut rng).unwrap();
        assert_eq!(out.trace.denoiser_calls, 0);
        assert!(out.trace.steps.is_empty());
        assert_eq!(out.sample.as_slice(), &[0.0, -0.0, 1.0, -1.0, 2.0, -2.0]);
    }

    #[test]
    fn levels_never_increase_and_conditions_untouched() {
        let m = tiny_model(6);
        let cond: Condition<f64> = vec![(1, vec![0.3, 0.4]), (4, vec![-1.0, 2.0])];
        let mut c = cfg(4, 0.5);
        c.stochasticity = 0.5;
        c.selection = SelectionPolicy::Random;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = generate(&m, Layout::flat(6), &c, &cond, None, &mut rng).unwrap();
        let mut current = [T_MAX; 6];
        for rec in &out.trace.steps {
            for ((r, b), a) in rec.active.iter().zip(&rec.levels_before).zip(&rec.levels_after) {
                assert!(!rec.active.contains(&1) && !rec.active.contains(&4));
                assert!(a <= b);
                assert_eq!(*b, current[*r]);
                current[*r] = *a;
            }
        }
        assert_eq!(out.sample.region(1), &[0.3, 0.4]);
        assert_eq!(out.sample.region(4), &[-1.0, 2.0]);
        assert_eq!(out.trace.denoiser_calls, build_schedule(4, &c).total_steps);
    }

    #[test]
    fn deterministic_without_stochasticity() {
        let m = tiny_model(5);
        let c = cfg(3, 0.4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            generate(&m, Layout::flat(5), &c, &vec![], None, &mut rng).unwrap().sample
        };
        let (a, b) = (run(), run());
        let bits = |s: &RegionSample<f64>| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn reverse_update_rejects_increasing_level() {
        let mut s = RegionSample::new(
            vec![0.0f64; 2],
            2,
            NoiseLevelVector::new(vec![0.3]).unwrap(),
            Layout::flat(1),
        )
        .unwrap();
        let a = [ActiveRegion {
            region: 0,
            t_from: 0.3,
            t_to: 0.5,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = apply_reverse_update(&NoiseSchedule::linear(), &mut s, &[0.0; 2], &a, 0.0, &mut rng);
        assert!(matches!(r, Err(Error::Schedule(_))));
    }

    #[test]
    fn exact_noise_same_level_leaves_region_unchanged() {
        let sched = NoiseSchedule::linear();
        let x0 = [0.7f64, -0.2];
        let eps = [0.4f64, 1.1];
        let t = 0.6;
        let xt: Vec<f64> = x0.iter().zip(&eps).map(|(x, e)| (1.0 - t) * x + t * e).collect();
        let mut s = RegionSample::new(xt.clone(), 2, NoiseLevelVector::new(vec![t]).unwrap(), Layout::flat(1)).unwrap();
        let a = [ActiveRegion {
            region: 0,
            t_from: t,
            t_to: t,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        apply_reverse_update(&sched, &mut s, &eps, &a, 0.0, &mut rng).unwrap();
        for (a, b) in s.as_slice().iter().zip(&xt) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
