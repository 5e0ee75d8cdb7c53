//! The experiment commands behind the `ipr` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::table::{aggregate, curve_csv, CurvePoint, ResultTable};
use crate::denoiser::{train, Checkpoint, DenoiserModel, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::refine::{corrupt_swap, refine_batch, ComputeLedger, NoiseMode, RefineJob, RefinementConfig, RegionMode};
use crate::sampler::{generate_batch, Anchors, Condition, GenerationOutput};
use crate::tasks::even_pixels::{gen_even_pixels, EvenPixelsImage};
use crate::tasks::glyph::{encode_grid, GlyphCodebook};
use crate::tasks::io::{load_image, save_image};
use crate::tasks::metrics::{batch_metrics, evaluate_sample, SampleEval};
use crate::tasks::sudoku::{all_grids, check_sudoku_valid, gen_sudoku, make_hint_condition, SudokuGrid};
use crate::tasks::Task;
use crate::{Codebook, Model, Sample};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for stream `tag`, item `index` of a run seeded `base`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(splitmix64(base) ^ h) ^ index)
}

fn rngs(seed: u64, tag: &str, count: usize) -> Vec<ChaCha8Rng> {
    (0..count)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, i as u64)))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Task plus the codebook its Sudoku regions are drawn from.
#[derive(Clone, Debug)]
pub struct TaskContext {
    pub task: Task,
    pub codebook: Option<Codebook>,
}

impl TaskContext {
    pub fn new(task: Task, codebook_seed: u64) -> Result<Self> {
        let codebook = match task.sudoku_order() {
            Some(n) => Some(GlyphCodebook::for_sudoku(n, codebook_seed)?),
            None => None,
        };
        Ok(Self { task, codebook })
    }

    pub fn anchors(&self) -> Option<Anchors<'_, f32>> {
        self.codebook.as_ref().map(GlyphCodebook::as_anchors)
    }

    pub fn evaluate(&self, sample: &Sample) -> Result<SampleEval> {
        evaluate_sample(self.task, sample, self.codebook.as_ref())
    }

    fn codebook(&self) -> Result<&Codebook> {
        self.codebook
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("task {} has no codebook", self.task.as_str())))
    }
}

/// Clean training samples for the configured task.
pub fn build_dataset(cfg: &ExperimentConfig, ctx: &TaskContext) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.model.train_seed, "dataset", 0));
    match cfg.task {
        Task::Sudoku4 => all_grids(2)?.iter().map(|g| encode_grid(g, ctx.codebook()?)).collect(),
        Task::Sudoku9 => (0..cfg.model.dataset_size)
            .map(|_| encode_grid(&gen_sudoku(3, &mut rng)?, ctx.codebook()?))
            .collect(),
        Task::EvenPixels => Ok((0..cfg.model.dataset_size)
            .map(|_| gen_even_pixels(&mut rng).to_regions())
            .collect()),
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Trains a model, writes the checkpoint to `cfg.checkpoint` and the loss
/// curve to `<output_dir>/loss.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = TaskContext::new(cfg.task, cfg.model.codebook_seed)?;
    let data = build_dataset(cfg, &ctx)?;
    let m = &cfg.model;
    let data_std = match &ctx.codebook {
        Some(cb) => cb.coordinate_rms(),
        None => {
            let (s, c) = data
                .iter()
                .flat_map(|x| x.as_slice())
                .fold((0.0, 0usize), |(s, c), v| (s + f64::from(*v).powi(2), c + 1));
            (s / c as f64).sqrt()
        }
    };
    let layout = cfg.task.layout();
    let model_cfg = ModelConfig {
        heads: m.heads,
        output: m.output,
        data_std,
        ..ModelConfig::new(layout.len(), cfg.task.region_dim(), m.hidden, m.layers)
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(m.train_seed, "init", 0));
    let mut model: Model = DenoiserModel::new(model_cfg, &mut init_rng)?;
    let tc = TrainConfig {
        learning_rate: m.learning_rate,
        momentum: m.momentum,
        batch_size: m.batch_size,
        steps: m.train_steps,
        seed: derive_seed(m.train_seed, "train", 0),
        grad_clip: m.grad_clip,
        loss_weighting: m.loss_weighting,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &data, &tc)?;

    let mut ckpt = Checkpoint::new(model, m.train_seed);
    ckpt.meta.insert("task".into(), cfg.task.as_str().into());
    ckpt.meta.insert("codebook_seed".into(), m.codebook_seed.to_string());
    ckpt.meta.insert("train_steps".into(), m.train_steps.to_string());
    ckpt.meta.insert("learning_rate".into(), m.learning_rate.to_string());
    ckpt.meta.insert("batch_size".into(), m.batch_size.to_string());
    ckpt.meta.insert("loss_weighting".into(), m.loss_weighting.as_str().into());
    if let Some(dir) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ckpt.save(&cfg.checkpoint)?;

    create_dir(&cfg.output_dir)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write(&cfg.output_dir.join("loss.csv"), &csv)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        losses: report.losses,
    })
}

/// Loads `cfg.checkpoint` and checks it was trained for `cfg.task`.
pub fn load_model(cfg: &ExperimentConfig) -> Result<(Model, TaskContext)> {
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let task = match ckpt.meta.get("task") {
        Some(t) => Task::parse(t)?,
        None => cfg.task,
    };
    if task != cfg.task {
        return Err(Error::Config(format!(
            "checkpoint was trained for {}, config asks for {}",
            task.as_str(),
            cfg.task.as_str()
        )));
    }
    let codebook_seed = match ckpt.meta.get("codebook_seed") {
        Some(s) => s
            .parse()
            .map_err(|_| Error::Format("bad codebook_seed in checkpoint".into()))?,
        None => cfg.model.codebook_seed,
    };
    let layout = task.layout();
    let mc = ckpt.model.config();
    if mc.n_regions != layout.len() || mc.dim != task.region_dim() {
        return Err(Error::Config("checkpoint shape does not match the task".into()));
    }
    Ok((ckpt.model, TaskContext::new(task, codebook_seed)?))
}

/// One puzzle to solve: the clue cells (empty for Even Pixels).
#[derive(Clone, Debug)]
pub struct Instance {
    pub condition: Condition<f32>,
    pub grid: Option<SudokuGrid>,
}

impl Instance {
    pub fn cells(&self) -> Vec<usize> {
        self.condition.iter().map(|(c, _)| *c).collect()
    }
}

/// HARD-setting puzzles for Sudoku, unconditional instances otherwise.
pub fn make_instances(ctx: &TaskContext, seed: u64, count: usize) -> Result<Vec<Instance>> {
    let mut rs = rngs(seed, "instance", count);
    match ctx.task.sudoku_order() {
        None => Ok((0..count)
            .map(|_| Instance {
                condition: Vec::new(),
                grid: None,
            })
            .collect()),
        Some(n) => {
            let cb = ctx.codebook()?;
            rs.iter_mut()
                .map(|rng| {
                    let grid = gen_sudoku(n, rng)?;
                    let hint = make_hint_condition(&grid, rng)?;
                    let condition = hint
                        .cells
                        .iter()
                        .zip(&hint.digits)
                        .map(|(c, d)| (*c, cb.entry(*d).to_vec()))
                        .collect();
                    Ok(Instance {
                        condition,
                        grid: Some(grid),
                    })
                })
                .collect()
        }
    }
}

/// Initial generation for every instance of one seed.
pub fn generate_seed(
    model: &Model,
    ctx: &TaskContext,
    cfg: &ExperimentConfig,
    seed: u64,
    instances: &[Instance],
) -> Result<Vec<GenerationOutput<f32>>> {
    let mut rs = rngs(seed, "generate", instances.len());
    let mut refs: Vec<&mut ChaCha8Rng> = rs.iter_mut().collect();
    let conditions: Vec<Condition<f32>> = instances.iter().map(|i| i.condition.clone()).collect();
    let anchors = ctx.anchors();
    generate_batch(
        model,
        ctx.task.layout(),
        &cfg.init,
        &conditions,
        anchors.as_ref(),
        &mut refs,
        false,
    )
}

/// Per-sample outcome of refining one seed's samples.
pub struct SeedRun {
    pub seed: u64,
    /// `(iteration, evaluation of every sample)` for each kept snapshot.
    pub evals: Vec<(usize, Vec<SampleEval>)>,
    pub ledgers: Vec<ComputeLedger>,
    /// Resampled subsets per sample, per iteration.
    pub subsets: Vec<Vec<Vec<usize>>>,
    pub finals: Vec<Sample>,
}

/// Refines `jobs` with per-sample generators derived from `(seed, tag)` and
/// evaluates every snapshot.
pub fn refine_seed(
    model: &Model,
    ctx: &TaskContext,
    refinement: &RefinementConfig,
    seed: u64,
    tag: &str,
    jobs: &[RefineJob<f32>],
) -> Result<SeedRun> {
    let mut rs = rngs(seed, tag, jobs.len());
    let mut refs: Vec<&mut ChaCha8Rng> = rs.iter_mut().collect();
    let anchors = ctx.anchors();
    let outs = refine_batch(model, jobs, refinement, anchors.as_ref(), &mut refs)?;
    let iterations: Vec<usize> = outs.first().map_or(vec![0], |o| o.snapshots.iter().map(|s| s.0).collect());
    let mut evals = Vec::with_capacity(iterations.len());
    for (k, &r) in iterations.iter().enumerate() {
        let e = outs.iter().map(|o| ctx.evaluate(&o.snapshots[k].1)).collect::<Result<Vec<_>>>()?;
        evals.push((r, e));
    }
    let mut run = SeedRun {
        seed,
        evals,
        ledgers: Vec::with_capacity(outs.len()),
        subsets: Vec::with_capacity(outs.len()),
        finals: Vec::with_capacity(outs.len()),
    };
    for o in outs {
        run.ledgers.push(o.ledger);
        run.subsets.push(o.subsets);
        run.finals.push(o.sample);
    }
    Ok(run)
}

impl SeedRun {
    /// Metric rows (names prefixed with `prefix`) plus the mean denoiser
    /// steps spent per sample at each iteration (`r = 0`: initial generation).
    pub fn table(&self, prefix: &str) -> Result<ResultTable> {
        let mut t = ResultTable::default();
        let n = self.ledgers.len();
        for (r, evals) in &self.evals {
            let report = batch_metrics(evals)?;
            for m in &report.metrics {
                t.push(self.seed, *r, format!("{prefix}{}", m.name), m.mean, report.samples);
            }
            let calls: usize = self
                .ledgers
                .iter()
                .map(|l| if *r == 0 { l.baseline_calls } else { l.per_iteration_calls[r - 1] })
                .sum();
            t.push(self.seed, *r, format!("{prefix}denoiser_calls"), calls as f64 / n as f64, n);
        }
        Ok(t)
    }
}

fn jobs_from(outs: &[GenerationOutput<f32>], instances: &[Instance]) -> Vec<RefineJob<f32>> {
    outs.iter()
        .zip(instances)
        .map(|(o, inst)| RefineJob {
            x0: o.sample.clone(),
            condition: inst.cells(),
            stored_noise: Some(o.initial_noise.clone()),
            baseline_calls: o.trace.denoiser_calls,
        })
        .collect()
}

fn save_samples(ctx: &TaskContext, dir: &Path, seed: u64, samples: &[Sample]) -> Result<()> {
    create_dir(dir)?;
    match ctx.task {
        Task::EvenPixels => {
            for (i, s) in samples.iter().enumerate() {
                save_image(&EvenPixelsImage::from_regions(s)?, &dir.join(format!("seed{seed}_{i:04}")))?;
            }
            Ok(())
        }
        _ => {
            let cb = ctx.codebook()?;
            let text: Vec<String> = samples
                .iter()
                .map(|s| crate::tasks::glyph::decode_sample(s, cb).map(|g| g.to_text()))
                .collect::<Result<_>>()?;
            write(&dir.join(format!("seed{seed}.txt")), &text.join("\n"))
        }
    }
}

/// Initial generation only; writes the samples and `generate.csv`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let (model, ctx) = load_model(cfg)?;
    let mut table = ResultTable::default();
    for &seed in &cfg.seeds {
        let instances = make_instances(&ctx, seed, cfg.samples)?;
        let outs = generate_seed(&model, &ctx, cfg, seed, &instances)?;
        let evals = outs.iter().map(|o| ctx.evaluate(&o.sample)).collect::<Result<Vec<_>>>()?;
        let report = batch_metrics(&evals)?;
        for m in &report.metrics {
            table.push(seed, 0, m.name, m.mean, report.samples);
        }
        let calls: usize = outs.iter().map(|o| o.trace.denoiser_calls).sum();
        table.push(seed, 0, "denoiser_calls", calls as f64 / outs.len() as f64, outs.len());
        let samples: Vec<Sample> = outs.into_iter().map(|o| o.sample).collect();
        save_samples(&ctx, &cfg.output_dir.join("samples"), seed, &samples)?;
    }
    create_dir(&cfg.output_dir)?;
    table.save(&cfg.output_dir.join("generate.csv"))?;
    Ok(table)
}

/// Generation followed by refinement, with per-seed runs kept for analysis.
pub fn run_refine(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let (model, ctx) = load_model(cfg)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let instances = make_instances(&ctx, seed, cfg.samples)?;
        let outs = generate_seed(&model, &ctx, cfg, seed, &instances)?;
        runs.push(refine_seed(&model, &ctx, &cfg.refinement, seed, "refine", &jobs_from(&outs, &instances))?);
    }
    Ok(runs)
}

/// Writes `refine.csv` (and the final samples when `save_samples` is set).
pub fn cmd_refine(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let runs = run_refine(cfg)?;
    let mut table = ResultTable::default();
    for run in &runs {
        table.extend(run.table("")?);
    }
    create_dir(&cfg.output_dir)?;
    table.save(&cfg.output_dir.join("refine.csv"))?;
    if cfg.save_samples {
        let ctx = TaskContext::new(cfg.task, cfg.model.codebook_seed)?;
        for run in &runs {
            save_samples(&ctx, &cfg.output_dir.join("refined"), run.seed, &run.finals)?;
        }
    }
    Ok(table)
}

/// Recovery of K-swap-corrupted valid grids, per K, keyed by `(K, seed)`.
pub fn run_corrupt_recover(cfg: &ExperimentConfig) -> Result<BTreeMap<(usize, u64), SeedRun>> {
    cfg.validate()?;
    if cfg.task.sudoku_order().is_none() {
        return Err(Error::Usage("corrupt-recover needs a Sudoku task".into()));
    }
    let (model, ctx) = load_model(cfg)?;
    let cb = ctx.codebook()?;
    let refinement = RefinementConfig {
        condition: Vec::new(),
        ..cfg.refinement.clone()
    };
    let n_cells = cfg.task.layout().len();
    if let Some(k) = cfg.k_list.iter().find(|k| 2 * **k > n_cells) {
        return Err(Error::Usage(format!("{k} swaps need {} cells, grid has {n_cells}", 2 * k)));
    }
    let order = cfg.task.sudoku_order().expect("checked");
    let mut runs = BTreeMap::new();
    for &k in &cfg.k_list {
        for &seed in &cfg.seeds {
            let mut rs = rngs(seed, &format!("corrupt-k{k}"), cfg.samples);
            let jobs = rs
                .iter_mut()
                .map(|rng| {
                    let grid = gen_sudoku(order, rng)?;
                    let clean = encode_grid(&grid, cb)?;
                    let (x0, _) = corrupt_swap(&clean, &grid, k, &[], rng)?;
                    Ok(RefineJob {
                        x0,
                        condition: Vec::new(),
                        stored_noise: None,
                        baseline_calls: 0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            runs.insert((k, seed), refine_seed(&model, &ctx, &refinement, seed, &format!("recover-k{k}"), &jobs)?);
        }
    }
    Ok(runs)
}

/// Writes `corrupt_recover.csv` with metrics `k<K>:recovery_rate` and
/// `k<K>:denoiser_calls`.
pub fn cmd_corrupt_recover(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let runs = run_corrupt_recover(cfg)?;
    let mut table = ResultTable::default();
    for ((k, _), run) in &runs {
        let t = run.table(&format!("k{k}:"))?;
        for mut row in t.rows {
            row.metric = row.metric.replace("valid_rate", "recovery_rate");
            table.rows.push(row);
        }
    }
    create_dir(&cfg.output_dir)?;
    table.save(&cfg.output_dir.join("corrupt_recover.csv"))?;
    Ok(table)
}

/// Variant label, e.g. `alpha0.25_fresh_random`.
pub fn variant_label(ratio: f64, noise: NoiseMode, region: RegionMode) -> String {
    format!("alpha{ratio:.2}_{}_{}", noise.as_str(), region.as_str())
}

/// The ablation grid over resampling ratio x noise mode x region mode, all
/// variants refining the same initial samples. Keyed by `(label, seed)`.
pub fn run_ablate(cfg: &ExperimentConfig) -> Result<BTreeMap<(String, u64), SeedRun>> {
    cfg.validate()?;
    let (model, ctx) = load_model(cfg)?;
    let mut runs = BTreeMap::new();
    for &seed in &cfg.seeds {
        let instances = make_instances(&ctx, seed, cfg.samples)?;
        let outs = generate_seed(&model, &ctx, cfg, seed, &instances)?;
        let jobs = jobs_from(&outs, &instances);
        for &ratio in &cfg.ablate_ratios {
            for noise in [NoiseMode::Fresh, NoiseMode::FixedInitial] {
                for region in [RegionMode::RandomEachIteration, RegionMode::FixedFirstIteration] {
                    let refinement = RefinementConfig {
                        resampling_ratio: ratio,
                        noise_mode: noise,
                        region_mode: region,
                        ..cfg.refinement.clone()
                    };
                    let run = refine_seed(&model, &ctx, &refinement, seed, "refine", &jobs)?;
                    runs.insert((variant_label(ratio, noise, region), seed), run);
                }
            }
        }
    }
    Ok(runs)
}

/// Writes `ablate.csv` and the resampled subsets to `ablate_subsets.csv`
/// (`variant,seed,sample,iteration,regions`, regions space-separated).
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let runs = run_ablate(cfg)?;
    let mut table = ResultTable::default();
    let mut log = String::from("variant,seed,sample,iteration,regions\n");
    for ((label, seed), run) in &runs {
        table.extend(run.table(&format!("{label}:"))?);
        for (i, subsets) in run.subsets.iter().enumerate() {
            for (it, m) in subsets.iter().enumerate() {
                let regions: Vec<String> = m.iter().map(usize::to_string).collect();
                log.push_str(&format!("{label},{seed},{i},{},{}\n", it + 1, regions.join(" ")));
            }
        }
    }
    create_dir(&cfg.output_dir)?;
    table.save(&cfg.output_dir.join("ablate.csv"))?;
    write(&cfg.output_dir.join("ablate_subsets.csv"), &log)?;
    Ok(table)
}

/// Aggregates tables across seeds and writes `report_<metric>.csv` (with `:`
/// in metric names replaced by `__`) into `out_dir`.
pub fn cmd_report(tables: &[PathBuf], out_dir: &Path) -> Result<BTreeMap<String, Vec<CurvePoint>>> {
    let loaded = tables.iter().map(|p| ResultTable::load(p)).collect::<Result<Vec<_>>>()?;
    let curves = aggregate(&loaded)?;
    create_dir(out_dir)?;
    for (metric, points) in &curves {
        let name = metric.replace(':', "__");
        write(&out_dir.join(format!("report_{name}.csv")), &curve_csv(points))?;
    }
    Ok(curves)
}

/// Evaluates saved samples: Sudoku grid text files (grids separated by blank
/// lines) or raw `.hsv` images.
pub fn cmd_eval(paths: &[PathBuf]) -> Result<ResultTable> {
    let mut evals = Vec::new();
    for p in paths {
        if p.extension().is_some_and(|e| e == "hsv") {
            let img = load_image(p)?;
            evals.push(SampleEval::EvenPixels(crate::tasks::even_pixels::eval_even_pixels(&img)));
            continue;
        }
        let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
        for block in text.split("\n\n").filter(|b| !b.trim().is_empty()) {
            let grid = SudokuGrid::from_text(block)?;
            let v = check_sudoku_valid(&grid)?;
            evals.push(SampleEval::Sudoku {
                grid,
                valid: v.valid,
                violations: v.violations,
            });
        }
    }
    let report = batch_metrics(&evals)?;
    let mut t = ResultTable::default();
    for m in &report.metrics {
        t.push(0, 0, m.name, m.mean, report.samples);
    }
    Ok(t)
}
