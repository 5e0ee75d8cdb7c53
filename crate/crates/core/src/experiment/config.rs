//! Experiment configuration: `key = value` lines grouped under optional
//! `[section]` headers. Sections only organise the file; every key is
//! globally unique. `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::denoiser::{LossWeighting, OutputParam};
use crate::error::{Error, Result};
use crate::refine::{NoiseMode, RefinementConfig, RegionMode};
use crate::sampler::{SchedulerConfig, SelectionPolicy};
use crate::tasks::Task;

/// Parses the text into key/value pairs, rejecting duplicates.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') || line.len() < 3 {
                return Err(Error::Config(format!("line {}: bad section header '{line}'", i + 1)));
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(ek, _)| *ek == k) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub output: OutputParam,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub loss_weighting: LossWeighting,
    pub train_seed: u64,
    /// Clean training examples generated up front (the 4x4 task always uses
    /// all 288 grids).
    pub dataset_size: usize,
    pub codebook_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub init: SchedulerConfig,
    pub refinement: RefinementConfig,
    pub model: ModelSettings,
    /// Swap counts for corrupt-recover.
    pub k_list: Vec<usize>,
    /// Resampling ratios swept by ablate.
    pub ablate_ratios: Vec<f64>,
    pub save_samples: bool,
}

/// Every key accepted in a config file or as a flag.
pub const KEYS: &[&str] = &[
    "task",
    "checkpoint",
    "output_dir",
    "seeds",
    "samples",
    "init_overlap_ratio",
    "init_steps_per_patch",
    "stochasticity",
    "selection",
    "ipr_overlap_ratio",
    "ipr_steps_per_patch",
    "ipr_selection",
    "resampling_ratio",
    "iteration",
    "noise_mode",
    "region_mode",
    "snapshot_every",
    "hidden",
    "layers",
    "heads",
    "output",
    "train_steps",
    "batch_size",
    "learning_rate",
    "momentum",
    "grad_clip",
    "loss_weighting",
    "train_seed",
    "dataset_size",
    "codebook_seed",
    "k_list",
    "ablate_ratios",
    "save_samples",
];

impl ExperimentConfig {
    /// Per-task defaults, including the inference hyperparameters of the
    /// reference setup (Sudoku: 0.0/3/0.8/10; Even Pixels: 0.9/30/0.9/30;
    /// stochasticity 0.5 for both).
    pub fn defaults(task: Task) -> Self {
        let (init, ipr) = match task {
            Task::Sudoku4 | Task::Sudoku9 => ((0.0, 3), (0.8, 10)),
            Task::EvenPixels => ((0.9, 30), (0.9, 30)),
        };
        // no codebook to measure confidence against on images
        let selection = match task {
            Task::EvenPixels => SelectionPolicy::Random,
            _ => SelectionPolicy::Confidence,
        };
        let init = SchedulerConfig {
            overlap_ratio: init.0,
            steps_per_patch: init.1,
            stochasticity: 0.5,
            selection,
        };
        let refinement = RefinementConfig {
            resampling_ratio: 0.25,
            iterations: 20,
            refine_scheduler: SchedulerConfig {
                overlap_ratio: ipr.0,
                steps_per_patch: ipr.1,
                ..init
            },
            ..RefinementConfig::default()
        };
        let (hidden, layers, train_steps, dataset_size) = match task {
            Task::Sudoku4 => (64, 2, 6000, 288),
            Task::Sudoku9 => (128, 4, 20000, 20000),
            Task::EvenPixels => (64, 2, 8000, 4000),
        };
        // patch gradients are small; at 0.2 the image model stalls near the mean
        let learning_rate = match task {
            Task::EvenPixels => 3.0,
            _ => 0.2,
        };
        Self {
            task,
            checkpoint: PathBuf::from(format!("{}.ckpt", task.as_str())),
            output_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2],
            samples: 300,
            init,
            refinement,
            model: ModelSettings {
                hidden,
                layers,
                heads: 4,
                output: OutputParam::Preconditioned,
                train_steps,
                batch_size: 64,
                learning_rate,
                momentum: 0.9,
                grad_clip: Some(1.0),
                loss_weighting: LossWeighting::UnitTarget,
                train_seed: 0,
                dataset_size,
                codebook_seed: 0,
            },
            k_list: vec![1, 2, 3],
            ablate_ratios: vec![0.10, 0.25, 0.50],
            save_samples: false,
        }
    }

    /// Builds a config from `key = value` pairs applied in order. The task
    /// (from the pairs, else `fallback_task`) selects the defaults.
    pub fn from_pairs(pairs: &[(String, String)], fallback_task: Task) -> Result<Self> {
        let task = match pairs.iter().rev().find(|(k, _)| k == "task") {
            Some((_, v)) => Task::parse(v)?,
            None => fallback_task,
        };
        let mut cfg = Self::defaults(task);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)], fallback_task: Task) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut pairs = parse_config_text(&text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs, fallback_task)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got '{value}'"));
        let real = || value.parse::<f64>().map_err(|_| bad("a number"));
        let count = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let seed = || value.parse::<u64>().map_err(|_| bad("an unsigned integer"));
        let flag = || match value {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let list = |what: &str| -> Result<Vec<String>> {
            let items: Vec<String> = value
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if items.is_empty() {
                return Err(bad(what));
            }
            Ok(items)
        };
        match key {
            "task" => {
                let t = Task::parse(value)?;
                if t != self.task {
                    return Err(Error::Config(format!(
                        "task is {} but '{value}' was given later",
                        self.task.as_str()
                    )));
                }
            }
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seeds" => {
                self.seeds = list("a comma-separated seed list")?
                    .iter()
                    .map(|s| s.parse().map_err(|_| bad("unsigned seeds")))
                    .collect::<Result<_>>()?
            }
            "samples" => self.samples = count()?,
            "init_overlap_ratio" => self.init.overlap_ratio = real()?,
            "init_steps_per_patch" => self.init.steps_per_patch = count()?,
            "stochasticity" => {
                let g = real()?;
                self.init.stochasticity = g;
                self.refinement.refine_scheduler.stochasticity = g;
            }
            "selection" => self.init.selection = SelectionPolicy::parse(value)?,
            "ipr_overlap_ratio" => self.refinement.refine_scheduler.overlap_ratio = real()?,
            "ipr_steps_per_patch" => self.refinement.refine_scheduler.steps_per_patch = count()?,
            "ipr_selection" => self.refinement.refine_scheduler.selection = SelectionPolicy::parse(value)?,
            "resampling_ratio" => self.refinement.resampling_ratio = real()?,
            "iteration" => self.refinement.iterations = count()?,
            "noise_mode" => self.refinement.noise_mode = NoiseMode::parse(value)?,
            "region_mode" => self.refinement.region_mode = RegionMode::parse(value)?,
            "snapshot_every" => self.refinement.snapshot_every = count()?,
            "hidden" => self.model.hidden = count()?,
            "layers" => self.model.layers = count()?,
            "heads" => self.model.heads = count()?,
            "output" => self.model.output = OutputParam::parse(value)?,
            "train_steps" => self.model.train_steps = count()?,
            "batch_size" => self.model.batch_size = count()?,
            "learning_rate" => self.model.learning_rate = real()?,
            "momentum" => self.model.momentum = real()?,
            "grad_clip" => {
                self.model.grad_clip = match value {
                    "none" | "off" => None,
                    _ => Some(real()?),
                }
            }
            "loss_weighting" => self.model.loss_weighting = LossWeighting::parse(value)?,
            "train_seed" => self.model.train_seed = seed()?,
            "dataset_size" => self.model.dataset_size = count()?,
            "codebook_seed" => self.model.codebook_seed = seed()?,
            "k_list" => {
                self.k_list = list("a comma-separated list of swap counts")?
                    .iter()
                    .map(|s| s.parse().map_err(|_| bad("swap counts")))
                    .collect::<Result<_>>()?
            }
            "ablate_ratios" => {
                self.ablate_ratios = list("a comma-separated list of ratios")?
                    .iter()
                    .map(|s| s.parse().map_err(|_| bad("ratios")))
                    .collect::<Result<_>>()?
            }
            "save_samples" => self.save_samples = flag()?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        self.init.validate()?;
        self.refinement.validate()?;
        if self.ablate_ratios.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("ablate_ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The configuration as `key = value` text that [`from_pairs`](Self::from_pairs)
    /// reads back to an equal value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let r = &self.refinement;
        let join = |v: Vec<String>| v.join(",");
        let entries: BTreeMap<&str, String> = [
            ("task", self.task.as_str().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("seeds", join(self.seeds.iter().map(u64::to_string).collect())),
            ("samples", self.samples.to_string()),
            ("init_overlap_ratio", self.init.overlap_ratio.to_string()),
            ("init_steps_per_patch", self.init.steps_per_patch.to_string()),
            ("stochasticity", self.init.stochasticity.to_string()),
            ("selection", self.init.selection.as_str().to_string()),
            ("ipr_overlap_ratio", r.refine_scheduler.overlap_ratio.to_string()),
            ("ipr_steps_per_patch", r.refine_scheduler.steps_per_patch.to_string()),
            ("ipr_selection", r.refine_scheduler.selection.as_str().to_string()),
            ("resampling_ratio", r.resampling_ratio.to_string()),
            ("iteration", r.iterations.to_string()),
            ("noise_mode", r.noise_mode.as_str().to_string()),
            ("region_mode", r.region_mode.as_str().to_string()),
            ("snapshot_every", r.snapshot_every.to_string()),
            ("hidden", m.hidden.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("output", m.output.as_str().to_string()),
            ("train_steps", m.train_steps.to_string()),
            ("batch_size", m.batch_size.to_string()),
            ("learning_rate", m.learning_rate.to_string()),
            ("momentum", m.momentum.to_string()),
            ("grad_clip", m.grad_clip.map_or("none".to_string(), |c| c.to_string())),
            ("loss_weighting", m.loss_weighting.as_str().to_string()),
            ("train_seed", m.train_seed.to_string()),
            ("dataset_size", m.dataset_size.to_string()),
            ("codebook_seed", m.codebook_seed.to_string()),
            ("k_list", join(self.k_list.iter().map(usize::to_string).collect())),
            ("ablate_ratios", join(self.ablate_ratios.iter().map(f64::to_string).collect())),
            ("save_samples", self.save_samples.to_string()),
        ]
        .into_iter()
        .collect();
        let section = |name: &str, keys: &[&str]| {
            let mut s = format!("[{name}]\n");
            for k in keys {
                s.push_str(&format!("{k} = {}\n", entries[k]));
            }
            s
        };
        [
            section("experiment", &["task", "checkpoint", "output_dir", "seeds", "samples", "save_samples"]),
            section(
                "inference",
                &["init_overlap_ratio", "init_steps_per_patch", "stochasticity", "selection"],
            ),
            section(
                "refinement",
                &[
                    "ipr_overlap_ratio",
                    "ipr_steps_per_patch",
                    "ipr_selection",
                    "resampling_ratio",
                    "iteration",
                    "noise_mode",
                    "region_mode",
                    "snapshot_every",
                    "k_list",
                    "ablate_ratios",
                ],
            ),
            section(
                "model",
                &[
                    "hidden",
                    "layers",
                    "heads",
                    "output",
                    "train_steps",
                    "batch_size",
                    "learning_rate",
                    "momentum",
                    "grad_clip",
                    "loss_weighting",
                    "train_seed",
                    "dataset_size",
                    "codebook_seed",
                ],
            ),
        ]
        .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_overrides() {
        let text = "# demo\n[inference]\ninit_overlap_ratio = 0.5 # half\ninit_steps_per_patch=4\n\n[refinement]\nresampling_ratio = 0.1\niteration = 7\n";
        let mut pairs = parse_config_text(text).unwrap();
        pairs.push(("iteration".into(), "9".into()));
        let cfg = ExperimentConfig::from_pairs(&pairs, Task::Sudoku4).unwrap();
        assert_eq!(cfg.init.overlap_ratio, 0.5);
        assert_eq!(cfg.init.steps_per_patch, 4);
        assert_eq!(cfg.refinement.resampling_ratio, 0.1);
        assert_eq!(cfg.refinement.iterations, 9);
    }

    #[test]
    fn reference_defaults() {
        let s = ExperimentConfig::defaults(Task::Sudoku4);
        assert_eq!((s.init.overlap_ratio, s.init.steps_per_patch), (0.0, 3));
        let r = &s.refinement.refine_scheduler;
        assert_eq!((r.overlap_ratio, r.steps_per_patch, r.stochasticity), (0.8, 10, 0.5));
        let e = ExperimentConfig::defaults(Task::EvenPixels);
        assert_eq!((e.init.overlap_ratio, e.init.steps_per_patch), (0.9, 30));
        let r = &e.refinement.refine_scheduler;
        assert_eq!((r.overlap_ratio, r.steps_per_patch), (0.9, 30));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_config_text("a = 1\na = 2\n").is_err());
        assert!(parse_config_text("just words\n").is_err());
        assert!(parse_config_text("[broken\n").is_err());
        let p = |k: &str, v: &str| vec![(k.to_string(), v.to_string())];
        assert!(ExperimentConfig::from_pairs(&p("bogus", "1"), Task::Sudoku4).is_err());
        assert!(ExperimentConfig::from_pairs(&p("resampling_ratio", "1.5"), Task::Sudoku4).is_err());
        assert!(ExperimentConfig::from_pairs(&p("seeds", ""), Task::Sudoku4).is_err());
        assert!(ExperimentConfig::from_pairs(&p("samples", "-3"), Task::Sudoku4).is_err());
    }

    #[test]
    fn text_round_trip_and_key_list() {
        let mut cfg = ExperimentConfig::defaults(Task::EvenPixels);
        cfg.seeds = vec![4, 5];
        cfg.model.grad_clip = None;
        let pairs = parse_config_text(&cfg.to_text()).unwrap();
        assert_eq!(ExperimentConfig::from_pairs(&pairs, Task::Sudoku4).unwrap(), cfg);
        let mut keys: Vec<&str> = pairs.iter().map(|(k, _)| k.as_str()).collect();
        keys.sort_unstable();
        let mut all = KEYS.to_vec();
        all.sort_unstable();
        assert_eq!(keys, all);
    }
}
