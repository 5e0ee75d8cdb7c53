//! Mixed-noise denoising objective and SGD-with-momentum training loop.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{DenoiserModel, Workspace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{NoiseLevelVector, RegionSample};

/// Default mixture over the three noise-configuration families.
pub const DEFAULT_MIX: [f64; 3] = [0.6, 0.2, 0.2];

const DIVERGENCE_LOSS: f64 = 1e6;

/// Which family a noise-level draw came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseFamily {
    /// `t_i ~ U[0, 1]` independently per region.
    Independent,
    /// One `t ~ U[0, 1]` shared by every region.
    Shared,
    /// A random subset at `t = 1`, the rest clean.
    Binary,
}

/// Per-region weighting of the squared noise error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// Every coordinate counts equally.
    Uniform,
    /// Weight `1 / c_out(t)^2` (capped at [`MAX_LOSS_WEIGHT`]): the error of
    /// the network's residual output, which has unit-variance targets at
    /// every level. Under plain weighting a nearly pure-noise region's error is
    /// scaled by `alpha^2` and teaches the network almost nothing about its
    /// clean content. Same minimiser as `Uniform`.
    #[default]
    UnitTarget,
}

pub const MAX_LOSS_WEIGHT: f64 = 1e4;

impl LossWeighting {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossWeighting::Uniform => "uniform",
            LossWeighting::UnitTarget => "unit_target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LossWeighting::Uniform),
            "unit_target" => Ok(LossWeighting::UnitTarget),
            _ => Err(Error::Config(format!("unknown loss weighting '{s}'"))),
        }
    }

    /// Weight of a region at level `t`, or `None` for uniform weighting.
    pub fn weights<T: Scalar>(&self, model: &DenoiserModel<T>, levels: &[T]) -> Option<Vec<T>> {
        match self {
            LossWeighting::Uniform => None,
            LossWeighting::UnitTarget => Some(
                levels
                    .iter()
                    .map(|t| {
                        let (_, c_out) = model.output_coefficients(*t);
                        let c2 = c_out.as_f64().powi(2);
                        T::lit((1.0 / c2.max(1.0 / MAX_LOSS_WEIGHT)).min(MAX_LOSS_WEIGHT))
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub mix_weights: [f64; 3],
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub loss_weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            steps: 1000,
            mix_weights: DEFAULT_MIX,
            seed: 0,
            grad_clip: Some(1.0),
            loss_weighting: LossWeighting::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.mix_weights.iter().any(|w| *w < 0.0) || (self.mix_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mix weights must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

/// Noise-level vector drawn from the default mixture.
pub fn sample_noise_config<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> NoiseLevelVector<T> {
    sample_noise_config_with(n, &DEFAULT_MIX, rng).1
}

pub fn sample_noise_config_with<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    weights: &[f64; 3],
    rng: &mut R,
) -> (NoiseFamily, NoiseLevelVector<T>) {
    let u: f64 = rng.random();
    let family = if u < weights[0] {
        NoiseFamily::Independent
    } else if u < weights[0] + weights[1] {
        NoiseFamily::Shared
    } else {
        NoiseFamily::Binary
    };
    let levels = match family {
        NoiseFamily::Independent => (0..n).map(|_| T::lit(rng.random::<f64>())).collect(),
        NoiseFamily::Shared => vec![T::lit(rng.random::<f64>()); n],
        NoiseFamily::Binary => {
            // subset size uniform on 0..=n, then a uniform subset of that size
            let k = rng.random_range(0..=n);
            let mut v = vec![T::zero(); n];
            for i in index::sample(rng, n, k) {
                v[i] = T::one();
            }
            v
        }
    };
    (family, NoiseLevelVector::new(levels).expect("levels drawn in [0, 1]"))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
}

/// A noisy training batch: `x_t`, levels and the noise that produced it.
pub struct NoisyBatch<T> {
    pub x: Vec<T>,
    pub levels: Vec<T>,
    pub eps: Vec<T>,
    pub batch: usize,
}

pub fn draw_batch<T: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    dataset: &[RegionSample<T>],
    batch: usize,
    weights: &[f64; 3],
    rng: &mut R,
) -> NoisyBatch<T> {
    let n = model.config().n_regions;
    let d = model.config().dim;
    let sched = *model.schedule();
    let mut out = NoisyBatch {
        x: Vec::with_capacity(batch * n * d),
        levels: Vec::with_capacity(batch * n),
        eps: Vec::with_capacity(batch * n * d),
        batch,
    };
    for _ in 0..batch {
        let item = &dataset[rng.random_range(0..dataset.len())];
        let (_, lv) = sample_noise_config_with::<T, _>(n, weights, rng);
        for i in 0..n {
            let t = lv.get(i);
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            for &x0 in item.region(i) {
                let e = T::lit(StandardNormal.sample(rng));
                out.x.push(a * x0 + s * e);
                out.eps.push(e);
            }
        }
        out.levels.extend_from_slice(lv.as_slice());
    }
    out
}

/// Trains `model` in place on clean samples; returns the per-step loss.
pub fn train<T: Scalar>(
    model: &mut DenoiserModel<T>,
    dataset: &[RegionSample<T>],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(TrainReport::default());
    }
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let (n, d) = (model.config().n_regions, model.config().dim);
    if let Some(bad) = dataset.iter().find(|s| s.n_regions() != n || s.dim() != d) {
        return Err(Error::Dimension(format!(
            "training sample has {} regions of dim {}, model expects {n} x {d}",
            bad.n_regions(),
            bad.dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = vec![T::zero(); model.param_count()];
    let mut grad = vec![T::zero(); model.param_count()];
    let mut ws = Workspace::new();
    let lr = T::lit(config.learning_rate);
    let mu = T::lit(config.momentum);
    let mut report = TrainReport {
        losses: Vec::with_capacity(config.steps),
    };

    for step in 0..config.steps {
        let b = draw_batch(model, dataset, config.batch_size, &config.mix_weights, &mut rng);
        grad.fill(T::zero());
        let w = config.loss_weighting.weights(model, &b.levels);
        let loss = model
            .loss_and_grad_in(&mut ws, &b.x, &b.levels, &b.eps, w.as_deref(), b.batch, &mut grad)
            .as_f64();
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::TrainingDiverged { step, loss });
        }
        report.losses.push(loss);

        if let Some(clip) = config.grad_clip {
            let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
            if norm > clip {
                let s = T::lit(clip / norm);
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for ((p, v), g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = mu * *v + *g;
            *p -= lr * *v;
        }
    }
    Ok(report)
}
