//! Central finite-difference check of the hand-written backward pass.

use rand::seq::index;
use rand::Rng;

use super::model::DenoiserModel;
use crate::error::{Error, Result};
use crate::schedule::RegionSample;

pub const FD_STEP: f64 = 1e-4;
pub const CHECK_FRACTION: f64 = 0.01;
/// Both derivatives below this magnitude compare as equal.
const ZERO_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub indices: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both are negligible.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Checks a random 1% of the parameters (at least one, when any exist).
pub fn gradient_check<R: Rng + ?Sized>(
    model: &DenoiserModel<f64>,
    sample: &RegionSample<f64>,
    eps_target: &[f64],
    rng: &mut R,
) -> Result<GradCheckReport> {
    let total = model.param_count();
    let k = ((total as f64 * CHECK_FRACTION).ceil() as usize).min(total);
    let mut indices = index::sample(rng, total, k).into_vec();
    indices.sort_unstable();
    check_gradient_entries(model, sample, eps_target, &indices, |_| {})
}

/// Compares analytic and finite-difference gradients on `indices`.
///
/// `tamper` may modify the analytic gradient before comparison, which is how
/// the checker's own fault detection is exercised.
pub fn check_gradient_entries(
    model: &DenoiserModel<f64>,
    sample: &RegionSample<f64>,
    eps_target: &[f64],
    indices: &[usize],
    tamper: impl FnOnce(&mut [f64]),
) -> Result<GradCheckReport> {
    let cfg = model.config();
    if sample.n_regions() != cfg.n_regions || sample.dim() != cfg.dim || eps_target.len() != sample.as_slice().len() {
        return Err(Error::Dimension("gradient check inputs do not match the model".into()));
    }
    if let Some(bad) = indices.iter().find(|i| **i >= model.param_count()) {
        return Err(Error::Dimension(format!("parameter index {bad} out of range")));
    }
    let x = sample.as_slice();
    let t = sample.levels().as_slice();

    let mut grad = vec![0.0; model.param_count()];
    model.loss_and_grad(x, t, eps_target, None, 1, &mut grad);
    tamper(&mut grad);

    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for &i in indices {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + FD_STEP;
        let up = probe.loss(x, t, eps_target, None, 1);
        probe.params_mut()[i] = orig - FD_STEP;
        let down = probe.loss(x, t, eps_target, None, 1);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        max_rel = max_rel.max(relative_error(grad[i], numeric));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        indices: indices.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::model::{ModelConfig, OutputParam};
    use crate::schedule::{Layout, NoiseLevelVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup(seed: u64, output: OutputParam) -> (DenoiserModel<f64>, RegionSample<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ModelConfig::new(4, 3, 8, 2);
        cfg.heads = 2;
        cfg.output = output;
        cfg.data_std = 0.5;
        let m = DenoiserModel::new(cfg, &mut rng).unwrap();
        let data = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let lv = NoiseLevelVector::new((0..4).map(|_| rng.random::<f64>()).collect()).unwrap();
        let s = RegionSample::new(data, 3, lv, Layout::flat(4)).unwrap();
        let eps = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        (m, s, eps)
    }

    #[test]
    fn every_parameter_matches_finite_differences() {
        for output in [OutputParam::Direct, OutputParam::Preconditioned] {
            let (m, s, eps) = setup(11, output);
            let all: Vec<usize> = (0..m.param_count()).collect();
            let r = check_gradient_entries(&m, &s, &eps, &all, |_| {}).unwrap();
            assert!(r.max_rel_error < 1e-4, "{output:?}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let (m, s, eps) = setup(12, OutputParam::Preconditioned);
        let mut grad = vec![0.0; m.param_count()];
        m.loss_and_grad(s.as_slice(), s.levels().as_slice(), &eps, None, 1, &mut grad);
        let target = (0..grad.len()).max_by(|a, b| grad[*a].abs().total_cmp(&grad[*b].abs())).unwrap();
        let r = check_gradient_entries(&m, &s, &eps, &[target], |g| g[target] *= 2.0).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn weighted_loss_gradient_matches_finite_differences() {
        let (mut m, s, eps) = setup(14, OutputParam::Preconditioned);
        let (x, t) = (s.as_slice(), s.levels().as_slice());
        let w: Vec<f64> = (0..4).map(|i| 0.5 + i as f64).collect();
        let mut grad = vec![0.0; m.param_count()];
        m.loss_and_grad(x, t, &eps, Some(&w), 1, &mut grad);
        for i in 0..m.param_count() {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + FD_STEP;
            let up = m.loss(x, t, &eps, Some(&w), 1);
            m.params_mut()[i] = orig - FD_STEP;
            let down = m.loss(x, t, &eps, Some(&w), 1);
            m.params_mut()[i] = orig;
            let rel = relative_error(grad[i], (up - down) / (2.0 * FD_STEP));
            assert!(rel < 1e-4, "param {i}: {rel}");
        }
    }

    #[test]
    fn empty_comparison_is_zero() {
        let (m, s, eps) = setup(13, OutputParam::Direct);
        let r = check_gradient_entries(&m, &s, &eps, &[], |_| {}).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-12), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
