//! Noise schedule, per-region noise levels and the forward noising process.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Highest noise level any sampler starts from. The linear schedule has
/// `alpha(1) = 0`, so x0 recovery is only defined strictly below 1.
pub const T_MAX: f64 = 1.0 - 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `alpha(t) = 1 - t`, `sigma(t) = t`.
    #[default]
    Linear,
}

/// The `(alpha_t, sigma_t)` pair as a function of the noise level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
        }
    }

    /// Checked evaluation; errors outside `[0, 1]`.
    pub fn eval<T: Scalar>(&self, t: T) -> Result<(T, T)> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::Domain(t.as_f64()));
        }
        Ok((self.alpha(t), self.sigma(t)))
    }

    #[inline]
    pub fn alpha<T: Scalar>(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::Linear => T::one() - t,
        }
    }

    #[inline]
    pub fn sigma<T: Scalar>(&self, t: T) -> T {
        match self.kind {
            ScheduleKind::Linear => t,
        }
    }

    /// Signal-to-noise ratio `alpha / sigma` (infinite at `t = 0`).
    pub fn snr<T: Scalar>(&self, t: T) -> T {
        self.alpha(t) / self.sigma(t)
    }
}

/// Per-region noise levels `(t_1, ..., t_N)`, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseLevelVector<T>(Vec<T>);

impl<T: Scalar> NoiseLevelVector<T> {
    pub fn new(levels: Vec<T>) -> Result<Self> {
        if let Some(bad) = levels.iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
            return Err(Error::Domain(bad.as_f64()));
        }
        Ok(Self(levels))
    }

    pub fn uniform(n: usize, t: T) -> Result<Self> {
        Self::new(vec![t; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn get(&self, i: usize) -> T {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, t: T) -> Result<()> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::Domain(t.as_f64()));
        }
        self.0[i] = t;
        Ok(())
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

/// Grid arrangement of the regions (cells of a Sudoku, patches of an image).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
}

impl Layout {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    /// A single row of `n` regions.
    pub fn flat(n: usize) -> Self {
        Self { rows: 1, cols: n }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `N` region vectors of a shared dimension `d`, stored contiguously, plus
/// the noise level each region currently sits at.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSample<T> {
    data: Vec<T>,
    dim: usize,
    levels: NoiseLevelVector<T>,
    layout: Layout,
}

impl<T: Scalar> RegionSample<T> {
    pub fn new(data: Vec<T>, dim: usize, levels: NoiseLevelVector<T>, layout: Layout) -> Result<Self> {
        let n = layout.len();
        if dim == 0 {
            return Err(Error::Dimension("region dimension must be positive".into()));
        }
        if data.len() != n * dim {
            return Err(Error::Dimension(format!(
                "{} values for {} regions of dimension {}",
                data.len(),
                n,
                dim
            )));
        }
        if levels.len() != n {
            return Err(Error::Dimension(format!(
                "{} noise levels for {} regions",
                levels.len(),
                n
            )));
        }
        Ok(Self {
            data,
            dim,
            levels,
            layout,
        })
    }

    /// Clean sample: every region at noise level 0.
    pub fn clean(data: Vec<T>, dim: usize, layout: Layout) -> Result<Self> {
        Self::new(data, dim, NoiseLevelVector::zeros(layout.len()), layout)
    }

    pub fn n_regions(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn levels(&self) -> &NoiseLevelVector<T> {
        &self.levels
    }

    pub fn level(&self, i: usize) -> T {
        self.levels.get(i)
    }

    pub fn set_level(&mut self, i: usize, t: T) -> Result<()> {
        self.levels.set(i, t)
    }

    pub fn region(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn region_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn is_clean(&self) -> bool {
        self.levels.as_slice().iter().all(|t| *t == T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same regions converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> RegionSample<U> {
        let conv = |v: &T| U::lit(v.as_f64());
        RegionSample {
            data: self.data.iter().map(conv).collect(),
            dim: self.dim,
            levels: NoiseLevelVector(self.levels.as_slice().iter().map(conv).collect()),
            layout: self.layout,
        }
    }
}

/// `x_t[i] = alpha(t_i) * x0[i] + sigma(t_i) * eps[i]` for every region.
pub fn forward_noise<T: Scalar>(
    schedule: &NoiseSchedule,
    x0: &RegionSample<T>,
    levels: &NoiseLevelVector<T>,
    eps: &[T],
) -> Result<RegionSample<T>> {
    if !x0.is_clean() {
        return Err(Error::Input("forward_noise expects a clean sample".into()));
    }
    let n = x0.n_regions();
    let d = x0.dim();
    if levels.len() != n || eps.len() != n * d {
        return Err(Error::Dimension(format!(
            "sample has {n} regions of dim {d}; got {} levels and {} noise values",
            levels.len(),
            eps.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let (a, s) = schedule.eval(levels.get(i))?;
        let e = &eps[i * d..(i + 1) * d];
        data.extend(x0.region(i).iter().zip(e).map(|(&x, &e)| a * x + s * e));
    }
    RegionSample::new(data, d, levels.clone(), x0.layout())
}

/// Clean-region estimate `(x_t - sigma(t) eps_hat) / alpha(t)` for one region.
pub fn predict_x0<T: Scalar>(
    schedule: &NoiseSchedule,
    x_t: &RegionSample<T>,
    eps_hat: &[T],
    region: usize,
) -> Result<Vec<T>> {
    let d = x_t.dim();
    if eps_hat.len() != x_t.n_regions() * d {
        return Err(Error::Dimension(format!(
            "eps_hat has {} values, sample has {}",
            eps_hat.len(),
            x_t.n_regions() * d
        )));
    }
    if region >= x_t.n_regions() {
        return Err(Error::Dimension(format!("region {region} out of range")));
    }
    let t = x_t.level(region);
    let mut out = vec![T::zero(); d];
    predict_x0_into(schedule, t, x_t.region(region), &eps_hat[region * d..(region + 1) * d], &mut out)?;
    Ok(out)
}

/// Slice form of [`predict_x0`] used in the sampler's inner loop.
pub fn predict_x0_into<T: Scalar>(
    schedule: &NoiseSchedule,
    t: T,
    x_t: &[T],
    eps_hat: &[T],
    out: &mut [T],
) -> Result<()> {
    let (a, s) = schedule.eval(t)?;
    if a <= T::zero() {
        return Err(Error::Singular(t.as_f64()));
    }
    for ((o, &x), &e) in out.iter_mut().zip(x_t).zip(eps_hat) {
        *o = (x - s * e) / a;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear()
    }

    #[test]
    fn boundary_values() {
        assert_eq!(sched().eval(0.0f64).unwrap(), (1.0, 0.0));
        assert_eq!(sched().eval(1.0f64).unwrap(), (0.0, 1.0));
        assert_eq!(sched().eval(0.5f64).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn out_of_domain() {
        assert!(matches!(sched().eval(1.5f64), Err(Error::Domain(_))));
        assert!(matches!(sched().eval(-0.01f32), Err(Error::Domain(_))));
        assert!(sched().eval(f64::NAN).is_err());
        assert!(NoiseLevelVector::new(vec![0.2, 1.2]).is_err());
    }

    fn sample(n: usize, d: usize, seed: u64) -> RegionSample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        RegionSample::clean(data, d, Layout::flat(n)).unwrap()
    }

    #[test]
    fn forward_noise_boundaries() {
        let x0 = sample(4, 3, 1);
        let eps: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let zero = forward_noise(&sched(), &x0, &NoiseLevelVector::zeros(4), &eps).unwrap();
        assert_eq!(zero.as_slice(), x0.as_slice());
        let one = forward_noise(&sched(), &x0, &NoiseLevelVector::uniform(4, 1.0).unwrap(), &eps).unwrap();
        assert_eq!(one.as_slice(), &eps[..]);
        assert_eq!(one.levels().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn forward_noise_shape_errors() {
        let x0 = sample(4, 3, 1);
        let r = forward_noise(&sched(), &x0, &NoiseLevelVector::zeros(4), &[0.0; 11]);
        assert!(matches!(r, Err(Error::Dimension(_))));
        let r = forward_noise(&sched(), &x0, &NoiseLevelVector::zeros(3), &[0.0; 12]);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn predict_x0_identity_and_singularity() {
        let x0 = sample(2, 3, 7);
        let eps = [0.3; 6];
        let same = predict_x0(&sched(), &x0, &eps, 1).unwrap();
        assert_eq!(same, x0.region(1));

        let noisy = forward_noise(&sched(), &x0, &NoiseLevelVector::uniform(2, 1.0).unwrap(), &eps).unwrap();
        assert!(matches!(predict_x0(&sched(), &noisy, &eps, 0), Err(Error::Singular(_))));
    }

    #[test]
    fn predict_x0_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = 5;
        let data: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps_hat: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x_t = RegionSample::new(
            data.clone(),
            d,
            NoiseLevelVector::new(vec![0.3]).unwrap(),
            Layout::flat(1),
        )
        .unwrap();
        let got = predict_x0(&sched(), &x_t, &eps_hat, 0).unwrap();
        for k in 0..d {
            let want = (data[k] - 0.3 * eps_hat[k]) / 0.7;
            assert!((got[k] - want).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn round_trip_recovers_x0(
            seed in 0u64..1000,
            t in 0.0f64..=0.99,
        ) {
            let x0 = sample(3, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let eps: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
            let lv = NoiseLevelVector::uniform(3, t).unwrap();
            let xt = forward_noise(&sched(), &x0, &lv, &eps).unwrap();
            for i in 0..3 {
                let rec = predict_x0(&sched(), &xt, &eps, i).unwrap();
                for (r, x) in rec.iter().zip(x0.region(i)) {
                    prop_assert!((r - x).abs() <= 1e-6 * x.abs().max(1.0));
                }
            }
        }

        #[test]
        fn snr_strictly_decreasing(a in 1e-6f64..(1.0 - 1e-6), b in 1e-6f64..(1.0 - 1e-6)) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(sched().snr(lo) > sched().snr(hi));
        }

        #[test]
        fn forward_noise_deterministic(seed in 0u64..500, t in 0.0f64..=1.0) {
            let x0 = sample(2, 2, seed);
            let eps = [0.1, -0.2, 0.3, 0.9];
            let lv = NoiseLevelVector::uniform(2, t).unwrap();
            let a = forward_noise(&sched(), &x0, &lv, &eps).unwrap();
            let b = forward_noise(&sched(), &x0, &lv, &eps).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
