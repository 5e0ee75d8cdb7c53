mod common;

use common::gaussian::{optimal_eps, test_grid, trained_mse, MEAN, STD};

#[test]
fn optimal_eps_matches_monte_carlo_posterior() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal, StandardNormal};
    // bin (x0, eps) draws by x_t and compare the bin average of eps
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let prior = Normal::new(MEAN, STD).unwrap();
    let t = 0.6;
    let target = 0.4;
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..400_000 {
        let x0: f64 = prior.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        let x = (1.0 - t) * x0 + t * e;
        if (x - target).abs() < 0.01 {
            sum += e;
            count += 1;
        }
    }
    assert!((sum / count as f64 - optimal_eps(target, t)).abs() < 0.03);
}

#[test]
fn trained_denoiser_reaches_the_optimum() {
    assert_eq!(test_grid().len(), 50);
    let mse = trained_mse(1, 3000);
    assert!(mse < 0.02, "mse {mse}");
}
