mod common;

use std::collections::BTreeSet;

use common::{bitmask_valid, checker_disagreements, enumerate_4x4, evaluator_disagreements};
use ipr_core::tasks::even_pixels::{eval_even_pixels, gen_even_pixels, EvenPixelsImage, PIXELS};
use ipr_core::tasks::sudoku::{all_grids, check_sudoku_valid, gen_sudoku, SudokuGrid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn enumeration_matches_brute_force() {
    let brute: BTreeSet<Vec<u8>> = enumerate_4x4().into_iter().collect();
    assert_eq!(brute.len(), 288);
    let ours: BTreeSet<Vec<u8>> = all_grids(2).unwrap().iter().map(|g| g.digits().unwrap()).collect();
    assert_eq!(ours, brute);
}

#[test]
fn checker_agrees_with_bitmask_oracle() {
    assert_eq!(checker_disagreements(500, 9), 0);
    for g in enumerate_4x4() {
        assert!(check_sudoku_valid(&SudokuGrid::from_digits(2, &g).unwrap()).unwrap().valid);
    }
}

#[test]
fn evaluator_agrees_with_nearest_peak_oracle() {
    assert_eq!(evaluator_disagreements(1000, 10), 0);
}

#[test]
fn generator_output_is_exactly_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let e = eval_even_pixels(&gen_even_pixels(&mut rng));
        assert_eq!((e.pixel_error, e.sat_std, e.val_std), (0, 0.0, 0.0));
    }
    for split in [511, 513] {
        let mask: Vec<bool> = (0..PIXELS).map(|i| i < split).collect();
        let e = eval_even_pixels(&EvenPixelsImage::from_mask(0.95, 0.45, &mask).unwrap());
        assert_eq!(e.pixel_error, 1);
        assert!(!e.balance_pass);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_sudoku_passes_the_bitmask_oracle(seed in any::<u64>(), order in 2usize..=3) {
        let g = gen_sudoku(order, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(bitmask_valid(&g.digits().unwrap(), order));
    }
}
