//! Continuous stand-ins for digit images: one fixed vector per symbol.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::sudoku::SudokuGrid;
use crate::error::{Error, Result};
use crate::sampler::Anchors;
use crate::scalar::Scalar;
use crate::schedule::{Layout, RegionSample};

pub const GLYPH_DIM: usize = 8;
pub const MIN_SEPARATION: f64 = 1.0;

/// Unit-norm vectors, one per symbol, pairwise at least [`MIN_SEPARATION`] apart.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphCodebook<T> {
    vectors: Vec<T>,
    dim: usize,
    seed: u64,
}

impl<T: Scalar> GlyphCodebook<T> {
    /// Rejection-samples `symbols` unit vectors until the separation holds.
    pub fn generate(symbols: usize, dim: usize, seed: u64) -> Result<Self> {
        if symbols == 0 || dim == 0 {
            return Err(Error::Usage("codebook needs at least one symbol and dimension".into()));
        }
        if symbols > 1 && dim == 1 && symbols > 2 {
            return Err(Error::Usage("cannot separate more than two unit vectors in 1-D".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            let mut v: Vec<f64> = Vec::with_capacity(symbols * dim);
            for _ in 0..symbols {
                let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.extend(raw.iter().map(|x| x / norm));
            }
            let ok = (0..symbols).all(|i| {
                (i + 1..symbols).all(|j| {
                    let d2: f64 = (0..dim).map(|k| (v[i * dim + k] - v[j * dim + k]).powi(2)).sum();
                    d2.sqrt() >= MIN_SEPARATION
                })
            });
            if ok {
                return Ok(Self {
                    vectors: v.into_iter().map(T::lit).collect(),
                    dim,
                    seed,
                });
            }
        }
        Err(Error::Usage(format!(
            "no {symbols}-symbol codebook of dim {dim} found with separation {MIN_SEPARATION}"
        )))
    }

    pub fn for_sudoku(order: usize, seed: u64) -> Result<Self> {
        Self::generate(order * order, GLYPH_DIM, seed)
    }

    pub fn symbols(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Vector for digit `digit` (1-based).
    pub fn entry(&self, digit: u8) -> &[T] {
        let i = digit as usize - 1;
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_anchors(&self) -> Anchors<'_, T> {
        Anchors::new(&self.vectors, self.dim)
    }

    /// Digit whose vector is nearest to `v` (lowest digit on ties).
    pub fn nearest(&self, v: &[T]) -> u8 {
        let mut best = (T::infinity(), 0usize);
        for (i, c) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d: T = c.iter().zip(v).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        (best.1 + 1) as u8
    }

    /// Root-mean-square coordinate of the codebook (`1/sqrt(dim)` for unit vectors).
    pub fn coordinate_rms(&self) -> f64 {
        let s: f64 = self.vectors.iter().map(|v| v.as_f64().powi(2)).sum();
        (s / self.vectors.len() as f64).sqrt()
    }
}

/// Clean sample with cell `i` holding the vector of its digit.
pub fn encode_grid<T: Scalar>(grid: &SudokuGrid, codebook: &GlyphCodebook<T>) -> Result<RegionSample<T>> {
    if codebook.symbols() != grid.side() {
        return Err(Error::Usage(format!(
            "codebook has {} symbols, grid needs {}",
            codebook.symbols(),
            grid.side()
        )));
    }
    let digits = grid.digits()?;
    let mut data = Vec::with_capacity(digits.len() * codebook.dim());
    for d in digits {
        data.extend_from_slice(codebook.entry(d));
    }
    RegionSample::clean(data, codebook.dim(), Layout::new(grid.side(), grid.side()))
}

/// Nearest-codebook digit for every region.
pub fn decode_sample<T: Scalar>(sample: &RegionSample<T>, codebook: &GlyphCodebook<T>) -> Result<SudokuGrid> {
    if sample.dim() != codebook.dim() {
        return Err(Error::Dimension("sample and codebook dimensions differ".into()));
    }
    let side = codebook.symbols();
    let order = (side as f64).sqrt().round() as usize;
    if order * order != side || sample.n_regions() != side * side {
        return Err(Error::Dimension(format!(
            "{} regions cannot form a grid with {side} symbols",
            sample.n_regions()
        )));
    }
    let digits: Vec<u8> = (0..sample.n_regions()).map(|i| codebook.nearest(sample.region(i))).collect();
    SudokuGrid::from_digits(order, &digits)
}
