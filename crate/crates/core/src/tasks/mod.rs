//! Benchmark tasks: glyph Sudoku and Even Pixels.

pub mod even_pixels;
pub mod glyph;
pub mod io;
pub mod metrics;
pub mod sudoku;

use crate::error::{Error, Result};
use crate::schedule::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Sudoku4,
    Sudoku9,
    EvenPixels,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Sudoku4 => "sudoku4",
            Task::Sudoku9 => "sudoku9",
            Task::EvenPixels => "even_pixels",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sudoku4" => Ok(Task::Sudoku4),
            "sudoku9" => Ok(Task::Sudoku9),
            "even_pixels" => Ok(Task::EvenPixels),
            _ => Err(Error::Config(format!("unknown task '{s}'"))),
        }
    }

    /// Sudoku order `n` (cells are `n^2 x n^2`).
    pub fn sudoku_order(&self) -> Option<usize> {
        match self {
            Task::Sudoku4 => Some(2),
            Task::Sudoku9 => Some(3),
            Task::EvenPixels => None,
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            Task::Sudoku4 => Layout::new(4, 4),
            Task::Sudoku9 => Layout::new(9, 9),
            Task::EvenPixels => Layout::new(even_pixels::PATCHES_PER_SIDE, even_pixels::PATCHES_PER_SIDE),
        }
    }

    pub fn region_dim(&self) -> usize {
        match self {
            Task::Sudoku4 | Task::Sudoku9 => glyph::GLYPH_DIM,
            Task::EvenPixels => even_pixels::PATCH_DIM,
        }
    }
}
