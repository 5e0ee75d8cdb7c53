//! Per-sample evaluation and batch aggregation.

use super::even_pixels::{eval_even_pixels, EvenPixelsEval, EvenPixelsImage};
use super::glyph::{decode_sample, GlyphCodebook};
use super::sudoku::{check_sudoku_valid, SudokuGrid};
use super::Task;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::RegionSample;

#[derive(Clone, Debug, PartialEq)]
pub enum SampleEval {
    Sudoku {
        grid: SudokuGrid,
        valid: bool,
        violations: Vec<usize>,
    },
    EvenPixels(EvenPixelsEval),
}

impl SampleEval {
    fn kind(&self) -> &'static str {
        match self {
            SampleEval::Sudoku { .. } => "sudoku",
            SampleEval::EvenPixels(_) => "even_pixels",
        }
    }
}

/// Decodes and evaluates one finished sample.
pub fn evaluate_sample<T: Scalar>(
    task: Task,
    sample: &RegionSample<T>,
    codebook: Option<&GlyphCodebook<T>>,
) -> Result<SampleEval> {
    match task {
        Task::Sudoku4 | Task::Sudoku9 => {
            let cb = codebook.ok_or_else(|| Error::Usage("Sudoku evaluation needs a codebook".into()))?;
            let grid = decode_sample(sample, cb)?;
            let v = check_sudoku_valid(&grid)?;
            Ok(SampleEval::Sudoku {
                grid,
                valid: v.valid,
                violations: v.violations,
            })
        }
        Task::EvenPixels => Ok(SampleEval::EvenPixels(eval_even_pixels(&EvenPixelsImage::from_regions(sample)?))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub name: &'static str,
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation over `sqrt(n)`).
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub metrics: Vec<MetricSummary>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summary(name: &'static str, xs: &[f64]) -> MetricSummary {
    let (mean, stderr) = mean_and_stderr(xs);
    MetricSummary { name, mean, stderr }
}

/// Sudoku: `valid_rate`. Even Pixels: `balance_accuracy`, `pixel_error`,
/// `sat_std`, `val_std`.
pub fn batch_metrics(evals: &[SampleEval]) -> Result<EvalReport> {
    let first = evals.first().ok_or_else(|| Error::Usage("empty evaluation batch".into()))?;
    if let Some(other) = evals.iter().find(|e| e.kind() != first.kind()) {
        return Err(Error::Usage(format!(
            "mixed tasks in one batch: {} and {}",
            first.kind(),
            other.kind()
        )));
    }
    let metrics = match first {
        SampleEval::Sudoku { .. } => {
            let valid: Vec<f64> = evals
                .iter()
                .map(|e| match e {
                    SampleEval::Sudoku { valid, .. } => f64::from(u8::from(*valid)),
                    _ => unreachable!(),
                })
                .collect();
            vec![summary("valid_rate", &valid)]
        }
        SampleEval::EvenPixels(_) => {
            let ep: Vec<&EvenPixelsEval> = evals
                .iter()
                .map(|e| match e {
                    SampleEval::EvenPixels(x) => x,
                    _ => unreachable!(),
                })
                .collect();
            let col = |f: &dyn Fn(&EvenPixelsEval) -> f64| ep.iter().map(|e| f(e)).collect::<Vec<f64>>();
            vec![
                summary("balance_accuracy", &col(&|e| f64::from(u8::from(e.balance_pass)))),
                summary("pixel_error", &col(&|e| e.pixel_error as f64)),
                summary("sat_std", &col(&|e| e.sat_std)),
                summary("val_std", &col(&|e| e.val_std)),
            ]
        }
    };
    Ok(EvalReport {
        samples: evals.len(),
        metrics,
    })
}
