//! Sudoku grids of order `n` (side `n^2`): generation, validity and hints.

use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SudokuGrid {
    order: usize,
    cells: Vec<Option<u8>>,
}

impl SudokuGrid {
    pub fn empty(order: usize) -> Self {
        let side = order * order;
        Self {
            order,
            cells: vec![None; side * side],
        }
    }

    pub fn from_digits(order: usize, digits: &[u8]) -> Result<Self> {
        let side = order * order;
        if digits.len() != side * side {
            return Err(Error::Input(format!("{} digits for a {side}x{side} grid", digits.len())));
        }
        if let Some(d) = digits.iter().find(|d| **d == 0 || **d as usize > side) {
            return Err(Error::Input(format!("digit {d} out of range 1..={side}")));
        }
        Ok(Self {
            order,
            cells: digits.iter().map(|d| Some(*d)).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn side(&self) -> usize {
        self.order * self.order
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, cell: usize) -> Option<u8> {
        self.cells[cell]
    }

    pub fn set(&mut self, cell: usize, digit: Option<u8>) {
        self.cells[cell] = digit;
    }

    pub fn cells(&self) -> &[Option<u8>] {
        &self.cells
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Digits of a complete grid.
    pub fn digits(&self) -> Result<Vec<u8>> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Input(format!("cell {i} is empty"))))
            .collect()
    }

    pub fn box_of(&self, cell: usize) -> usize {
        let (r, c) = (cell / self.side(), cell % self.side());
        (r / self.order) * self.order + c / self.order
    }

    /// The `3 n^2` constraint units (rows, columns, boxes) as cell lists.
    pub fn units(&self) -> Vec<Vec<usize>> {
        let (n, side) = (self.order, self.side());
        let mut units = Vec::with_capacity(3 * side);
        for r in 0..side {
            units.push((0..side).map(|c| r * side + c).collect());
        }
        for c in 0..side {
            units.push((0..side).map(|r| r * side + c).collect());
        }
        for b in 0..side {
            let (br, bc) = ((b / n) * n, (b % n) * n);
            units.push(
                (0..side)
                    .map(|k| (br + k / n) * side + bc + k % n)
                    .collect(),
            );
        }
        units
    }

    /// One row per line, digits separated by single spaces, `.` for empty.
    pub fn to_text(&self) -> String {
        let side = self.side();
        let mut s = String::new();
        for r in 0..side {
            let row: Vec<String> = (0..side)
                .map(|c| match self.cells[r * side + c] {
                    Some(d) => d.to_string(),
                    None => ".".to_string(),
                })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<&str>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.split_whitespace().collect())
            .collect();
        let side = rows.len();
        let order = (side as f64).sqrt().round() as usize;
        if order * order != side || order == 0 || rows.iter().any(|r| r.len() != side) {
            return Err(Error::Format(format!("{side} rows do not form a square Sudoku")));
        }
        let mut g = Self::empty(order);
        for (r, row) in rows.iter().enumerate() {
            for (c, tok) in row.iter().enumerate() {
                if *tok == "." {
                    continue;
                }
                let d: u8 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("bad cell '{tok}'")))?;
                if d == 0 || d as usize > side {
                    return Err(Error::Format(format!("digit {d} out of range")));
                }
                g.cells[r * side + c] = Some(d);
            }
        }
        Ok(g)
    }
}

impl fmt::Display for SudokuGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn check_order(n: usize) -> Result<()> {
    if n == 2 || n == 3 {
        Ok(())
    } else {
        Err(Error::Usage(format!("Sudoku order must be 2 or 3, got {n}")))
    }
}

/// Random complete grid by randomized backtracking.
pub fn gen_sudoku<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SudokuGrid> {
    check_order(n)?;
    let mut g = SudokuGrid::empty(n);
    let side = g.side();
    let mut digits: Vec<Vec<u8>> = Vec::with_capacity(g.len());
    for _ in 0..g.len() {
        let mut d: Vec<u8> = (1..=side as u8).collect();
        d.shuffle(rng);
        digits.push(d);
    }
    let solved = fill(&mut g, 0, &mut |cell, _g| digits[cell].clone());
    debug_assert!(solved);
    Ok(g)
}

fn allowed(g: &SudokuGrid, cell: usize, d: u8) -> bool {
    let side = g.side();
    let (r, c) = (cell / side, cell % side);
    let b = g.box_of(cell);
    (0..g.len()).all(|o| {
        o == cell
            || g.cells[o] != Some(d)
            || !(o / side == r || o % side == c || g.box_of(o) == b)
    })
}

fn fill(g: &mut SudokuGrid, cell: usize, order: &mut dyn FnMut(usize, &SudokuGrid) -> Vec<u8>) -> bool {
    if cell == g.len() {
        return true;
    }
    if g.cells[cell].is_some() {
        return fill(g, cell + 1, order);
    }
    for d in order(cell, g) {
        if allowed(g, cell, d) {
            g.cells[cell] = Some(d);
            if fill(g, cell + 1, order) {
                return true;
            }
            g.cells[cell] = None;
        }
    }
    false
}

/// Every complete grid of order `n`, in lexicographic order. Only practical
/// for `n = 2` (288 grids).
pub fn all_grids(n: usize) -> Result<Vec<SudokuGrid>> {
    if n != 2 {
        return Err(Error::Usage("exhaustive enumeration is limited to 4x4 grids".into()));
    }
    fn walk(g: &mut SudokuGrid, cell: usize, out: &mut Vec<SudokuGrid>) {
        if cell == g.len() {
            out.push(g.clone());
            return;
        }
        for d in 1..=g.side() as u8 {
            if allowed(g, cell, d) {
                g.cells[cell] = Some(d);
                walk(g, cell + 1, out);
                g.cells[cell] = None;
            }
        }
    }
    let mut out = Vec::new();
    walk(&mut SudokuGrid::empty(n), 0, &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Validity {
    pub valid: bool,
    /// Every cell sharing a digit with another cell of the same unit, sorted.
    pub violations: Vec<usize>,
}

pub fn check_sudoku_valid(grid: &SudokuGrid) -> Result<Validity> {
    let side = grid.side();
    if grid.len() != side * side || side == 0 {
        return Err(Error::Input("malformed grid".into()));
    }
    let digits = grid.digits()?;
    if let Some(d) = digits.iter().find(|d| **d == 0 || **d as usize > side) {
        return Err(Error::Input(format!("digit {d} out of range")));
    }
    let mut bad = vec![false; grid.len()];
    for unit in grid.units() {
        let mut seen: Vec<Vec<usize>> = vec![Vec::new(); side + 1];
        for &c in &unit {
            seen[digits[c] as usize].push(c);
        }
        for cells in seen.iter().filter(|v| v.len() > 1) {
            for &c in cells {
                bad[c] = true;
            }
        }
    }
    let violations: Vec<usize> = (0..grid.len()).filter(|c| bad[*c]).collect();
    Ok(Validity {
        valid: violations.is_empty(),
        violations,
    })
}

/// Clue cells of a HARD-setting puzzle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HintCondition {
    /// Sorted cell indices.
    pub cells: Vec<usize>,
    pub digits: Vec<u8>,
}

/// Largest hint count for a grid order: 26 for 9x9, 5 for 4x4.
pub fn max_hints(order: usize) -> usize {
    match order {
        3 => 26,
        _ => 5,
    }
}

/// `N_hint ~ U{0..max_hints}`, positions uniform without replacement.
pub fn make_hint_condition<R: Rng + ?Sized>(grid: &SudokuGrid, rng: &mut R) -> Result<HintCondition> {
    check_order(grid.order())?;
    let count = rng.random_range(0..=max_hints(grid.order()));
    let mut cells = index::sample(rng, grid.len(), count).into_vec();
    cells.sort_unstable();
    let digits = cells
        .iter()
        .map(|&c| grid.get(c).ok_or_else(|| Error::Input(format!("hint cell {c} is empty"))))
        .collect::<Result<_>>()?;
    Ok(HintCondition { cells, digits })
}
