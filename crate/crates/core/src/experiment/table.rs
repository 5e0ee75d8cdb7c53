//! Result tables: CSV with the fixed header `seed,r,metric,value,n`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::metrics::mean_and_stderr;

pub const HEADER: &str = "seed,r,metric,value,n";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub seed: u64,
    /// Refinement iteration.
    pub r: usize,
    pub metric: String,
    pub value: f64,
    /// Samples the value was computed over.
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<Row>,
}

impl ResultTable {
    pub fn push(&mut self, seed: u64, r: usize, metric: impl Into<String>, value: f64, n: usize) {
        self.rows.push(Row {
            seed,
            r,
            metric: metric.into(),
            value,
            n,
        });
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    pub fn metrics(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.metric.as_str()).collect()
    }

    pub fn value(&self, seed: u64, r: usize, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|x| x.seed == seed && x.r == r && x.metric == metric)
            .map(|x| x.value)
    }

    /// Values are written with Rust's shortest round-trip float formatting,
    /// so the same table always serialises to the same bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.seed, r.r, r.metric, r.value, r.n));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "expected header '{HEADER}', found '{}'",
                    other.unwrap_or("")
                )))
            }
        }
        let mut t = ResultTable::default();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("row {}: expected 5 fields", i + 1)));
            }
            let bad = |what: &str| Error::Format(format!("row {}: bad {what}", i + 1));
            t.rows.push(Row {
                seed: f[0].parse().map_err(|_| bad("seed"))?,
                r: f[1].parse().map_err(|_| bad("iteration"))?,
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad("value"))?,
                n: f[4].parse().map_err(|_| bad("sample count"))?,
            });
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }
}

/// One point of an aggregated curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub r: usize,
    pub mean: f64,
    pub stderr: f64,
    pub seeds: usize,
}

/// Mean and standard error across seeds for every `(metric, r)`. All tables
/// must report the same metrics.
pub fn aggregate(tables: &[ResultTable]) -> Result<BTreeMap<String, Vec<CurvePoint>>> {
    let first = tables.first().ok_or_else(|| Error::Usage("no tables to report".into()))?;
    let schema = first.metrics();
    for t in &tables[1..] {
        if t.metrics() != schema {
            return Err(Error::Format("tables report different metrics".into()));
        }
    }
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for row in tables.iter().flat_map(|t| &t.rows) {
        groups.entry((row.metric.clone(), row.r)).or_default().push(row.value);
    }
    let mut out: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for ((metric, r), values) in groups {
        let (mean, stderr) = mean_and_stderr(&values);
        out.entry(metric).or_default().push(CurvePoint {
            r,
            mean,
            stderr,
            seeds: values.len(),
        });
    }
    Ok(out)
}

/// `r,mean,stderr,seeds` for one metric.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("r,mean,stderr,seeds\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.r, p.mean, p.stderr, p.seeds));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ResultTable {
        let mut t = ResultTable::default();
        t.push(0, 0, "valid_rate", 0.5, 300);
        t.push(0, 1, "valid_rate", 0.1 + 0.2, 300);
        t.push(1, 0, "valid_rate", 1.0 / 3.0, 300);
        t
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample();
        let csv = t.to_csv();
        assert!(csv.starts_with("seed,r,metric,value,n\n"));
        let back = ResultTable::from_csv(&csv).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn bad_csv_rejected() {
        assert!(ResultTable::from_csv("a,b,c\n").is_err());
        assert!(ResultTable::from_csv("seed,r,metric,value,n\n1,2,x\n").is_err());
        assert!(ResultTable::from_csv("seed,r,metric,value,n\n1,2,x,nope,3\n").is_err());
    }

    #[test]
    fn aggregation_by_hand() {
        // three seeds reporting 0.2, 0.4, 0.9 at r = 0:
        // mean 0.5, sample sd sqrt(0.13), stderr sqrt(0.13 / 3)
        let tables: Vec<ResultTable> = [0.2, 0.4, 0.9]
            .iter()
            .enumerate()
            .map(|(s, v)| {
                let mut t = ResultTable::default();
                t.push(s as u64, 0, "m", *v, 10);
                t
            })
            .collect();
        let a = aggregate(&tables).unwrap();
        let p = &a["m"][0];
        assert!((p.mean - 0.5).abs() < 1e-12);
        assert!((p.stderr - (0.13f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(p.seeds, 3);

        let single = aggregate(&tables[..1]).unwrap();
        assert_eq!(single["m"][0].mean, 0.2);
        assert_eq!(single["m"][0].stderr, 0.0);
    }

    #[test]
    fn mismatched_schemas_rejected() {
        let mut other = ResultTable::default();
        other.push(0, 0, "balance_accuracy", 1.0, 1);
        assert!(matches!(aggregate(&[sample(), other]), Err(Error::Format(_))));
    }
}
