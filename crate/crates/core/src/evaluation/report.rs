use std::collections::BTreeSet;
use std::fmt::Write;

use crate::error::{Error, Result};

/// One translation direction in a baseline-vs-multitask comparison. Scores
/// are in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub direction: String,
    pub baseline: f64,
    pub mtl: f64,
    pub delta: f64,
    /// `(mtl - baseline) / baseline`; `None` when the baseline is 0.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

pub fn relative_improvement(baseline: f64, mtl: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (mtl - baseline) / baseline)
}

/// Pairs scores by direction, in the order of `directions`.
pub fn compare_report(
    baseline: &[(String, f64)],
    mtl: &[(String, f64)],
    directions: &[String],
) -> Result<ComparisonReport> {
    let keys = |scores: &[(String, f64)]| scores.iter().map(|(d, _)| d.clone()).collect::<BTreeSet<_>>();
    let wanted: BTreeSet<String> = directions.iter().cloned().collect();
    if keys(baseline) != wanted || keys(mtl) != wanted || wanted.len() != directions.len() {
        return Err(Error::Data(format!(
            "direction mismatch: baseline {:?}, mtl {:?}, requested {directions:?}",
            keys(baseline),
            keys(mtl)
        )));
    }
    let lookup = |scores: &[(String, f64)], d: &str| scores.iter().find(|(k, _)| k == d).map(|(_, v)| *v).unwrap();
    let rows = directions
        .iter()
        .map(|d| {
            let (b, m) = (lookup(baseline, d), lookup(mtl, d));
            ComparisonRow { direction: d.clone(), baseline: b, mtl: m, delta: m - b, relative: relative_improvement(b, m) }
        })
        .collect();
    Ok(ComparisonReport { rows })
}

fn signed(x: f64) -> String {
    format!("{}{:.2}", if x >= 0.0 { "+" } else { "" }, x)
}

fn percent(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |r| format!("{}%", signed(r * 100.0)))
}

impl ComparisonReport {
    /// Aligned table with models as rows and directions as columns; BLEU on
    /// the 0-100 scale.
    pub fn render_table(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![vec!["Model".to_string()]];
        cells[0].extend(self.rows.iter().map(|r| r.direction.clone()));
        let line = |label: &str, f: &dyn Fn(&ComparisonRow) -> String| {
            std::iter::once(label.to_string()).chain(self.rows.iter().map(f)).collect::<Vec<_>>()
        };
        cells.push(line("Baseline", &|r| format!("{:.2}", r.baseline * 100.0)));
        cells.push(line("MTL", &|r| format!("{:.2}", r.mtl * 100.0)));
        cells.push(line("Delta", &|r| signed(r.delta * 100.0)));
        cells.push(line("Relative", &|r| percent(r.relative)));

        let widths: Vec<usize> =
            (0..cells[0].len()).map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &cells {
            let mut text = String::new();
            for (c, cell) in row.iter().enumerate() {
                let pad = widths[c] - cell.chars().count();
                if c == 0 {
                    let _ = write!(text, "{cell}{}", " ".repeat(pad));
                } else {
                    let _ = write!(text, "  {}{cell}", " ".repeat(pad));
                }
            }
            out.push_str(text.trim_end());
            out.push('\n');
        }
        out
    }

    /// Tab-separated rows: direction, baseline, mtl, delta (0-100 scale) and
    /// relative improvement in percent.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from("direction\tbaseline\tmtl\tdelta\trelative_pct\n");
        for r in &self.rows {
            let rel = r.relative.map_or_else(|| "NA".to_string(), |v| format!("{:.6}", v * 100.0));
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{rel}",
                r.direction,
                r.baseline * 100.0,
                r.mtl * 100.0,
                r.delta * 100.0
            );
        }
        out
    }
}
