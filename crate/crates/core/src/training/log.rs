use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::loss::LossBreakdown;
use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "step\tl_t\tl_clm_src\tl_clm_tgt\tl_mtl\tvalidation_loss";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub losses: LossBreakdown,
    pub validation: Option<f64>,
}

impl MetricRow {
    pub fn to_line(&self) -> String {
        let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.8}"));
        format!(
            "{}\t{}\t{}\t{}\t{:.8}\t{}",
            self.step,
            f(self.losses.l_t),
            f(self.losses.l_clm_src),
            f(self.losses.l_clm_tgt),
            self.losses.l_mtl,
            f(self.validation)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed metric line `{line}`"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        let (l_clm_src, l_clm_tgt) = (opt(fields[2])?, opt(fields[3])?);
        Ok(Self {
            step: fields[0].parse().map_err(|_| bad())?,
            losses: LossBreakdown {
                l_t: opt(fields[1])?,
                l_clm_src,
                l_clm_tgt,
                l_clm: l_clm_src.unwrap_or(0.0) + l_clm_tgt.unwrap_or(0.0),
                l_mtl: fields[4].parse().map_err(|_| bad())?,
            },
            validation: opt(fields[5])?,
        })
    }
}

/// Append-only tab-separated metric log, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
    file: Option<(PathBuf, File)>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Starts a fresh log file, replacing any existing one.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self { rows: Vec::new(), file: Some((path.to_path_buf(), file)) })
    }

    /// Reopens a log for a run resumed at `step`, dropping rows written after it.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<MetricRow> =
            Self::parse(&text)?.into_iter().filter(|r| r.step <= step).collect();
        let mut log = Self::create(path)?;
        for row in rows {
            log.push(row)?;
        }
        Ok(log)
    }

    pub fn parse(text: &str) -> Result<Vec<MetricRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Data("metric log is missing its header".into()));
        }
        lines.filter(|l| !l.is_empty()).map(MetricRow::parse).collect()
    }

    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some((path, file)) = &mut self.file {
            writeln!(file, "{}", row.to_line())
                .and_then(|()| file.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn render(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_line());
            out.push('\n');
        }
        out
    }
}

