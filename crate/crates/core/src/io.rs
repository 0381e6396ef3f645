//! CSV formats for sample paths and fBm dumps. Every number is written with
//! 17 significant digits so that reading a file back restores the doubles
//! exactly.

use std::fmt::Write as _;

use thiserror::Error;

use crate::fgn::FbmPath;
use crate::model::SamplePath;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CsvError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unexpected header {found:?}")]
    Header { found: String },
    #[error("grid is not uniform with spacing 1/m")]
    Grid,
}

fn push_f64(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

/// `t,x[,db]`; `db` holds the sigma-free increment over `[t_k, t_{k+1}]` and
/// is empty on the last row.
pub fn path_csv(path: &SamplePath, with_driver: bool) -> String {
    let driver = path.driver_increments.as_ref().filter(|_| with_driver);
    let mut out = String::from(if driver.is_some() { "t,x,db\n" } else { "t,x\n" });
    for (k, &x) in path.x.iter().enumerate() {
        push_f64(&mut out, path.time(k));
        out.push(',');
        push_f64(&mut out, x);
        if let Some(db) = driver {
            out.push(',');
            if let Some(&d) = db.get(k) {
                push_f64(&mut out, d);
            }
        }
        out.push('\n');
    }
    out
}

/// Columns of a path file.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub db: Option<Vec<f64>>,
}

impl PathTable {
    /// `m` with `t_k = k / m`, checked on every row.
    pub fn steps_per_period(&self) -> Result<usize, CsvError> {
        if self.t.len() < 2 {
            return Err(CsvError::Grid);
        }
        let m = (1.0 / (self.t[1] - self.t[0])).round();
        if m.is_nan() || m < 1.0 {
            return Err(CsvError::Grid);
        }
        let ok = self
            .t
            .iter()
            .enumerate()
            .all(|(k, &t)| (t - k as f64 / m).abs() <= 1e-9 * (1.0 + t.abs()));
        if ok {
            Ok(m as usize)
        } else {
            Err(CsvError::Grid)
        }
    }
}

fn parse_cell(cell: &str, line: usize) -> Result<f64, CsvError> {
    cell.trim().parse::<f64>().map_err(|_| CsvError::Parse {
        line,
        message: format!("not a number: {cell:?}"),
    })
}

pub fn parse_path_csv(text: &str) -> Result<PathTable, CsvError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    let with_driver = match header {
        "t,x" => false,
        "t,x,db" => true,
        other => {
            return Err(CsvError::Header {
                found: other.to_string(),
            })
        }
    };
    let width = if with_driver { 3 } else { 2 };
    let mut table = PathTable {
        t: Vec::new(),
        x: Vec::new(),
        db: with_driver.then(Vec::new),
    };
    let rows: Vec<(usize, &str)> = lines
        .enumerate()
        .map(|(i, l)| (i + 2, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    for (idx, &(line, row)) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != width {
            return Err(CsvError::Parse {
                line,
                message: format!("expected {width} columns"),
            });
        }
        table.t.push(parse_cell(cells[0], line)?);
        table.x.push(parse_cell(cells[1], line)?);
        if let Some(db) = table.db.as_mut() {
            let last = idx + 1 == rows.len();
            match (cells[2].trim().is_empty(), last) {
                (true, true) => {}
                (false, false) => db.push(parse_cell(cells[2], line)?),
                _ => {
                    return Err(CsvError::Parse {
                        line,
                        message: "db must be present on every row but the last".into(),
                    })
                }
            }
        }
    }
    Ok(table)
}

/// `t,value` dump of an fBm path.
pub fn fbm_csv(path: &FbmPath) -> String {
    let mut out = String::from("t,value\n");
    for (t, v) in path.grid.iter().zip(&path.values) {
        push_f64(&mut out, *t);
        out.push(',');
        push_f64(&mut out, *v);
        out.push('\n');
    }
    out
}
