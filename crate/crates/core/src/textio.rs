//! Whitespace-separated numeric matrices, one row per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Formats a 2-D array with shortest round-trip float text.
pub fn format_matrix(m: &Array<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row = m.row_slice(r);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses rows of equal width; `#` lines and blank lines are skipped.
pub fn parse_matrix(text: &str, source_name: &str) -> Result<Array<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg,
        };
        let row = line
            .split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|_| err(format!("bad number `{w}`"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(err(format!("expected {} columns, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 0,
            msg: "empty matrix".into(),
        });
    }
    Array::from_rows(&rows)
}

pub fn write_matrix(path: &Path, m: &Array<f64>) -> Result<()> {
    fs::write(path, format_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Array::from_rows(&[vec![0.1, -2.5e-9, 1.0 / 3.0], vec![7.0, 0.0, -0.0]]).unwrap();
        let back = parse_matrix(&format_matrix(&m), "m").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ragged_and_garbage_rejected() {
        assert!(parse_matrix("1 2\n3\n", "m").is_err());
        assert!(parse_matrix("1 x\n", "m").is_err());
        assert!(parse_matrix("\n# nothing\n", "m").is_err());
    }
}
