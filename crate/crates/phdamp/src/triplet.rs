//! Sparse triplet text format for matrix export and import.
//!
//! Layout: a header line `rows cols nnz`, then one `row col value` line per
//! structurally nonzero entry, zero-based indices, values in shortest
//! round-trip decimal form. Entries are emitted in row-major order; import
//! accepts any order and sums duplicates.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TripletError {
    #[error("triplet parse error on line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error("triplet entry ({row}, {col}) outside declared shape {rows} x {cols}")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Serialize dropping exact zeros.
pub fn write_triplets(m: &DMatrix<f64>) -> String {
    let mut body = String::new();
    let mut nnz = 0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if v != 0.0 {
                body.push_str(&format!("{i} {j} {v:e}\n"));
                nnz += 1;
            }
        }
    }
    format!("{} {} {}\n{}", m.nrows(), m.ncols(), nnz, body)
}

/// Parse a triplet document into a dense matrix.
pub fn read_triplets(doc: &str) -> Result<DMatrix<f64>, TripletError> {
    let mut lines = doc.lines().enumerate().filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    });
    let (line, header) = lines.next().ok_or(TripletError::Parse {
        line: 1,
        what: "empty document".into(),
    })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(TripletError::Parse {
            line: line + 1,
            what: format!("header must be `rows cols nnz`, got `{header}`"),
        });
    }
    let parse_idx = |s: &str, line: usize| {
        s.parse::<usize>().map_err(|e| TripletError::Parse {
            line: line + 1,
            what: format!("bad index `{s}`: {e}"),
        })
    };
    let rows = parse_idx(parts[0], line)?;
    let cols = parse_idx(parts[1], line)?;
    let nnz = parse_idx(parts[2], line)?;

    let mut m = DMatrix::zeros(rows, cols);
    let mut seen = 0;
    for (line, text) in lines {
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(TripletError::Parse {
                line: line + 1,
                what: format!("expected `row col value`, got `{text}`"),
            });
        }
        let row = parse_idx(parts[0], line)?;
        let col = parse_idx(parts[1], line)?;
        let value: f64 = parts[2].parse().map_err(|e| TripletError::Parse {
            line: line + 1,
            what: format!("bad value `{}`: {e}", parts[2]),
        })?;
        if row >= rows || col >= cols {
            return Err(TripletError::OutOfBounds {
                row,
                col,
                rows,
                cols,
            });
        }
        m[(row, col)] += value;
        seen += 1;
    }
    if seen != nnz {
        return Err(TripletError::Parse {
            line: 1,
            what: format!("header declares {nnz} entries, found {seen}"),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = DMatrix::from_row_slice(
            3,
            2,
            &[1.5e-17, 0.0, -2.1e11, 3.0303030303030303e-1, 0.0, 7.0],
        );
        let doc = write_triplets(&m);
        let back = read_triplets(&doc).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn duplicates_sum_and_bounds_are_checked() {
        let doc = "2 2 2\n0 0 1.0\n0 0 2.5\n";
        let m = read_triplets(doc).unwrap();
        assert_eq!(m[(0, 0)], 3.5);
        let bad = "2 2 1\n5 0 1.0\n";
        assert!(matches!(
            read_triplets(bad),
            Err(TripletError::OutOfBounds { row: 5, .. })
        ));
    }
}
