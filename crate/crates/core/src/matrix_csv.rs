//! Plain-text matrix interchange: a `rows,cols` header line followed by one
//! comma-separated line per row, values written with 9 significant digits.

use ndarray::Array2;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatrixCsvError {
    #[error("missing or malformed `rows,cols` header")]
    Header,
    #[error("line {line}: expected {expected} values, found {got}")]
    RowLength {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: cannot parse {token:?} as a number")]
    Value { line: usize, token: String },
    #[error("expected {expected} data rows, found {got}")]
    RowCount { expected: usize, got: usize },
}

pub fn write_matrix_csv(m: &Array2<f64>) -> String {
    let mut out = format!("{},{}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.8e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<Array2<f64>, MatrixCsvError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(MatrixCsvError::Header)?;
    let (rows, cols) = header.split_once(',').ok_or(MatrixCsvError::Header)?;
    let rows: usize = rows.trim().parse().map_err(|_| MatrixCsvError::Header)?;
    let cols: usize = cols.trim().parse().map_err(|_| MatrixCsvError::Header)?;
    rows.checked_mul(cols).ok_or(MatrixCsvError::Header)?;

    let mut values = Vec::new();
    let mut got = 0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        got += 1;
        if got > rows {
            continue;
        }
        let before = values.len();
        for token in line.split(',') {
            let token = token.trim();
            let v: f64 = token.parse().map_err(|_| MatrixCsvError::Value {
                line: line_no,
                token: token.to_string(),
            })?;
            if !v.is_finite() {
                return Err(MatrixCsvError::Value {
                    line: line_no,
                    token: token.to_string(),
                });
            }
            values.push(v);
        }
        if values.len() - before != cols {
            return Err(MatrixCsvError::RowLength {
                line: line_no,
                expected: cols,
                got: values.len() - before,
            });
        }
    }
    if got != rows {
        return Err(MatrixCsvError::RowCount {
            expected: rows,
            got,
        });
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("row and column counts checked"))
}
