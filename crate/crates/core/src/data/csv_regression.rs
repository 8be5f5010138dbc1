use std::path::Path;

use super::{sha256_hex, split_rows, DataSplits, Targets};
use crate::error::{CometError, Result};
use crate::numerics::Matrix;

/// Loads a headered CSV as a regression set.
///
/// `input_cols` of `None` means every column except the target. Rows are split
/// 90/10 in file order; inputs are standardized with training-split statistics,
/// the target is left raw. Constant input columns keep a unit scale and are
/// listed in the provenance.
pub fn load_csv_regression(
    path: &Path,
    input_cols: Option<&[String]>,
    target_col: &str,
) -> Result<DataSplits> {
    let bytes = std::fs::read(path).map_err(|e| CometError::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CometError::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| CometError::Ingestion {
            path: path.to_path_buf(),
            reason: format!("no column named `{name}`"),
        })
    };
    let target_idx = find(target_col)?;
    let input_idx: Vec<usize> = match input_cols {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != target_idx).collect(),
    };
    if input_idx.is_empty() {
        return Err(CometError::Ingestion {
            path: path.to_path_buf(),
            reason: "no input columns".into(),
        });
    }

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f32> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        // header is line 1, so data row r sits on line r + 2
        let row = r + 2;
        let rec = rec.map_err(|e| CometError::Parse {
            row,
            column: String::new(),
            reason: e.to_string(),
        })?;
        let cell = |i: usize| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CometError::Parse {
                    row,
                    column: headers[i].clone(),
                    reason: format!("`{raw}` is not a finite number"),
                })
        };
        for &i in &input_idx {
            xs.push(cell(i)?);
        }
        ys.push(cell(target_idx)? as f32);
    }
    let n = ys.len();
    if n < 2 {
        return Err(CometError::Ingestion {
            path: path.to_path_buf(),
            reason: format!("need at least 2 data rows, found {n}"),
        });
    }
    let d = input_idx.len();
    let n_train = ((0.9 * n as f64).round() as usize).clamp(1, n - 1);

    let mut constant = Vec::new();
    let mut stats = Vec::with_capacity(d);
    for c in 0..d {
        let col = (0..n_train).map(|r| xs[r * d + c]);
        let mean = col.clone().sum::<f64>() / n_train as f64;
        let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n_train as f64;
        let sd = var.sqrt();
        if sd > 1e-12 {
            stats.push((mean, sd));
        } else {
            constant.push(headers[input_idx[c]].clone());
            stats.push((mean, 1.0));
        }
    }
    let inputs: Vec<f32> = xs
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (m, s) = stats[i % d];
            ((v - m) / s) as f32
        })
        .collect();

    let mut provenance = format!(
        "csv({},sha256={},target={target_col})",
        path.display(),
        &sha256_hex(&bytes)[..16]
    );
    if !constant.is_empty() {
        provenance.push_str(&format!(";warning=constant-columns:{}", constant.join("|")));
    }
    split_rows(
        Matrix::from_vec(n, d, inputs)?,
        Targets::Values(Matrix::from_vec(n, 1, ys)?),
        n_train,
        &provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_rows_split_one_each() {
        let f = write("a,b,y\n1,2,3\n4,5,6\n");
        let d = load_csv_regression(f.path(), None, "y").unwrap();
        assert_eq!(d.train.len(), 1);
        assert_eq!(d.eval.len(), 1);
    }

    #[test]
    fn constant_column_is_flagged() {
        let f = write("a,c,y\n1,7,0\n2,7,1\n3,7,2\n4,7,3\n");
        let d = load_csv_regression(f.path(), None, "y").unwrap();
        assert!(d.provenance().contains("constant-columns:c"));
        assert!(d.train.inputs.as_slice().iter().all(|v| v.is_finite()));
        // constant column centers to zero with unit scale
        for r in 0..d.train.len() {
            assert_eq!(d.train.inputs.get(r, 1), 0.0);
        }
    }

    #[test]
    fn standardization_uses_train_rows_only() {
        let mut s = String::from("x,y\n");
        for i in 0..9 {
            s.push_str(&format!("{i},{i}\n"));
        }
        s.push_str("1000,0\n");
        let f = write(&s);
        let d = load_csv_regression(f.path(), None, "y").unwrap();
        let col: Vec<f64> = (0..9).map(|r| d.train.inputs.get(r, 0) as f64).collect();
        let mean = col.iter().sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-6);
        assert!(d.eval.inputs.get(0, 0) > 100.0);
    }

    #[test]
    fn parse_error_names_row_and_column() {
        let f = write("a,y\n1,2\noops,3\n");
        let err = load_csv_regression(f.path(), None, "y").unwrap_err();
        match err {
            CometError::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other}"),
        }
        assert!(load_csv_regression(f.path(), None, "missing").is_err());
    }

    #[test]
    fn explicit_input_columns() {
        let f = write("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let cols = vec!["b".to_string()];
        let d = load_csv_regression(f.path(), Some(&cols), "y").unwrap();
        assert_eq!(d.input_dim(), 1);
    }
}
