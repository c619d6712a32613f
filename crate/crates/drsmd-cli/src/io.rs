//! CSV ingestion and emission of results.

use std::path::{Path, PathBuf};

use drsmd::model::Dataset;

use crate::CliError;

/// Reads a comma-separated file with a header row into numeric columns.
pub fn read_csv(path: &Path) -> Result<Dataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("cannot read header of {}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(CliError::Data(format!("{} has no header row", path.display())));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for (c, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                CliError::Data(format!("row {}, column '{}': '{field}' is not a number", row + 2, headers[c]))
            })?;
            columns[c].push(value);
        }
    }
    Dataset::new(headers.into_iter().zip(columns).collect()).map_err(CliError::from)
}

/// Writes a dataset with shortest round-trip float formatting.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    writer.write_record(data.names()).map_err(io)?;
    let cols: Vec<&[f64]> = data.columns().map(|(_, c)| c).collect();
    for i in 0..data.n() {
        writer.write_record(cols.iter().map(|c| c[i].to_string())).map_err(io)?;
    }
    writer.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Main output to `path` (or stdout) plus a JSON companion when the main output is not JSON.
pub fn emit(path: Option<&PathBuf>, main: &str, json: Option<&str>) -> Result<(), CliError> {
    match path {
        None => {
            print!("{main}");
            Ok(())
        }
        Some(p) => {
            std::fs::write(p, main).map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display())))?;
            if let Some(j) = json {
                let side = json_companion(p);
                std::fs::write(&side, j).map_err(|e| CliError::Io(format!("cannot write {}: {e}", side.display())))?;
            }
            Ok(())
        }
    }
}

pub fn json_companion(p: &Path) -> PathBuf {
    if p.extension().is_some_and(|e| e == "json") {
        let mut s = p.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    } else {
        p.with_extension("json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = Dataset::new(vec![
            ("y".into(), vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567]),
            ("W".into(), vec![1.0, 0.0, std::f64::consts::PI, -2.5e17]),
        ])
        .unwrap();
        write_csv(&data, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), data);
    }

    #[test]
    fn non_numeric_field_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,W\n1,2\n3,abc\n").unwrap();
        match read_csv(&path) {
            Err(CliError::Data(msg)) => assert!(msg.contains("row 3") && msg.contains("'W'")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn companion_path() {
        assert_eq!(json_companion(Path::new("out/r.txt")), PathBuf::from("out/r.json"));
        assert_eq!(json_companion(Path::new("r.json")), PathBuf::from("r.json.json"));
    }
}
