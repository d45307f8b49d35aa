use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// Reals with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// In-memory CSV table with a fixed header.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::InvalidArgument(format!("row of {} fields for {} columns", row.len(), self.header.len())));
        }
        if let Some(bad) = row.iter().find(|f| f.contains([',', '\n', '"'])) {
            return Err(Error::InvalidArgument(format!("field {bad:?} needs quoting")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let rows = r.records().map(|rec| Ok(rec.map_err(csv_err)?.iter().map(str::to_string).collect())).collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Corrupt(format!("csv: {other:?}")),
    }
}

/// Reads a headerless or headed CSV of reals into a matrix. A first row
/// that does not parse as numbers is taken as a header.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Corrupt(format!("line {}: {e}", i + 1))),
        };
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Corrupt(format!("line {} has {} fields", i + 1, vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Corrupt(format!("{} holds no rows", path.display())))?;
    Tensor::matrix(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for v in [0.1, -1e-300, 1.0 / 3.0, 6.02e23, 0.0, f64::MIN_POSITIVE] {
            assert_eq!(fmt_real(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_real(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn write_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = CsvTable::new(&["a", "b"]);
        t.push(vec!["1".into(), fmt_real(2.5)]).unwrap();
        assert!(t.push(vec!["x,y".into(), "1".into()]).is_err());
        assert!(t.push(vec!["1".into()]).is_err());
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,2.5000000000000000e0\n");
        assert_eq!(CsvTable::read(&p).unwrap(), t);
        let m = read_matrix_csv(&p).unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[1.0, 2.5]);
    }
}
