//! Matrix CSV files, trace CSV files and JSON reports.
//!
//! Matrix layout: a first record `F,N` giving the dimensions, followed by `F`
//! records of `N` comma-separated reals. Writes use 17 significant digits so
//! a save/load round trip is exact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{NmfError, Result};
use crate::fw::TraceRow;
use crate::instances::NonnegMatrix;

fn parse_dims(record: &csv::StringRecord) -> Result<(usize, usize)> {
    if record.len() != 2 {
        return Err(NmfError::Parse(format!("header must be `F,N`, found {} fields", record.len())));
    }
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| NmfError::Parse(format!("bad dimension `{s}`")));
    Ok((parse(&record[0])?, parse(&record[1])?))
}

pub fn read_matrix<R: Read>(reader: R, name: &str) -> Result<NonnegMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut records = rdr.records();
    let header = records.next().ok_or_else(|| NmfError::Parse("empty matrix file".into()))??;
    let (rows, cols) = parse_dims(&header)?;
    if rows == 0 || cols == 0 {
        return Err(NmfError::Parse(format!("degenerate dimensions {rows}x{cols}")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != cols {
            return Err(NmfError::Parse(format!("row {i} has {} fields, expected {cols}", rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let value: f64 =
                field.parse().map_err(|_| NmfError::Parse(format!("bad number `{field}` at row {i}, column {j}")))?;
            data.push(value);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(NmfError::Parse(format!("expected {rows} rows, found {seen}")));
    }
    let entries = Array2::from_shape_vec((rows, cols), data).map_err(|e| NmfError::Parse(e.to_string()))?;
    NonnegMatrix::new(name, entries)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<NonnegMatrix> {
    let path = path.as_ref();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "matrix".into());
    read_matrix(File::open(path)?, &name)
}

pub fn write_array<W: Write>(writer: W, a: ArrayView2<'_, f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    w.write_record([a.nrows().to_string(), a.ncols().to_string()])?;
    for row in a.rows() {
        w.write_record(row.iter().map(|x| format!("{x:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_array(a: ArrayView2<'_, f64>, path: impl AsRef<Path>) -> Result<()> {
    write_array(BufWriter::new(File::create(path)?), a)
}

pub fn save_matrix(v: &NonnegMatrix, path: impl AsRef<Path>) -> Result<()> {
    save_array(v.entries(), path)
}

/// `iter,phi,gap,min_gap,rel_err,spi_event`, one row per iteration.
pub fn write_trace<W: Write>(writer: W, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "phi", "gap", "min_gap", "rel_err", "spi_event"])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            format!("{:.16e}", r.phi),
            format!("{:.16e}", r.gap),
            format!("{:.16e}", r.min_gap),
            format!("{:.16e}", r.rel_err),
            u8::from(r.spi_event).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    write_trace(BufWriter::new(File::create(path)?), trace)
}

/// Pretty-printed JSON.
pub fn save_report<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::builtin_matrix;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["Vinf1", "hex_a3", "random"] {
            let v = builtin_matrix(name).unwrap();
            let path = dir.path().join(format!("{name}.csv"));
            save_matrix(&v, &path).unwrap();
            let back = load_matrix(&path).unwrap();
            assert_eq!(back.entries(), v.entries(), "{name}");
        }
    }

    #[test]
    fn trace_columns() {
        let row = TraceRow {
            iter: 3,
            phi: 1.5,
            gap: 0.25,
            min_gap: 0.125,
            rel_err: 1e-3,
            spi_event: true,
            tau: 1.0,
            newton_steps: 7,
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,phi,gap,min_gap,rel_err,spi_event");
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields[0], "3");
        assert_eq!(fields[3].parse::<f64>().unwrap(), 0.125);
        assert_eq!(fields[5], "1");
    }

    #[test]
    fn negative_entry_is_located() {
        let err = read_matrix("2,2\n1,2\n3,-1\n".as_bytes(), "m").unwrap_err();
        assert!(matches!(err, NmfError::NegativeEntry { row: 1, col: 1, .. }), "{err}");
        assert!(err.to_string().contains("row 1, column 1"));
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(read_matrix("".as_bytes(), "m"), Err(NmfError::Parse(_))));
        assert!(matches!(read_matrix("2,2\n1,2\n3\n".as_bytes(), "m"), Err(NmfError::Parse(_))));
        assert!(matches!(read_matrix("2,2\n1,2\n".as_bytes(), "m"), Err(NmfError::Parse(_))));
        assert!(matches!(read_matrix("1,2\n1,x\n".as_bytes(), "m"), Err(NmfError::Parse(_))));
        assert!(matches!(read_matrix("a,b\n".as_bytes(), "m"), Err(NmfError::Parse(_))));
        let ok = read_matrix("1,3\n0.5, 1e3 ,2\n".as_bytes(), "m").unwrap();
        assert_eq!(ok.get(0, 1), 1000.0);
    }
}
