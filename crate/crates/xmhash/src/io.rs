//! Matrix file formats: headerless CSV and the `raw-f32` binary format.
//!
//! The raw format is little-endian f32 values preceded by a 16-byte header:
//! magic `XMSH`, u32 rows, u32 cols, u32 reserved. It round-trips bit-exactly
//! and is used for all cached pipeline artifacts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"XMSH";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixFormat {
    #[default]
    Csv,
    RawF32,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Read a headerless CSV of real values, one instance per row.
pub fn read_csv(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("bad number {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty file".into(),
        });
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

pub fn write_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Read a `raw-f32` matrix file.
pub fn read_raw_f32(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[0..4] != RAW_MAGIC {
        return Err(Error::BadRawFile {
            path: path.to_path_buf(),
            message: "bad magic".into(),
        });
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    // row-major on disk
    let m = DMatrix::from_fn(rows, cols, |i, j| {
        let off = (i * cols + j) * 4;
        f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64
    });
    Ok(m)
}

pub fn write_raw_f32(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(RAW_MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&(m.nrows() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    w.write_all(&0u32.to_le_bytes()).map_err(|e| io_err(path, e))?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&(m[(i, j)] as f32).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

pub fn read_matrix(path: &Path, format: MatrixFormat) -> Result<DMatrix<f64>> {
    match format {
        MatrixFormat::Csv => read_csv(path),
        MatrixFormat::RawF32 => read_raw_f32(path),
    }
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => write_csv(path, m),
        MatrixFormat::RawF32 => write_raw_f32(path, m),
    }
}

/// Labels: one row per instance, semicolon-separated integer labels.
pub fn read_labels(path: &Path) -> Result<Vec<Vec<u32>>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            labels.push(Vec::new());
            continue;
        }
        let row: Vec<u32> = trimmed
            .split(';')
            .map(|tok| {
                tok.trim().parse::<u32>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("bad label {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        labels.push(row);
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &[Vec<u32>]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for row in labels {
        let toks: Vec<String> = row.iter().map(|l| l.to_string()).collect();
        writeln!(w, "{}", toks.join(";")).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
