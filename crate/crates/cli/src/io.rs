//! Output files: matrices as CSV and raw binary, unit-peak PGM images and
//! JSON summaries.
//!
//! CSV layout: the first line is the x axis (`x_m` or `qx_rad_per_m`
//! followed by the coordinates), the second the y axis, then one line of
//! values per y coordinate.
//!
//! Binary layout, little endian: magic `BIPHMAT\0`, `u32` version, dtype tag
//! `f8le`, `u32` rank, `rank × u64` dims, row-major `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use biphoton_core::{Domain, ReducedMap};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::Serialize;

use crate::config::OutputConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"BIPHMAT\0";
pub const VERSION: u32 = 1;
pub const DTYPE: &[u8; 4] = b"f8le";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_binary(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "dims do not match data");
    let mut w = create(path)?;
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| CliError::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(DTYPE)?;
    put(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        put(&(*d as u64).to_le_bytes())?;
    }
    for v in data {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_binary(path: &Path) -> Result<Matrix> {
    let mut r = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
    let mut take = |len: usize| -> Result<Vec<u8>> {
        let mut b = vec![0; len];
        r.read_exact(&mut b).map_err(|_| format_err(path, "truncated"))?;
        Ok(b)
    };
    if take(8)? != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    if take(4)? != DTYPE {
        return Err(format_err(path, "unsupported dtype"));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let dims = (0..rank)
        .map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let bytes = take(count * 8)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if !take(1).is_err() {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok(Matrix { dims, data })
}

pub fn write_map_binary(path: &Path, map: &ReducedMap) -> Result<()> {
    let n = map.grid().n();
    write_binary(path, &[n, n], map.values())
}

/// Contents of a matrix CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvMatrix {
    pub x_label: String,
    pub x: Vec<f64>,
    pub y_label: String,
    pub y: Vec<f64>,
    /// Row-major, one row per `y`.
    pub values: Vec<f64>,
}

fn axis_labels(domain: Domain) -> (&'static str, &'static str) {
    match domain {
        Domain::Position => ("x_m", "y_m"),
        Domain::Momentum => ("qx_rad_per_m", "qy_rad_per_m"),
    }
}

pub fn write_csv(path: &Path, map: &ReducedMap) -> Result<()> {
    let n = map.grid().n();
    let axis = map.grid().axis(map.domain());
    let (lx, ly) = axis_labels(map.domain());
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(create(path)?);
    let err = |e: csv::Error| format_err(path, e.to_string());
    let head = |label: &str| std::iter::once(label.to_string()).chain(axis.iter().map(|v| v.to_string()));
    w.write_record(head(lx)).map_err(err)?;
    w.write_record(head(ly)).map_err(err)?;
    for row in map.values().chunks(n) {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<CsvMatrix> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = r.records();
    let mut axis = |which: &str| -> Result<(String, Vec<f64>)> {
        let rec = records
            .next()
            .ok_or_else(|| format_err(path, format!("missing {which} axis line")))?
            .map_err(|e| format_err(path, e.to_string()))?;
        let label = rec.get(0).unwrap_or_default().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad {which} coordinate '{s}'")))
            })
            .collect::<Result<_>>()?;
        Ok((label, vals))
    };
    let (x_label, x) = axis("x")?;
    let (y_label, y) = axis("y")?;
    let mut values = Vec::with_capacity(x.len() * y.len());
    for rec in records {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        if rec.len() != x.len() {
            return Err(format_err(
                path,
                format!("row of {} values, expected {}", rec.len(), x.len()),
            ));
        }
        for s in rec.iter() {
            values.push(
                s.parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad value '{s}'")))?,
            );
        }
    }
    if values.len() != x.len() * y.len() {
        return Err(format_err(
            path,
            format!("{} rows, expected {}", values.len() / x.len().max(1), y.len()),
        ));
    }
    Ok(CsvMatrix {
        x_label,
        x,
        y_label,
        y,
        values,
    })
}

/// 8-bit grayscale of the unit-peak map, +y up.
pub fn pgm_bytes(map: &ReducedMap) -> Vec<u8> {
    let n = map.grid().n();
    let peak = map.max();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut px = Vec::with_capacity(n * n);
    for row in map.values().chunks(n).rev() {
        px.extend(row.iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8));
    }
    px
}

pub fn write_pgm(path: &Path, map: &ReducedMap) -> Result<()> {
    let n = map.grid().n() as u32;
    let w = create(path)?;
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&pgm_bytes(map), n, n, ExtendedColorType::L8)
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| format_err(path, e.to_string()))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Writes `map` as `<stem>.csv`, `<stem>.bin` and `<stem>.pgm` under `dir`,
/// as selected by `out`.
pub fn write_map(dir: &Path, stem: &str, map: &ReducedMap, out: &OutputConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if out.csv {
        let p = dir.join(format!("{stem}.csv"));
        write_csv(&p, map)?;
        written.push(p);
    }
    if out.binary {
        let p = dir.join(format!("{stem}.bin"));
        write_map_binary(&p, map)?;
        written.push(p);
    }
    if out.pgm {
        let p = dir.join(format!("{stem}.pgm"));
        write_pgm(&p, map)?;
        written.push(p);
    }
    Ok(written)
}
