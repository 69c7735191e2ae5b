//! File formats: CSV tables, the binary raster and timestamp formats, and
//! conversions from the simulation types.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::field::FieldGrid;
use crate::odmr::OdmrSpectrum;
use crate::photon::CorrelationHistogram;
use crate::psf::{FitError, Profile1D};
use crate::scan::{ScanKind, ScanMap};

pub const RASTER_MAGIC: [u8; 8] = *b"MSARAST1";
pub const RASTER_HEADER_LEN: usize = 32;
pub const TIMESTAMP_MAGIC: [u8; 8] = *b"MSATIME1";
pub const TIMESTAMP_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_numbers(&mut self, row: &[f64]) {
        self.rows.push(row.iter().map(|&v| fmt_num(v)).collect());
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// A column parsed as numbers.
    pub fn numbers(&self, col: usize) -> Result<Vec<f64>, String> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.get(col)
                    .ok_or_else(|| format!("row {} has no column {col}", i + 2))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| format!("row {}: {e}", i + 2))
            })
            .collect()
    }
}

pub fn write_csv(path: &Path, table: &Table) -> Result<(), IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    w.write_record(&table.header).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Table, IoError> {
    let csv_err = |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

/// Row-major `f64` raster; physical values are `values * value_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub nx: u32,
    pub ny: u32,
    pub dx_nm: f64,
    pub value_scale: f64,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn from_field(field: &FieldGrid) -> Self {
        Self {
            nx: field.nx as u32,
            ny: field.ny as u32,
            dx_nm: field.dx_um * 1e3,
            value_scale: 1.0,
            values: field.values.clone(),
        }
    }

    pub fn from_scan(map: &ScanMap) -> Self {
        Self {
            nx: map.nx as u32,
            ny: map.ny as u32,
            dx_nm: map.pixel_size_nm,
            value_scale: 1.0,
            values: map.counts.iter().map(|&c| c as f64).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RASTER_HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(&RASTER_MAGIC);
        out.extend_from_slice(&self.nx.to_le_bytes());
        out.extend_from_slice(&self.ny.to_le_bytes());
        out.extend_from_slice(&self.dx_nm.to_le_bytes());
        out.extend_from_slice(&self.value_scale.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < RASTER_HEADER_LEN || bytes[..8] != RASTER_MAGIC {
            return Err("not a raster file".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (nx, ny) = (u32_at(8), u32_at(12));
        let n = nx as usize * ny as usize;
        if bytes.len() != RASTER_HEADER_LEN + 8 * n {
            return Err(format!(
                "expected {} bytes for {nx}x{ny}, found {}",
                RASTER_HEADER_LEN + 8 * n,
                bytes.len()
            ));
        }
        Ok(Self {
            nx,
            ny,
            dx_nm: f64_at(16),
            value_scale: f64_at(24),
            values: (0..n).map(|i| f64_at(RASTER_HEADER_LEN + 8 * i)).collect(),
        })
    }
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<(), IoError> {
    std::fs::write(path, raster.to_bytes()).map_err(io_err(path))
}

pub fn read_raster(path: &Path) -> Result<Raster, IoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Raster::from_bytes(&bytes).map_err(|m| format_err(path, m))
}

/// One detector channel: header then little-endian `u64` nanosecond stamps.
pub fn write_timestamps(path: &Path, stamps: &[u64]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&TIMESTAMP_MAGIC).map_err(io_err(path))?;
    w.write_all(&(stamps.len() as u64).to_le_bytes()).map_err(io_err(path))?;
    for s in stamps {
        w.write_all(&s.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_timestamps(path: &Path) -> Result<Vec<u64>, IoError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < TIMESTAMP_HEADER_LEN || bytes[..8] != TIMESTAMP_MAGIC {
        return Err(format_err(path, "not a timestamp file"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[TIMESTAMP_HEADER_LEN..];
    if body.len() != 8 * count {
        return Err(format_err(path, format!("header says {count} stamps, body holds {} bytes", body.len())));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// `(x_um, y_um, counts)` rows, or `(x_um, z_um, counts)` for vertical scans.
pub fn scan_table(map: &ScanMap) -> Table {
    let second = match map.meta.kind {
        ScanKind::Lateral => "y_um",
        ScanKind::Vertical => "z_um",
    };
    let mut t = Table::new(&["x_um", second, "counts"]);
    for r in 0..map.ny {
        for c in 0..map.nx {
            t.push(vec![
                fmt_num(map.x_at(c)),
                fmt_num(map.row_at(r)),
                map.get(c, r).to_string(),
            ]);
        }
    }
    t
}

pub fn histogram_table(hist: &CorrelationHistogram) -> Table {
    let mut t = Table::new(&["tau_ns", "g2", "raw_counts"]);
    for ((tau, g), c) in hist.tau_ns.iter().zip(&hist.g2).zip(&hist.counts) {
        t.push(vec![fmt_num(*tau), fmt_num(*g), c.to_string()]);
    }
    t
}

pub fn spectrum_table(spectrum: &OdmrSpectrum) -> Table {
    let mut t = Table::new(&["frequency_mhz", "normalized_pl"]);
    for (f, v) in spectrum.frequencies_mhz.iter().zip(&spectrum.normalized_pl) {
        t.push_numbers(&[*f, *v]);
    }
    t
}

pub fn profile_table(profile: &Profile1D) -> Table {
    match &profile.sigma {
        Some(s) => {
            let mut t = Table::new(&["position_nm", "value", "sigma"]);
            for ((x, y), e) in profile.positions.iter().zip(&profile.values).zip(s) {
                t.push_numbers(&[*x, *y, *e]);
            }
            t
        }
        None => {
            let mut t = Table::new(&["position_nm", "value"]);
            for (x, y) in profile.positions.iter().zip(&profile.values) {
                t.push_numbers(&[*x, *y]);
            }
            t
        }
    }
}

/// Two- or three-column profile CSV: `position_nm, value[, sigma]`.
pub fn read_profile(path: &Path) -> Result<Profile1D, IoError> {
    let t = read_csv(path)?;
    if t.header.len() < 2 {
        return Err(format_err(path, "profile needs position and value columns"));
    }
    let x = t.numbers(0).map_err(|m| format_err(path, m))?;
    let y = t.numbers(1).map_err(|m| format_err(path, m))?;
    let built: Result<Profile1D, FitError> = if t.header.len() >= 3 {
        let s = t.numbers(2).map_err(|m| format_err(path, m))?;
        Profile1D::with_sigma(x, y, s)
    } else {
        Profile1D::new(x, y)
    };
    built.map_err(|e| format_err(path, e.to_string()))
}

/// `frequency_mhz, normalized_pl` spectrum CSV.
pub fn read_spectrum_columns(path: &Path) -> Result<(Vec<f64>, Vec<f64>), IoError> {
    let t = read_csv(path)?;
    if t.header.len() < 2 {
        return Err(format_err(path, "spectrum needs frequency and PL columns"));
    }
    let f = t.numbers(0).map_err(|m| format_err(path, m))?;
    let v = t.numbers(1).map_err(|m| format_err(path, m))?;
    Ok((f, v))
}
