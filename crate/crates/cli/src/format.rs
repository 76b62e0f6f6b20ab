//! Embedding files.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! "CALM" | version: u16 | N: u64 | M: u32 | N*M f32, row-major | N u32 labels
//! ```
//!
//! The CSV alternative has a header `label,v0,...,v{M-1}` and one row per
//! sample. Values are stored as `f32`; both encodings round-trip exactly.

use std::fs;
use std::path::Path;

use calm_core::sphere::norm;
use calm_core::EmbeddingSet;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CALM";
pub const VERSION: u16 = 1;
/// Largest tolerated `| ||row|| - 1 |` before renormalization.
pub const MAX_DEVIATION: f64 = 1e-3;

const HEADER_LEN: usize = 4 + 2 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub values: Vec<f32>,
    pub labels: Vec<u32>,
}

/// A decoded file after renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub set: EmbeddingSet,
    pub max_deviation: f64,
}

impl EmbeddingFile {
    pub fn from_set(set: &EmbeddingSet) -> Self {
        Self {
            dim: set.dim(),
            values: set.as_slice().iter().map(|&x| x as f32).collect(),
            labels: set.labels().to_vec(),
        }
    }

    /// Like [`from_set`](Self::from_set), but rows equal to the corresponding
    /// row of `origin.0` are written with the stored values of `origin.1`, so an
    /// untouched row survives a load/save cycle bit for bit.
    pub fn from_set_with_origin(set: &EmbeddingSet, origin: Option<(&EmbeddingSet, &EmbeddingFile)>) -> Self {
        let mut out = Self::from_set(set);
        if let Some((loaded, file)) = origin {
            if loaded.len() == set.len() && loaded.dim() == set.dim() && file.dim == set.dim() {
                let m = set.dim();
                for i in 0..set.len() {
                    if set.row(i) == loaded.row(i) {
                        out.values[i * m..(i + 1) * m].copy_from_slice(&file.values[i * m..(i + 1) * m]);
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.values.len() + self.labels.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err("not a CALM embedding file".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let m = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let n = usize::try_from(n).map_err(|_| "sample count overflows".to_string())?;
        let expected = n
            .checked_mul(m)
            .and_then(|nm| nm.checked_add(n))
            .and_then(|words| words.checked_mul(4))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| "header sizes overflow".to_string())?;
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes for N = {n}, M = {m}, found {}", bytes.len()));
        }
        let words = bytes[HEADER_LEN..].chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let values: Vec<f32> = words.clone().take(n * m).map(f32::from_le_bytes).collect();
        let labels: Vec<u32> = words.skip(n * m).map(u32::from_le_bytes).collect();
        Ok(Self { dim: m, values, labels })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for k in 0..self.dim {
            out.push_str(&format!(",v{k}"));
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(&l.to_string());
            for v in &self.values[i * self.dim..(i + 1) * self.dim] {
                // shortest representation that parses back to the same f32
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| e.to_string())?.clone();
        let dim = header.len().saturating_sub(1);
        let expected: Vec<String> = std::iter::once("label".to_string()).chain((0..dim).map(|k| format!("v{k}"))).collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err("header must be label,v0,...,v{M-1}".into());
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| e.to_string())?;
            let line = row + 2;
            let label = record[0].parse::<u32>().map_err(|e| format!("line {line}: label: {e}"))?;
            labels.push(label);
            for field in record.iter().skip(1) {
                values.push(field.parse::<f32>().map_err(|e| format!("line {line}: {e}"))?);
            }
        }
        Ok(Self { dim, values, labels })
    }

    /// Reads either encoding; files starting with the magic bytes are binary.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let parsed = if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            std::str::from_utf8(&bytes)
                .map_err(|e| e.to_string())
                .and_then(Self::from_csv)
        };
        parsed.map_err(|m| CliError::invalid_file(path, m))
    }

    /// Writes CSV for a `.csv` extension, binary otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let bytes = if is_csv { self.to_csv().into_bytes() } else { self.to_bytes() };
        write_file(path, &bytes)
    }

    /// Renormalizes every row, rejecting rows that were far from unit norm.
    pub fn to_set(&self, path: &Path) -> Result<Loaded> {
        if self.dim < 2 || self.values.len() != self.len() * self.dim {
            return Err(CliError::invalid_file(path, format!("inconsistent shape: {} values, M = {}", self.values.len(), self.dim)));
        }
        let data: Vec<f64> = self.values.iter().map(|&v| f64::from(v)).collect();
        let mut max_deviation: f64 = 0.0;
        for (i, row) in data.chunks_exact(self.dim).enumerate() {
            let dev = (norm(row) - 1.0).abs();
            if !(dev <= MAX_DEVIATION) {
                return Err(CliError::invalid_file(
                    path,
                    format!("row {i} has norm deviation {dev:e} > {MAX_DEVIATION:e}"),
                ));
            }
            max_deviation = max_deviation.max(dev);
        }
        let set = EmbeddingSet::from_raw(data, self.labels.clone(), self.dim)
            .map_err(|e| CliError::invalid_file(path, e.to_string()))?;
        Ok(Loaded { set, max_deviation })
    }
}

/// Reads and renormalizes an embedding file of either encoding.
pub fn load_embeddings(path: &Path) -> Result<(EmbeddingFile, Loaded)> {
    let file = EmbeddingFile::read(path)?;
    let loaded = file.to_set(path)?;
    log::info!("{}: {} samples, max norm deviation {:e}", path.display(), file.len(), loaded.max_deviation);
    Ok((file, loaded))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
