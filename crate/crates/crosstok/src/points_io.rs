//! Point cloud files.
//!
//! * `xyz`: one point per line, `x y z [f1 … fC]`, whitespace separated.
//!   Blank lines and everything after `#` are ignored. Every row must have
//!   the same number of columns.
//! * `bin`: the bytes `P4PC`, then `N` and `C_in` as little-endian `u32`,
//!   then `N` rows of `3 + C_in` little-endian `f32`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crosstok_core::PointCloud;

pub const MAGIC: &[u8; 4] = b"P4PC";
const HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Xyz,
    Bin,
}

impl PointFormat {
    /// Guesses from the extension: `.bin`/`.p4pc` are binary, anything else text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin" | "p4pc") => PointFormat::Bin,
            _ => PointFormat::Xyz,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            PointFormat::Xyz => "xyz",
            PointFormat::Bin => "bin",
        }
    }
}

impl FromStr for PointFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "xyz" => Ok(PointFormat::Xyz),
            "bin" => Ok(PointFormat::Bin),
            other => Err(format!("unknown point format '{other}' (expected xyz or bin)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PointsError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: expected at least 3 columns, found {found}")]
    TooFewColumns { line: usize, found: usize },
    #[error("line {line}: ragged row with {found} columns, earlier rows have {expected}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {column}: cannot parse '{token}' as a number")]
    BadNumber { line: usize, column: usize, token: String },
    #[error("line {line}, column {column}: non-finite value")]
    NonFiniteText { line: usize, column: usize },
    #[error("no points")]
    Empty,
    #[error("offset 0: bad magic {found:?}, expected \"P4PC\"")]
    BadMagic { found: Vec<u8> },
    #[error("offset {offset}: file ends early, {needed} more bytes needed")]
    ShortFile { offset: usize, needed: usize },
    #[error("offset {offset}: {extra} unexpected trailing bytes")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("offset {offset}: non-finite value")]
    NonFiniteBin { offset: usize },
}

pub fn read_points(path: &Path, format: PointFormat) -> Result<PointCloud<f32>, PointsError> {
    let io_err = |source| PointsError::Io {
        path: path.to_path_buf(),
        source,
    };
    match format {
        PointFormat::Xyz => parse_xyz(&fs::read_to_string(path).map_err(io_err)?),
        PointFormat::Bin => parse_bin(&fs::read(path).map_err(io_err)?),
    }
}

pub fn write_points(path: &Path, cloud: &PointCloud<f32>, format: PointFormat) -> Result<(), PointsError> {
    let bytes = match format {
        PointFormat::Xyz => format_xyz(cloud).into_bytes(),
        PointFormat::Bin => format_bin(cloud),
    };
    fs::write(path, bytes).map_err(|source| PointsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_xyz(text: &str) -> Result<PointCloud<f32>, PointsError> {
    let mut width = None;
    let mut positions = Vec::new();
    let mut features = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = body.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        match width {
            None if tokens.len() < 3 => {
                return Err(PointsError::TooFewColumns {
                    line,
                    found: tokens.len(),
                })
            }
            None => width = Some(tokens.len()),
            Some(w) if w != tokens.len() => {
                return Err(PointsError::Ragged {
                    line,
                    expected: w,
                    found: tokens.len(),
                })
            }
            Some(_) => {}
        }
        let mut row = Vec::with_capacity(tokens.len());
        for (c, tok) in tokens.iter().enumerate() {
            let column = c + 1;
            let v: f32 = tok.parse().map_err(|_| PointsError::BadNumber {
                line,
                column,
                token: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(PointsError::NonFiniteText { line, column });
            }
            row.push(v);
        }
        positions.push([row[0], row[1], row[2]]);
        features.extend_from_slice(&row[3..]);
    }
    let c_in = width.ok_or(PointsError::Empty)? - 3;
    Ok(PointCloud::new(positions, features, c_in).expect("rows validated while parsing"))
}

/// Shortest text that parses back to the same `f32`, so the round trip is exact.
pub fn format_xyz(cloud: &PointCloud<f32>) -> String {
    let mut out = String::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        write!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
        for v in cloud.feature(i) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_bin(bytes: &[u8]) -> Result<PointCloud<f32>, PointsError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(PointsError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER {
        return Err(PointsError::ShortFile {
            offset: bytes.len(),
            needed: HEADER - bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, c_in) = (u32_at(4), u32_at(8));
    if n == 0 {
        return Err(PointsError::Empty);
    }
    let row = 3 + c_in;
    let body = n
        .checked_mul(row)
        .and_then(|v| v.checked_mul(4))
        .ok_or(PointsError::ShortFile {
            offset: HEADER,
            needed: usize::MAX,
        })?;
    let have = bytes.len() - HEADER;
    if have < body {
        return Err(PointsError::ShortFile {
            offset: bytes.len(),
            needed: body - have,
        });
    }
    if have > body {
        return Err(PointsError::TrailingBytes {
            offset: HEADER + body,
            extra: have - body,
        });
    }
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * c_in);
    for (i, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(PointsError::NonFiniteBin { offset: HEADER + 4 * i });
        }
        match i % row {
            0 => positions.push([v, 0.0, 0.0]),
            c @ (1 | 2) => positions.last_mut().unwrap()[c] = v,
            _ => features.push(v),
        }
    }
    Ok(PointCloud::new(positions, features, c_in).expect("sizes validated while parsing"))
}

pub fn format_bin(cloud: &PointCloud<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + cloud.len() * (3 + cloud.c_in) * 4);
    out.extend_from_slice(MAGIC);
    out.extend((cloud.len() as u32).to_le_bytes());
    out.extend((cloud.c_in as u32).to_le_bytes());
    for (i, p) in cloud.positions.iter().enumerate() {
        p.iter()
            .chain(cloud.feature(i))
            .for_each(|v| out.extend(v.to_le_bytes()));
    }
    out
}
