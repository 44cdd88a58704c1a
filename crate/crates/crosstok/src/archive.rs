//! Tensor archives: a JSON manifest next to one contiguous little-endian blob.
//!
//! An archive at prefix `runs/a/best` is the pair `runs/a/best.manifest.json`
//! and `runs/a/best.bin`. Each manifest entry records a tensor's name, element
//! type, shape, and its byte range inside the blob. Data is row-major.
//!
//! ```json
//! {
//!   "format": "crosstok-archive",
//!   "version": 1,
//!   "metadata": {},
//!   "entries": [
//!     {"name": "norm.weight", "dtype": "f32", "shape": [384], "offset": 0, "byte_len": 1536}
//!   ]
//! }
//! ```
//!
//! `format`, `version` and `metadata` are optional when reading, so writers
//! other than this crate only need `entries`.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crosstok_core::{DType, NamedTensors, Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "crosstok-archive";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("length mismatch for '{name}': manifest says {byte_len} bytes, dtype and shape need {expected}")]
    LengthMismatch { name: String, byte_len: u64, expected: u64 },
    #[error("overlapping offsets: '{name}' starts at byte {offset} but the previous entry ends at {previous_end}")]
    Overlap {
        name: String,
        offset: u64,
        previous_end: u64,
    },
    #[error("truncated blob: '{name}' needs bytes up to {needed}, blob has {available}")]
    Truncated { name: String, needed: u64, available: u64 },
    #[error("unsupported archive version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

impl Entry {
    fn expected_len(&self) -> Option<u64> {
        self.shape
            .iter()
            .try_fold(self.dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub entries: Vec<Entry>,
}

fn default_format() -> String {
    FORMAT.into()
}

fn default_version() -> u32 {
    VERSION
}

impl Manifest {
    /// Checks every invariant that does not need the blob: unique names,
    /// lengths consistent with dtype and shape, ascending non-overlapping
    /// offsets.
    pub fn validate(&self) -> Result<(), ArchiveError> {
        if self.version > VERSION {
            return Err(ArchiveError::Version(self.version));
        }
        let mut seen = HashSet::new();
        let mut end = 0u64;
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(ArchiveError::DuplicateName(e.name.clone()));
            }
            match e.expected_len() {
                Some(n) if n == e.byte_len => {}
                expected => {
                    return Err(ArchiveError::LengthMismatch {
                        name: e.name.clone(),
                        byte_len: e.byte_len,
                        expected: expected.unwrap_or(u64::MAX),
                    })
                }
            }
            if e.offset < end {
                return Err(ArchiveError::Overlap {
                    name: e.name.clone(),
                    offset: e.offset,
                    previous_end: end,
                });
            }
            end = e.offset + e.byte_len;
        }
        Ok(())
    }

    /// One past the last byte any entry uses.
    pub fn blob_len(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.offset + e.byte_len)
    }
}

/// A tensor as stored, before any precision conversion.
#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
        }
    }

    pub fn to<S: Scalar>(&self) -> Tensor<S> {
        match self {
            Stored::F32(t) => t.cast(),
            Stored::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub entries: Vec<(String, Stored)>,
}

impl Archive {
    /// All tensors in single precision. Double-precision entries are
    /// narrowed, with one warning naming how many were affected.
    pub fn to_f32(&self) -> NamedTensors<f32> {
        let narrowed = self.entries.iter().filter(|(_, t)| t.dtype() == DType::F64).count();
        if narrowed > 0 {
            log::warn!("{narrowed} f64 tensor(s) down-cast to f32 on load");
        }
        self.to_named()
    }

    /// All tensors converted to `S` without comment.
    pub fn to_named<S: Scalar>(&self) -> NamedTensors<S> {
        self.entries.iter().map(|(n, t)| (n.clone(), t.to())).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `(manifest, blob)` paths for an archive prefix. A path naming either file
/// is accepted as well.
pub fn archive_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let s = prefix.to_string_lossy();
    let stem = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".bin"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.manifest.json")),
        PathBuf::from(format!("{stem}.bin")),
    )
}

pub fn exists(prefix: &Path) -> bool {
    let (m, b) = archive_paths(prefix);
    m.is_file() && b.is_file()
}

/// Encodes `tensors` in order, back to back from offset 0.
pub fn encode<S: Scalar>(tensors: &NamedTensors<S>, metadata: serde_json::Value) -> (Manifest, Vec<u8>) {
    let width = S::DTYPE.size();
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| t.numel() * width).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors.iter() {
        let offset = blob.len() as u64;
        match S::DTYPE {
            DType::F32 => t
                .data()
                .iter()
                .for_each(|v| blob.extend((Scalar::to_f64(*v) as f32).to_le_bytes())),
            DType::F64 => t
                .data()
                .iter()
                .for_each(|v| blob.extend(Scalar::to_f64(*v).to_le_bytes())),
        }
        entries.push(Entry {
            name: name.to_string(),
            dtype: S::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        metadata,
        entries,
    };
    (manifest, blob)
}

/// Decodes a blob against an already validated manifest.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Archive, ArchiveError> {
    let available = blob.len() as u64;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let end = e.offset + e.byte_len;
        if end > available {
            return Err(ArchiveError::Truncated {
                name: e.name.clone(),
                needed: end,
                available,
            });
        }
        let bytes = &blob[e.offset as usize..end as usize];
        let stored = match e.dtype {
            DType::F32 => Stored::F32(tensor(
                &e.shape,
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )),
            DType::F64 => Stored::F64(tensor(
                &e.shape,
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )),
        };
        entries.push((e.name.clone(), stored));
    }
    Ok(Archive {
        metadata: manifest.metadata.clone(),
        entries,
    })
}

fn tensor<S: Scalar>(shape: &[usize], data: Vec<S>) -> Tensor<S> {
    // Lengths were validated against the shape already.
    Tensor::from_vec(shape, data).expect("validated length")
}

/// Writes both files. Each is written to a temporary name first and renamed,
/// so a crash never leaves a half-written archive under the final name.
pub fn save_archive<S: Scalar>(
    prefix: &Path,
    tensors: &NamedTensors<S>,
    metadata: serde_json::Value,
) -> Result<Manifest, ArchiveError> {
    let (mpath, bpath) = archive_paths(prefix);
    if let Some(dir) = mpath.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let (manifest, blob) = encode(tensors, metadata);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&bpath, &blob)?;
    write_atomic(&mpath, &json)?;
    Ok(manifest)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArchiveError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads and validates the manifest only.
pub fn read_manifest(prefix: &Path) -> Result<Manifest, ArchiveError> {
    let (mpath, _) = archive_paths(prefix);
    let text = fs::read(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|source| ArchiveError::Manifest {
        path: mpath.clone(),
        source,
    })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Reads an archive, validating the manifest before touching the blob.
pub fn read_archive(prefix: &Path) -> Result<Archive, ArchiveError> {
    let manifest = read_manifest(prefix)?;
    let (_, bpath) = archive_paths(prefix);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    if (blob.len() as u64) > manifest.blob_len() {
        log::warn!(
            "{}: {} trailing bytes after the last tensor",
            bpath.display(),
            blob.len() as u64 - manifest.blob_len()
        );
    }
    decode(&manifest, &blob)
}

/// Single-precision tensors of an archive, narrowing f64 entries.
pub fn load_archive(prefix: &Path) -> Result<NamedTensors<f32>, ArchiveError> {
    Ok(read_archive(prefix)?.to_f32())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_accept_either_file() {
        let want = (PathBuf::from("a/b.manifest.json"), PathBuf::from("a/b.bin"));
        assert_eq!(archive_paths(Path::new("a/b")), want);
        assert_eq!(archive_paths(Path::new("a/b.bin")), want);
        assert_eq!(archive_paths(Path::new("a/b.manifest.json")), want);
    }

    #[test]
    fn encode_lays_tensors_back_to_back() {
        let mut t = NamedTensors::new();
        t.push("a", Tensor::<f64>::zeros(&[2, 3]));
        t.push("b", Tensor::<f64>::zeros(&[]));
        let (m, blob) = encode(&t, serde_json::Value::Null);
        assert_eq!((m.entries[0].offset, m.entries[0].byte_len), (0, 48));
        assert_eq!((m.entries[1].offset, m.entries[1].byte_len), (48, 8));
        assert_eq!(blob.len(), 56);
        m.validate().unwrap();
    }

    #[test]
    fn shape_overflow_is_a_length_mismatch() {
        let m = Manifest {
            format: FORMAT.into(),
            version: 1,
            metadata: serde_json::Value::Null,
            entries: vec![Entry {
                name: "x".into(),
                dtype: DType::F32,
                shape: vec![usize::MAX, 4],
                offset: 0,
                byte_len: 4,
            }],
        };
        assert!(matches!(m.validate(), Err(ArchiveError::LengthMismatch { .. })));
    }
}
