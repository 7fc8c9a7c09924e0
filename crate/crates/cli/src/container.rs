//! On-disk dataset container.
//!
//! A container is a directory holding `manifest.json` and one raw file per
//! array. Arrays are little-endian, C-order, either `float32` or `complex64`
//! (interleaved real and imaginary `float32`). The manifest lists every file
//! with its shape, axes, byte length and SHA-256, the resolved run
//! configuration and the manifest hash of the container it was derived from.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Float32,
    Complex64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Complex64 => 8,
        }
    }
}

/// Labels one array dimension. Coordinates are either listed or given as
/// `start + i * step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisMeta {
    pub name: String,
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

impl AxisMeta {
    pub fn listed(name: &str, unit: &str, values: &[f64]) -> Self {
        Self { name: name.into(), unit: unit.into(), values: Some(values.to_vec()), start: None, step: None }
    }

    pub fn uniform(name: &str, unit: &str, start: f64, step: f64) -> Self {
        Self { name: name.into(), unit: unit.into(), values: None, start: Some(start), step: Some(step) }
    }

    pub fn index(name: &str) -> Self {
        Self { name: name.into(), unit: String::new(), values: None, start: None, step: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub axes: Vec<AxisMeta>,
    pub byte_length: u64,
    pub sha256: String,
}

/// Non-array file (JSON lines, CSV, images) tracked by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub byte_length: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParentRef {
    pub kind: String,
    pub path: String,
    pub manifest_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub tool_version: String,
    pub byte_order: String,
    pub array_order: String,
    /// Resolved run configuration.
    pub config: Value,
    pub parent: Option<ParentRef>,
    pub arrays: BTreeMap<String, ArrayEntry>,
    pub files: BTreeMap<String, FileEntry>,
    pub metadata: BTreeMap<String, Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError {
    CliError::io(path.display().to_string())
}

/// A container being written. Nothing is visible as a container until
/// [`Writer::finish`] writes the manifest.
pub struct Writer {
    dir: PathBuf,
    manifest: Manifest,
}

impl Writer {
    pub fn create(dir: &Path, kind: &str, config: Value, parent: Option<&Container>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let stale = dir.join(MANIFEST);
        if stale.exists() {
            fs::remove_file(&stale).map_err(io_err(&stale))?;
        }
        let parent = parent.map(|p| ParentRef {
            kind: p.manifest.kind.clone(),
            path: p.dir.display().to_string(),
            manifest_sha256: p.manifest_sha256.clone(),
        });
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                kind: kind.into(),
                tool_version: env!("UMI_VERSION").into(),
                byte_order: "little".into(),
                array_order: "C".into(),
                config,
                parent,
                arrays: BTreeMap::new(),
                files: BTreeMap::new(),
                metadata: BTreeMap::new(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn put(&mut self, name: &str, dtype: Dtype, shape: &[usize], axes: Vec<AxisMeta>, bytes: &[u8]) -> Result<()> {
        let count: usize = shape.iter().product();
        if count * dtype.size() != bytes.len() {
            return Err(CliError::Validation(format!("array {name}: shape {shape:?} does not match {} bytes", bytes.len())));
        }
        if axes.len() != shape.len() {
            return Err(CliError::Validation(format!("array {name}: {} axes for {} dimensions", axes.len(), shape.len())));
        }
        let file = format!("{name}.bin");
        let path = self.dir.join(&file);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        w.write_all(bytes).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        let entry = ArrayEntry {
            file,
            dtype,
            shape: shape.to_vec(),
            axes,
            byte_length: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        };
        self.manifest.arrays.insert(name.into(), entry);
        Ok(())
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], axes: Vec<AxisMeta>, values: impl IntoIterator<Item = f64>) -> Result<()> {
        let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
        self.put(name, Dtype::Float32, shape, axes, &bytes)
    }

    pub fn put_c64(
        &mut self,
        name: &str,
        shape: &[usize],
        axes: Vec<AxisMeta>,
        values: impl IntoIterator<Item = num_complex::Complex64>,
    ) -> Result<()> {
        let bytes: Vec<u8> = values
            .into_iter()
            .flat_map(|v| {
                let mut b = [0u8; 8];
                b[..4].copy_from_slice(&(v.re as f32).to_le_bytes());
                b[4..].copy_from_slice(&(v.im as f32).to_le_bytes());
                b
            })
            .collect();
        self.put(name, Dtype::Complex64, shape, axes, &bytes)
    }

    pub fn put_file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.manifest.files.insert(name.into(), FileEntry { byte_length: bytes.len() as u64, sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| CliError::Validation(format!("metadata {key}: {e}")))?;
        self.manifest.metadata.insert(key.into(), v);
        Ok(())
    }

    pub fn finish(self) -> Result<Container> {
        let text = manifest_text(&self.manifest)?;
        let path = self.dir.join(MANIFEST);
        fs::write(&path, &text).map_err(io_err(&path))?;
        Ok(Container { dir: self.dir, manifest_sha256: sha256_hex(text.as_bytes()), manifest: self.manifest })
    }
}

fn manifest_text(m: &Manifest) -> Result<String> {
    let mut text = serde_json::to_string_pretty(m).map_err(|e| CliError::Validation(format!("manifest: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// A container opened for reading.
#[derive(Debug, Clone)]
pub struct Container {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub manifest_sha256: String,
}

impl Container {
    /// Reads the manifest and checks that every listed file exists with the
    /// recorded byte length.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Validation(format!("{} is not a container: {e}", dir.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let manifest: Manifest = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Validation(format!("{}: {}: {}", path.display(), e.path(), e.inner())))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(CliError::Validation(format!(
                "{}: schema version {} is not supported",
                path.display(),
                manifest.schema_version
            )));
        }
        let c = Self { dir: dir.to_path_buf(), manifest_sha256: sha256_hex(text.as_bytes()), manifest };
        for (name, a) in &c.manifest.arrays {
            let expect = a.shape.iter().product::<usize>() as u64 * a.dtype.size() as u64;
            if expect != a.byte_length {
                return Err(CliError::Validation(format!("array {name}: byte length disagrees with its shape")));
            }
            c.check_length(&a.file, a.byte_length)?;
        }
        for (name, f) in &c.manifest.files {
            c.check_length(name, f.byte_length)?;
        }
        Ok(c)
    }

    fn check_length(&self, file: &str, len: u64) -> Result<()> {
        let path = self.dir.join(file);
        let meta = fs::metadata(&path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if meta.len() != len {
            return Err(CliError::Validation(format!("{}: {} bytes, manifest says {len}", path.display(), meta.len())));
        }
        Ok(())
    }

    /// Recomputes every hash.
    pub fn verify(&self) -> Result<()> {
        for a in self.manifest.arrays.values() {
            self.read_checked(&a.file, &a.sha256)?;
        }
        for (name, f) in &self.manifest.files {
            self.read_checked(name, &f.sha256)?;
        }
        Ok(())
    }

    fn read_checked(&self, file: &str, sha: &str) -> Result<Vec<u8>> {
        let path = self.dir.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != sha {
            return Err(CliError::Validation(format!("{}: content does not match its hash", path.display())));
        }
        Ok(bytes)
    }

    pub fn entry(&self, name: &str) -> Result<&ArrayEntry> {
        self.manifest
            .arrays
            .get(name)
            .ok_or_else(|| CliError::Validation(format!("{} has no array {name}", self.dir.display())))
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.arrays.contains_key(name)
    }

    fn bytes(&self, name: &str, dtype: Dtype) -> Result<(Vec<usize>, Vec<u8>)> {
        let e = self.entry(name)?;
        if e.dtype != dtype {
            return Err(CliError::Validation(format!("array {name} is {:?}, expected {dtype:?}", e.dtype)));
        }
        Ok((e.shape.clone(), self.read_checked(&e.file, &e.sha256)?))
    }

    pub fn get_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let (shape, bytes) = self.bytes(name, Dtype::Float32)?;
        let v = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok((shape, v))
    }

    pub fn get_c64(&self, name: &str) -> Result<(Vec<usize>, Vec<Complex32>)> {
        let (shape, bytes) = self.bytes(name, Dtype::Complex64)?;
        let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let v = bytes.chunks_exact(8).map(|b| Complex32::new(f(&b[..4]), f(&b[4..]))).collect();
        Ok((shape, v))
    }

    pub fn file(&self, name: &str) -> Result<Vec<u8>> {
        let f = self
            .manifest
            .files
            .get(name)
            .ok_or_else(|| CliError::Validation(format!("{} has no file {name}", self.dir.display())))?;
        self.read_checked(name, &f.sha256)
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .metadata
            .get(key)
            .ok_or_else(|| CliError::Validation(format!("{} has no metadata {key}", self.dir.display())))?;
        serde_json::from_value(v.clone()).map_err(|e| CliError::Validation(format!("metadata {key}: {e}")))
    }

    /// Opens the container this one was derived from and checks its hash.
    pub fn parent(&self) -> Result<Option<Container>> {
        let Some(p) = &self.manifest.parent else {
            return Ok(None);
        };
        let c = Container::open(Path::new(&p.path))?;
        if c.manifest_sha256 != p.manifest_sha256 {
            return Err(CliError::Validation(format!("parent container {} changed since it was used", p.path)));
        }
        Ok(Some(c))
    }

    /// Nearest ancestor (this container included) of the given kind.
    pub fn ancestor(&self, kind: &str) -> Result<Container> {
        let mut c = self.clone();
        loop {
            if c.manifest.kind == kind {
                return Ok(c);
            }
            c = c
                .parent()?
                .ok_or_else(|| CliError::Validation(format!("{} does not derive from a {kind} container", self.dir.display())))?;
        }
    }
}
