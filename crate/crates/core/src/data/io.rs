//! Headerless numeric CSV feature files and the dataset manifest.
//!
//! Manifest format, one sample per line, paths relative to the manifest:
//!
//! ```text
//! # dims: 128,171,126
//! id,label,path_mod1,...,path_modN
//! ```
//!
//! Blank lines and other `#` lines are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::sample::{Dataset, MultimodalSample};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes a `[L, D]` matrix as CSV. Values use the shortest representation
/// that parses back to the same `f64`.
pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let cols = t.shape()[1];
    let mut out = String::with_capacity(t.numel() * 12);
    for row in t.data().chunks(cols) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("write to string");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a CSV matrix, requiring exactly `expected_cols` columns when given.
pub fn read_matrix(path: &Path, expected_cols: Option<usize>) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let before = data.len();
        for (j, cell) in line.split(',').enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("column {}: '{}' is not a number", j + 1, cell.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(format!("row {}, column {}: non-finite value {cell}", i + 1, j + 1)));
            }
            data.push(v);
        }
        let width = data.len() - before;
        match (cols, expected_cols) {
            (_, Some(want)) if width != want => {
                return Err(Error::Data(format!(
                    "{}: line {}: expected {want} columns (declared dim), found {width}",
                    path.display(),
                    i + 1
                )));
            }
            (Some(c), _) if c != width => {
                return Err(parse_err(format!("expected {c} columns, found {width}")));
            }
            _ => cols = Some(width),
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{}: no rows", path.display())))?;
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub modality_dims: Vec<usize>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    let dims: Option<Vec<usize>> = s.split(',').map(|d| d.trim().parse().ok().filter(|&v| v > 0)).collect();
    dims.filter(|d| !d.is_empty())
}

/// Parses a manifest file; errors carry the offending line number.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut dims: Option<Vec<usize>> = None;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(d) = comment.trim().strip_prefix("dims:") {
                dims = Some(parse_dims(d).ok_or_else(|| err(format!("invalid dims declaration '{}'", d.trim())))?);
            }
            continue;
        }
        let n = dims.as_ref().ok_or_else(|| err("sample line before '# dims:' declaration".into()))?.len();
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 + n {
            return Err(err(format!("expected {} fields (id,label,{n} paths), found {}", 2 + n, fields.len())));
        }
        if fields[0].is_empty() {
            return Err(err("empty sample id".into()));
        }
        let label = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got '{other}'"))),
        };
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            label,
            paths: fields[2..].iter().map(PathBuf::from).collect(),
        });
    }
    let modality_dims = dims.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "missing '# dims:' declaration".into(),
    })?;
    Ok(Manifest { modality_dims, entries, root })
}

/// Loads one manifest entry. Streams of unequal length are truncated to the
/// shortest; the returned warning describes the truncation.
pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry) -> Result<(MultimodalSample, Option<String>)> {
    let mut streams = Vec::with_capacity(entry.paths.len());
    for (p, &dim) in entry.paths.iter().zip(&manifest.modality_dims) {
        let path = manifest.root.join(p);
        if !path.exists() {
            return Err(Error::Data(format!("{}: referenced file {} does not exist", entry.id, path.display())));
        }
        streams.push(read_matrix(&path, Some(dim))?);
    }
    let lens: Vec<usize> = streams.iter().map(|t| t.shape()[0]).collect();
    let min = *lens.iter().min().expect("at least one modality");
    let mut warning = None;
    if lens.iter().any(|&l| l != min) {
        let msg = format!("{}: stream lengths {lens:?} differ, truncating to {min}", entry.id);
        log::warn!("{msg}");
        warning = Some(msg);
        for t in &mut streams {
            let cols = t.shape()[1];
            if t.shape()[0] != min {
                *t = Tensor::new(vec![min, cols], t.data()[..min * cols].to_vec())?;
            }
        }
    }
    Ok((MultimodalSample::new(entry.id.clone(), streams, entry.label)?, warning))
}

/// Reads a manifest and every sample it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let samples =
        manifest.entries.iter().map(|e| load_sample(&manifest, e).map(|(s, _)| s)).collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest.modality_dims, samples)
}

/// Writes one CSV per modality per sample plus `manifest.csv` into `dir`.
pub fn export_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dims: Vec<String> = dataset.modality_dims.iter().map(usize::to_string).collect();
    let mut manifest = format!("# dims: {}\n", dims.join(","));
    for s in &dataset.samples {
        if s.id.contains(',') || s.id.contains('/') {
            return Err(Error::Data(format!("sample id '{}' may not contain ',' or '/'", s.id)));
        }
        let mut line = format!("{},{}", s.id, s.label);
        for (m, t) in s.streams.iter().enumerate() {
            let name = format!("{}_m{m}.csv", s.id);
            write_matrix(&dir.join(&name), t)?;
            line.push(',');
            line.push_str(&name);
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
