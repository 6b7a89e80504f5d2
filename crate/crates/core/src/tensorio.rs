//! On-disk interchange format and the in-memory matrix model.
//!
//! A dataset is a directory holding `manifest.json` plus one raw payload file
//! per entry. Payloads are row-major little-endian `f32` with no header; the
//! manifest carries the shape and a free-form `meta` object:
//!
//! ```json
//! {
//!   "stimuli": { "ids": ["s0", "s1"], "texts": null },
//!   "entries": [
//!     { "name": "opt.layer3.pos", "path": "opt.layer3.pos.f32", "rows": 2, "cols": 1024,
//!       "dtype": "f32le",
//!       "meta": { "model_id": "opt", "unit": "layer", "unit_index": 3, "condition": "pos" } }
//!   ]
//! }
//! ```
//!
//! Entries whose `meta` carries a `subject_id` load as [`ResponseMatrix`];
//! entries with a `model_id` load as [`ActivationTensor`]. Anything else
//! (PCA models, RDMs, couplings) goes through [`load_raw`] / [`save_raw`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DTYPE_F32LE: &str = "f32le";

/// Ordered stimulus identifiers, optionally with their sentence text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    texts: Option<Vec<String>>,
}

impl StimulusSet {
    pub fn new(ids: Vec<String>, texts: Option<Vec<String>>) -> Result<Self> {
        let set = Self { ids, texts };
        set.validate()?;
        Ok(set)
    }

    /// `s0 .. s{n-1}`.
    pub fn numbered(n: usize) -> Self {
        Self {
            ids: (0..n).map(|i| format!("s{i}")).collect(),
            texts: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::InvalidArgument("stimulus set is empty".into()));
        }
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate stimulus id `{id}`")));
            }
        }
        if let Some(texts) = &self.texts {
            if texts.len() != self.ids.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} stimulus texts for {} ids",
                    texts.len(),
                    self.ids.len()
                )));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn texts(&self) -> Option<&[String]> {
        self.texts.as_deref()
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }
}

/// Granularity an activation tensor was read out at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Layer,
    HeadOutput,
    AttentionWeights,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Layer => "layer",
            Unit::HeadOutput => "head_output",
            Unit::AttentionWeights => "attention_weights",
        })
    }
}

/// Positional-encoding condition under which activations were extracted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Pos,
    Nopos,
    Other(String),
}

impl Condition {
    pub fn as_str(&self) -> &str {
        match self {
            Condition::Pos => "pos",
            Condition::Nopos => "nopos",
            Condition::Other(s) => s,
        }
    }
}

impl From<&str> for Condition {
    fn from(s: &str) -> Self {
        match s {
            "pos" => Condition::Pos,
            "nopos" => Condition::Nopos,
            other => Condition::Other(other.to_string()),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Condition::from(s.as_str()))
    }
}

fn check_finite(data: &DMatrix<f32>) -> Result<()> {
    // Report the first offender in row-major order.
    for r in 0..data.nrows() {
        for c in 0..data.ncols() {
            if !data[(r, c)].is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Stimuli × features activations for one (model, unit, condition) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    data: DMatrix<f32>,
    pub model_id: String,
    pub unit: Unit,
    pub unit_index: usize,
    pub condition: Condition,
}

impl ActivationTensor {
    pub fn new(
        data: DMatrix<f32>,
        model_id: impl Into<String>,
        unit: Unit,
        unit_index: usize,
        condition: Condition,
    ) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "activation tensor must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            data,
            model_id: model_id.into(),
            unit,
            unit_index,
            condition,
        })
    }

    pub fn data(&self) -> &DMatrix<f32> {
        &self.data
    }

    pub fn n_stimuli(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.data.map(f64::from)
    }

    /// Same metadata, new payload.
    pub fn with_data(&self, data: DMatrix<f32>) -> Result<Self> {
        Self::new(
            data,
            self.model_id.clone(),
            self.unit,
            self.unit_index,
            self.condition.clone(),
        )
    }

    pub fn check_stimuli(&self, stimuli: &StimulusSet) -> Result<()> {
        if self.n_stimuli() != stimuli.count() {
            return Err(Error::DimensionMismatch(format!(
                "activation has {} rows but stimulus set has {} entries",
                self.n_stimuli(),
                stimuli.count()
            )));
        }
        Ok(())
    }
}

/// Stimuli × voxels responses for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    data: DMatrix<f32>,
    pub subject_id: String,
    voxel_labels: Option<Vec<String>>,
}

impl ResponseMatrix {
    pub fn new(
        data: DMatrix<f32>,
        subject_id: impl Into<String>,
        voxel_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "response matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(labels) = &voxel_labels {
            if labels.len() != data.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "{} voxel labels for {} voxels",
                    labels.len(),
                    data.ncols()
                )));
            }
        }
        check_finite(&data)?;
        Ok(Self {
            data,
            subject_id: subject_id.into(),
            voxel_labels,
        })
    }

    pub fn data(&self) -> &DMatrix<f32> {
        &self.data
    }

    pub fn voxel_labels(&self) -> Option<&[String]> {
        self.voxel_labels.as_deref()
    }

    pub fn n_stimuli(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.data.map(f64::from)
    }

    /// Keeps the given voxel columns, in the given order.
    pub fn select_voxels(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::InvalidArgument("empty voxel selection".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_voxels()) {
            return Err(Error::InvalidArgument(format!(
                "voxel index {bad} out of range for {} voxels",
                self.n_voxels()
            )));
        }
        let data = self.data.select_columns(idx);
        let labels = self
            .voxel_labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i].clone()).collect());
        Self::new(data, self.subject_id.clone(), labels)
    }

    /// Keeps voxels whose ROI tag equals `label`.
    pub fn select_label(&self, label: &str) -> Result<Self> {
        let labels = self.voxel_labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("subject {} has no voxel labels", self.subject_id))
        })?;
        let idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.as_str() == label)
            .map(|(i, _)| i)
            .collect();
        self.select_voxels(&idx)
    }
}

/// Result of [`load_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedMatrix {
    Activation(ActivationTensor),
    Response(ResponseMatrix),
}

impl LoadedMatrix {
    pub fn data(&self) -> &DMatrix<f32> {
        match self {
            LoadedMatrix::Activation(a) => a.data(),
            LoadedMatrix::Response(r) => r.data(),
        }
    }

    pub fn into_activation(self) -> Result<ActivationTensor> {
        match self {
            LoadedMatrix::Activation(a) => Ok(a),
            LoadedMatrix::Response(r) => Err(Error::InvalidArgument(format!(
                "entry for subject `{}` is a response matrix, expected activations",
                r.subject_id
            ))),
        }
    }

    pub fn into_response(self) -> Result<ResponseMatrix> {
        match self {
            LoadedMatrix::Response(r) => Ok(r),
            LoadedMatrix::Activation(a) => Err(Error::InvalidArgument(format!(
                "entry for model `{}` is an activation tensor, expected responses",
                a.model_id
            ))),
        }
    }

    fn meta(&self) -> EntryMeta {
        match self {
            LoadedMatrix::Activation(a) => EntryMeta {
                model_id: Some(a.model_id.clone()),
                unit: Some(a.unit),
                unit_index: Some(a.unit_index),
                condition: Some(a.condition.clone()),
                ..EntryMeta::default()
            },
            LoadedMatrix::Response(r) => EntryMeta {
                subject_id: Some(r.subject_id.clone()),
                voxel_labels: r.voxel_labels.clone(),
                ..EntryMeta::default()
            },
        }
    }
}

impl From<ActivationTensor> for LoadedMatrix {
    fn from(a: ActivationTensor) -> Self {
        LoadedMatrix::Activation(a)
    }
}

impl From<ResponseMatrix> for LoadedMatrix {
    fn from(r: ResponseMatrix) -> Self {
        LoadedMatrix::Response(r)
    }
}

/// Free-form per-entry metadata. Unknown keys are preserved in `extra`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<Unit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_labels: Option<Vec<String>>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    #[serde(default)]
    pub meta: EntryMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimuli: Option<StimulusSet>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if let Some(stimuli) = &manifest.stimuli {
            stimuli.validate()?;
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        write_atomic(path, text.as_bytes())
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Inserts or replaces the entry with the same name, keeping order.
    pub fn upsert(&mut self, entry: ManifestEntry) {
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }
}

/// Accepts either the manifest file itself or the directory containing it.
pub fn resolve_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_f32le(data: &DMatrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for r in 0..data.nrows() {
        for c in 0..data.ncols() {
            out.extend_from_slice(&data[(r, c)].to_le_bytes());
        }
    }
    out
}

pub fn decode_f32le(bytes: &[u8], rows: usize, cols: usize) -> DMatrix<f32> {
    debug_assert_eq!(bytes.len(), rows * cols * 4);
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

/// Reads one entry's payload and metadata without interpreting the metadata.
pub fn load_raw(manifest_path: &Path, entry_name: &str) -> Result<(DMatrix<f32>, EntryMeta)> {
    let manifest_path = resolve_manifest_path(manifest_path);
    let manifest = Manifest::read(&manifest_path)?;
    let entry = manifest
        .entry(entry_name)
        .ok_or_else(|| Error::MissingEntry(entry_name.to_string()))?;
    if entry.dtype != DTYPE_F32LE {
        return Err(Error::Manifest {
            path: manifest_path.clone(),
            msg: format!("unsupported dtype `{}` for `{}`", entry.dtype, entry.name),
        });
    }
    let payload_path = manifest_dir(&manifest_path).join(&entry.path);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = entry.rows * entry.cols * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            entry: entry.name.clone(),
            expected,
            found: bytes.len(),
        });
    }
    let data = decode_f32le(&bytes, entry.rows, entry.cols);
    check_finite(&data)?;
    if let (Some(stimuli), None) = (&manifest.stimuli, &entry.meta.extra.get("kind")) {
        if entry.rows != stimuli.count() {
            return Err(Error::DimensionMismatch(format!(
                "entry `{}` has {} rows but manifest lists {} stimuli",
                entry.name,
                entry.rows,
                stimuli.count()
            )));
        }
    }
    Ok((data, entry.meta.clone()))
}

/// Writes `data` as entry `entry_name`, creating or updating the manifest.
pub fn save_raw(
    data: &DMatrix<f32>,
    meta: EntryMeta,
    manifest_path: &Path,
    entry_name: &str,
) -> Result<()> {
    check_finite(data)?;
    if entry_name.is_empty() || entry_name.contains(['/', '\\']) {
        return Err(Error::InvalidArgument(format!(
            "entry name `{entry_name}` must be a plain file stem"
        )));
    }
    let manifest_path = resolve_manifest_path(manifest_path);
    let dir = manifest_dir(&manifest_path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = if manifest_path.exists() {
        Manifest::read(&manifest_path)?
    } else {
        Manifest::default()
    };
    let file_name = format!("{entry_name}.f32");
    write_atomic(&dir.join(&file_name), &encode_f32le(data))?;
    manifest.upsert(ManifestEntry {
        name: entry_name.to_string(),
        path: file_name,
        rows: data.nrows(),
        cols: data.ncols(),
        dtype: DTYPE_F32LE.to_string(),
        meta,
    });
    manifest.write(&manifest_path)
}

/// Loads an activation tensor or response matrix, depending on the entry's metadata.
pub fn load_matrix(manifest_path: &Path, entry_name: &str) -> Result<LoadedMatrix> {
    let (data, meta) = load_raw(manifest_path, entry_name)?;
    if let Some(subject_id) = meta.subject_id {
        return Ok(ResponseMatrix::new(data, subject_id, meta.voxel_labels)?.into());
    }
    let model_id = meta.model_id.ok_or_else(|| Error::Manifest {
        path: resolve_manifest_path(manifest_path),
        msg: format!("entry `{entry_name}` has neither subject_id nor model_id in meta"),
    })?;
    Ok(ActivationTensor::new(
        data,
        model_id,
        meta.unit.unwrap_or(Unit::Layer),
        meta.unit_index.unwrap_or(0),
        meta.condition.unwrap_or(Condition::Other("unspecified".into())),
    )?
    .into())
}

pub fn save_matrix(m: &LoadedMatrix, manifest_path: &Path, entry_name: &str) -> Result<()> {
    save_raw(m.data(), m.meta(), manifest_path, entry_name)
}

/// Records the stimulus set in a manifest (creating it if needed).
pub fn save_stimuli(stimuli: &StimulusSet, manifest_path: &Path) -> Result<()> {
    let manifest_path = resolve_manifest_path(manifest_path);
    let dir = manifest_dir(&manifest_path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = if manifest_path.exists() {
        Manifest::read(&manifest_path)?
    } else {
        Manifest::default()
    };
    manifest.stimuli = Some(stimuli.clone());
    manifest.write(&manifest_path)
}

/// Per-column standardization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ColumnStats {
    pub fn dim(&self) -> usize {
        self.means.len()
    }
}

/// Column means and population standard deviations (divisor n).
///
/// Columns whose spread is at rounding level relative to their magnitude are
/// recorded with std 0.
pub fn zscore_fit(train: &DMatrix<f64>) -> Result<ColumnStats> {
    let n = train.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "z-score fit needs at least 2 rows, got {n}"
        )));
    }
    let nf = n as f64;
    let mut means = Vec::with_capacity(train.ncols());
    let mut stds = Vec::with_capacity(train.ncols());
    for col in train.column_iter() {
        let mean = col.iter().sum::<f64>() / nf;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let std = var.sqrt();
        means.push(mean);
        stds.push(if std <= 1e-12 * scale.max(f64::MIN_POSITIVE) { 0.0 } else { std });
    }
    Ok(ColumnStats { means, stds })
}

/// `(x - mean) / std` per column; std-0 columns become zeros.
pub fn zscore_apply(stats: &ColumnStats, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.ncols() != stats.dim() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} columns, stats have {}",
            m.ncols(),
            stats.dim()
        )));
    }
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let (mu, sd) = (stats.means[j], stats.stds[j]);
        if sd == 0.0 {
            col.fill(0.0);
        } else {
            col.apply(|x| *x = (*x - mu) / sd);
        }
    }
    Ok(out)
}
