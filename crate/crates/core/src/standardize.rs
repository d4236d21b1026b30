//! Recognition of a volume's orientation and its correction on disk.
//!
//! Every slice is classified on its own; the file-level decision is the
//! confidence-weighted majority of the slice predictions, ties going to the
//! lowest code. Correction applies the inverse operation to the voxels and
//! rewrites the affine so that world positions are unchanged.
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{predict_code, Model, NetError, NUM_CODES};
use crate::orient::{all_codes, apply_to_volume, invert, OrientCode, OrientError};
use crate::volume::{is_nifti_path, read_volume, write_atomic, write_volume, Volume, VolumeError};

pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.5;

#[derive(Debug, Error)]
pub enum StandardizeError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Orient(#[from] OrientError),
    #[error("volume has no slice with image content")]
    EmptyVolume,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePrediction {
    pub slice: usize,
    pub code: OrientCode,
    /// Probability of `code`.
    pub confidence: f64,
    pub probabilities: [f32; NUM_CODES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub slices: Vec<SlicePrediction>,
    pub consensus: OrientCode,
    /// Mean probability the slices assign to the consensus code.
    pub confidence: f64,
    /// All slices predicted the consensus code.
    pub unanimous: bool,
}

/// Confidence-weighted vote over slice predictions.
///
/// Returns the winning code (lowest code on ties), the mean probability of
/// that code across slices, and whether the vote was unanimous.
pub fn consensus(slices: &[SlicePrediction]) -> Option<(OrientCode, f64, bool)> {
    if slices.is_empty() {
        return None;
    }
    let mut votes = [0.0f64; NUM_CODES];
    for s in slices {
        votes[s.code.index()] += s.confidence;
    }
    let mut best = 0;
    for i in 1..NUM_CODES {
        if votes[i] > votes[best] {
            best = i;
        }
    }
    let code = all_codes()[best];
    let confidence = slices.iter().map(|s| s.probabilities[best] as f64).sum::<f64>() / slices.len() as f64;
    let unanimous = slices.iter().all(|s| s.code == code);
    Some((code, confidence, unanimous))
}

/// Classifies every non-constant slice of `vol` and forms the file-level
/// consensus. A volume without such slices is an error.
pub fn recognize(vol: &Volume, model: &Model) -> Result<Recognition, StandardizeError> {
    // constant slices carry no orientation information
    let informative: Vec<_> = vol
        .slices()
        .filter(|(_, s)| s.iter().any(|&v| v != s[[0, 0]]))
        .collect();
    if informative.is_empty() {
        return Err(StandardizeError::EmptyVolume);
    }
    let probs = model.predict_slices(informative.iter().map(|(_, s)| s.view()))?;
    let slices = informative
        .iter()
        .zip(probs)
        .map(|(&(k, _), p)| {
            let code = predict_code(&p)?;
            Ok(SlicePrediction { slice: k, code, confidence: p[code.index()] as f64, probabilities: p })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    let (consensus, confidence, unanimous) = consensus(&slices).ok_or(StandardizeError::EmptyVolume)?;
    Ok(Recognition { slices, consensus, confidence, unanimous })
}

/// Undoes orientation `code`: applies its inverse to voxels and affine.
pub fn correct(vol: &Volume, code: OrientCode) -> Result<Volume, StandardizeError> {
    Ok(apply_to_volume(invert(code), vol)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Corrected,
    AlreadyStandard,
    SkippedLowConfidence,
    Failed,
}

/// One JSON-lines record of a standardization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationReport {
    pub input: PathBuf,
    /// File holding the result; absent when nothing was written.
    pub output: Option<PathBuf>,
    pub action: Action,
    pub consensus: Option<OrientCode>,
    pub confidence: Option<f64>,
    pub unanimous: Option<bool>,
    pub slices: Vec<SlicePrediction>,
    pub error: Option<String>,
}

impl StandardizationReport {
    fn failed(input: &Path, err: impl std::fmt::Display) -> Self {
        StandardizationReport {
            input: input.to_path_buf(),
            output: None,
            action: Action::Failed,
            consensus: None,
            confidence: None,
            unanimous: None,
            slices: Vec::new(),
            error: Some(err.to_string()),
        }
    }
}

/// Recognizes `input` and, when it is mis-oriented with enough confidence,
/// writes the corrected volume to `output` (which may equal `input`).
///
/// An already-standard file is never re-encoded: with a distinct `output`
/// its bytes are copied verbatim.
pub fn standardize_file(input: &Path, output: &Path, model: &Model, confidence_floor: f64) -> Result<StandardizationReport, StandardizeError> {
    let vol = read_volume(input)?;
    let rec = recognize(&vol, model)?;
    let mut report = StandardizationReport {
        input: input.to_path_buf(),
        output: None,
        action: Action::AlreadyStandard,
        consensus: Some(rec.consensus),
        confidence: Some(rec.confidence),
        unanimous: Some(rec.unanimous),
        slices: rec.slices,
        error: None,
    };
    if rec.consensus.is_identity() {
        if output != input {
            let bytes = std::fs::read(input).map_err(|source| StandardizeError::Io { path: input.into(), source })?;
            write_atomic(output, &bytes)?;
        }
        report.output = Some(output.to_path_buf());
    } else if rec.confidence < confidence_floor {
        report.action = Action::SkippedLowConfidence;
    } else {
        let fixed = correct(&vol, rec.consensus)?;
        write_volume(&fixed, output)?;
        report.action = Action::Corrected;
        report.output = Some(output.to_path_buf());
    }
    Ok(report)
}

/// Where corrected files go.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputMode {
    InPlace,
    /// Mirror of the input tree under this directory.
    Directory(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub output: OutputMode,
    pub recursive: bool,
    pub confidence_floor: f64,
    /// Worker threads; defaults to the available parallelism.
    pub jobs: Option<usize>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { output: OutputMode::InPlace, recursive: false, confidence_floor: DEFAULT_CONFIDENCE_FLOOR, jobs: None }
    }
}

#[derive(Debug)]
pub struct BatchResult {
    pub records: Vec<StandardizationReport>,
    /// 0 when every file succeeded, 2 when some were skipped or failed, 1 on a
    /// setup error (nothing processed).
    pub exit_code: i32,
    pub setup_error: Option<String>,
}

impl BatchResult {
    fn setup(err: impl std::fmt::Display) -> Self {
        BatchResult { records: Vec::new(), exit_code: 1, setup_error: Some(err.to_string()) }
    }
}

/// NIfTI files in `folder`, sorted by path.
pub fn find_volumes(folder: &Path, recursive: bool) -> Result<Vec<PathBuf>, StandardizeError> {
    let depth = if recursive { usize::MAX } else { 1 };
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(folder).max_depth(depth).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(folder).to_path_buf();
            StandardizeError::Io { path, source: e.into() }
        })?;
        if entry.file_type().is_file() && is_nifti_path(entry.path()) {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Loads the model at `model_path` and standardizes every NIfTI file of `folder`.
pub fn adjust_batch(folder: &Path, model_path: &Path, opts: &BatchOptions) -> BatchResult {
    if !folder.is_dir() {
        return BatchResult::setup(format!("{}: not a directory", folder.display()));
    }
    match Model::load(model_path) {
        Ok(model) => adjust_batch_with(folder, &model, opts),
        Err(e) => BatchResult::setup(format!("{}: {e}", model_path.display())),
    }
}

/// Like [`adjust_batch`] with an already loaded model. Per-file errors are
/// recorded and never stop the batch.
pub fn adjust_batch_with(folder: &Path, model: &Model, opts: &BatchOptions) -> BatchResult {
    if !folder.is_dir() {
        return BatchResult::setup(format!("{}: not a directory", folder.display()));
    }
    let files = match find_volumes(folder, opts.recursive) {
        Ok(f) => f,
        Err(e) => return BatchResult::setup(e),
    };
    let outputs: Vec<PathBuf> = files
        .iter()
        .map(|f| match &opts.output {
            OutputMode::InPlace => f.clone(),
            OutputMode::Directory(dir) => dir.join(f.strip_prefix(folder).unwrap_or(f)),
        })
        .collect();
    let jobs = opts
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, files.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<StandardizationReport>>> = Mutex::new(vec![None; files.len()]);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= files.len() {
            break;
        }
        let (input, output) = (&files[i], &outputs[i]);
        let rec = output
            .parent()
            .map_or(Ok(()), std::fs::create_dir_all)
            .map_err(|source| StandardizeError::Io { path: output.clone(), source })
            .and_then(|_| standardize_file(input, output, model, opts.confidence_floor))
            .unwrap_or_else(|e| StandardizationReport::failed(input, e));
        slots.lock().expect("no worker panicked")[i] = Some(rec);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs {
            s.spawn(work);
        }
        work();
    });
    let records: Vec<_> = slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every file handled")).collect();
    let clean = records.iter().all(|r| matches!(r.action, Action::Corrected | Action::AlreadyStandard));
    BatchResult { records, exit_code: if clean { 0 } else { 2 }, setup_error: None }
}

/// Writes one JSON object per line.
pub fn write_report<W: Write>(records: &[StandardizationReport], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
