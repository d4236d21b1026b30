//! Training data: synthetic cardiac-like phantoms, image-orientation pair
//! generation, and deterministic train/validation/test splits.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orient::{apply_to_plane, OrientCode};
use crate::preprocess::{self, PreprocConfig, PreprocError};
use crate::volume::{read_volume, write_volume, DataType, Volume, VolumeError};

/// Segmentation classes in label order.
pub const SEG_CLASSES: [&str; 4] = ["background", "RV", "LV", "Myo"];
pub const RV: u8 = 1;
pub const LV: u8 = 2;
pub const MYO: u8 = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image and label dimensions differ: {image:?} vs {label:?}")]
    DimMismatch { image: (usize, usize), label: (usize, usize) },
    #[error("empty image")]
    EmptyImage,
    #[error("phantom size must be at least 32, got {0}")]
    PhantomTooSmall(usize),
    #[error("dataset of {0} items is too small to split (need at least 10)")]
    TooSmall(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// Deterministic generator for item `index` of a run seeded with `seed`.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Intensity profile of a simulated MR sequence, relative to a peak of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub background: f32,
    pub body: f32,
    pub lung: f32,
    pub blood: f32,
    pub myocardium: f32,
    pub spine: f32,
    /// Gaussian noise standard deviation.
    pub noise: f32,
}

impl Modality {
    /// Bright blood, dark myocardium.
    pub fn bssfp() -> Self {
        Modality {
            name: "bssfp".into(),
            background: 0.02,
            body: 0.38,
            lung: 0.08,
            blood: 0.92,
            myocardium: 0.22,
            spine: 0.6,
            noise: 0.03,
        }
    }

    /// Dark blood, bright myocardium and tissue.
    pub fn t2() -> Self {
        Modality {
            name: "t2".into(),
            background: 0.05,
            body: 0.75,
            lung: 0.3,
            blood: 0.1,
            myocardium: 0.55,
            spine: 0.2,
            noise: 0.04,
        }
    }

    /// Enhanced myocardium, moderately bright blood, darker tissue.
    pub fn lge() -> Self {
        Modality {
            name: "lge".into(),
            background: 0.02,
            body: 0.2,
            lung: 0.05,
            blood: 0.55,
            myocardium: 0.9,
            spine: 0.35,
            noise: 0.05,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "bssfp" => Some(Self::bssfp()),
            "t2" => Some(Self::t2()),
            "lge" => Some(Self::lge()),
            _ => None,
        }
    }
}

/// Draws a cardiac-like phantom of `size × size` pixels.
///
/// The canonical layout has the heart right of centre (+x) with the right
/// ventricle on its −x side, a lung on the −x side and the spine towards +y
/// inside an ellipse wider along x, so none of the eight orientation
/// operations maps the layout onto itself.
pub fn make_phantom<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    modality: &Modality,
) -> Result<(Array2<f32>, Array2<u8>), DataError> {
    if size < 32 {
        return Err(DataError::PhantomTooSmall(size));
    }
    let deg = std::f64::consts::PI / 180.0;
    let angle = rng.random_range(-14.5..14.5) * deg;
    let scale = rng.random_range(0.92..1.08);
    let shift = [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)];
    let jitter = |rng: &mut R, a: f64| rng.random_range(-a..a);

    let lv = [0.6 + jitter(rng, 0.02), 0.45 + jitter(rng, 0.02)];
    let myo_outer = 0.125 * (1.0 + jitter(rng, 0.08));
    let lv_radius = myo_outer * (0.62 + jitter(rng, 0.04));
    let rv_dir = (200.0 + jitter(rng, 10.0)) * deg;
    let rv_dist = myo_outer * 1.0;
    let rv = [lv[0] + rv_dist * rv_dir.cos(), lv[1] + rv_dist * rv_dir.sin()];
    let rv_radius = myo_outer * (0.85 + jitter(rng, 0.08));
    let body_r = [0.44 + jitter(rng, 0.02), 0.33 + jitter(rng, 0.02)];
    let lung = [0.28 + jitter(rng, 0.02), 0.42 + jitter(rng, 0.02)];
    let lung_r = [0.1 + jitter(rng, 0.015), 0.15 + jitter(rng, 0.015)];
    let spine = [0.5 + jitter(rng, 0.015), 0.74 + jitter(rng, 0.015)];
    let spine_r = 0.045;

    let bumps: Vec<([f64; 3], f64)> = (0..5)
        .map(|_| {
            (
                [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.08..0.2)],
                rng.random_range(-0.08..0.08),
            )
        })
        .collect();
    let gain = rng.random_range(700.0..1300.0f32);
    let noise = Normal::new(0.0, modality.noise as f64).expect("finite sigma");

    let (sin, cos) = angle.sin_cos();
    let inside = |p: [f64; 2], c: [f64; 2], r: [f64; 2]| {
        let dx = (p[0] - c[0]) / r[0];
        let dy = (p[1] - c[1]) / r[1];
        dx * dx + dy * dy <= 1.0
    };

    let mut image = Array2::<f32>::zeros((size, size));
    let mut label = Array2::<u8>::zeros((size, size));
    let n = size as f64;
    for x in 0..size {
        for y in 0..size {
            // pixel centre to canonical layout coordinates
            let px = (x as f64 + 0.5) / n - 0.5 - shift[0];
            let py = (y as f64 + 0.5) / n - 0.5 - shift[1];
            let qx = (cos * px + sin * py) / scale + 0.5;
            let qy = (-sin * px + cos * py) / scale + 0.5;
            let q = [qx, qy];

            let mut value;
            let mut class = 0u8;
            if !inside(q, [0.5, 0.5], body_r) {
                value = modality.background;
            } else {
                value = modality.body;
                let texture: f64 = bumps
                    .iter()
                    .map(|(b, amp)| {
                        let d2 = (q[0] - b[0]).powi(2) + (q[1] - b[1]).powi(2);
                        amp * (-d2 / (2.0 * b[2] * b[2])).exp()
                    })
                    .sum();
                value += texture as f32;
                if inside(q, lung, lung_r) {
                    value = modality.lung;
                }
                if inside(q, spine, [spine_r, spine_r]) {
                    value = modality.spine;
                }
                if inside(q, rv, [rv_radius, rv_radius]) && !inside(q, lv, [myo_outer * 1.08, myo_outer * 1.08]) {
                    value = modality.blood;
                    class = RV;
                }
                if inside(q, lv, [myo_outer, myo_outer]) {
                    value = modality.myocardium;
                    class = MYO;
                }
                if inside(q, lv, [lv_radius, lv_radius]) {
                    value = modality.blood;
                    class = LV;
                }
            }
            let noisy = (value + noise.sample(rng) as f32).max(0.0);
            image[[x, y]] = noisy * gain;
            label[[x, y]] = class;
        }
    }
    // a few hot pixels so the lower truncation windows matter
    for _ in 0..rng.random_range(1..4) {
        let x = rng.random_range(0..size);
        let y = rng.random_range(0..size);
        image[[x, y]] = gain * rng.random_range(1.4..2.0);
    }
    Ok((image, label))
}

/// An image (and optional label map) transformed by a drawn orientation code.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub image: Array2<f32>,
    pub label: Option<Array2<u8>>,
    pub code: OrientCode,
}

/// Draws a code uniformly from the eight classes and applies it to both the
/// image and its label map.
pub fn generate_pair<R: Rng + ?Sized>(
    image: ArrayView2<'_, f32>,
    label: Option<ArrayView2<'_, u8>>,
    rng: &mut R,
) -> Result<ImagePair, DataError> {
    if image.is_empty() {
        return Err(DataError::EmptyImage);
    }
    if let Some(l) = &label {
        if l.dim() != image.dim() {
            return Err(DataError::DimMismatch { image: image.dim(), label: l.dim() });
        }
    }
    let code = OrientCode::from_index(rng.random_range(0..OrientCode::COUNT)).expect("index below 8");
    Ok(pair_with_code(image, label, code))
}

pub fn pair_with_code(image: ArrayView2<'_, f32>, label: Option<ArrayView2<'_, u8>>, code: OrientCode) -> ImagePair {
    ImagePair {
        image: apply_to_plane(code, image),
        label: label.map(|l| apply_to_plane(code, l)),
        code,
    }
}

/// A network-ready example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(channels, sx, sy)`
    pub image: Array3<f32>,
    pub orient: OrientCode,
    /// Per-pixel class map over the four segmentation classes.
    pub seg: Option<Array2<u8>>,
}

impl Sample {
    /// Three truncation channels at the simplified network's input size.
    pub fn simple(pair: &ImagePair, cfg: &PreprocConfig) -> Result<Sample, DataError> {
        Ok(Sample { image: preprocess::simple_input(pair.image.view(), cfg)?, orient: pair.code, seg: None })
    }

    /// Z-scored single channel at `size`, with the label resized alongside.
    pub fn multitask(pair: &ImagePair, size: usize) -> Result<Sample, DataError> {
        let image = preprocess::multitask_input(pair.image.view(), size)?;
        let seg = match &pair.label {
            Some(l) => Some(preprocess::resize_labels(l.view(), size)?),
            None => None,
        };
        Ok(Sample { image, orient: pair.code, seg })
    }

    pub fn one_hot(&self) -> [f32; 8] {
        let mut v = [0.0; 8];
        v[self.orient.index()] = 1.0;
        v
    }
}

/// Pairs for items `0..n` of a seeded run; item `i` only depends on `(seed, i)`.
pub fn phantom_pairs(n: usize, seed: u64, size: usize, modality: &Modality) -> Result<Vec<ImagePair>, DataError> {
    (0..n)
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let (img, lab) = make_phantom(&mut rng, size, modality)?;
            generate_pair(img.view(), Some(lab.view()), &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratios: [0.8, 0.1, 0.1], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles with the spec's seed and cuts at the rounded ratios.
pub fn split<T>(items: Vec<T>, spec: &SplitSpec) -> Result<Split<T>, DataError> {
    let r = spec.ratios;
    if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(r));
    }
    let n = items.len();
    if n < 10 {
        return Err(DataError::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (n as f64 * r[0]).round() as usize;
    let n_val = ((n as f64 * r[1]).round() as usize).min(n - n_train);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("indices are a permutation")).collect::<Vec<T>>();
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(Split { train, val, test })
}

/// Per-case label file written next to each image.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseLabel {
    pub orientation: OrientCode,
    pub modality: String,
    pub seed: u64,
    pub index: usize,
    pub spacing_mm: f64,
}

/// Writes `n` phantom cases as `<dir>/{train,val,test}/case_NNNN.nii` with a
/// `case_NNNN_seg.nii` label volume and a `case_NNNN.json` orientation label.
pub fn write_dataset(
    dir: &Path,
    n: usize,
    size: usize,
    modality: &Modality,
    spec: &SplitSpec,
    spacing_mm: f64,
) -> Result<Split<usize>, DataError> {
    let parts = split((0..n).collect::<Vec<_>>(), spec)?;
    let pairs = phantom_pairs(n, spec.seed, size, modality)?;
    for (name, ids) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| DataError::Io { path: sub.clone(), source: e })?;
        for &i in ids {
            let pair = &pairs[i];
            let stem = format!("case_{i:04}");
            let img = Volume::from_plane(pair.image.mapv(f32::round), [spacing_mm; 2])?
                .with_dtype(DataType::I16)
                .with_description(&format!("phantom {} {}", modality.name, stem));
            write_volume(&img, &sub.join(format!("{stem}.nii")))?;
            if let Some(l) = &pair.label {
                let lab = Volume::from_plane(l.mapv(|v| v as f32), [spacing_mm; 2])?.with_dtype(DataType::U8);
                write_volume(&lab, &sub.join(format!("{stem}_seg.nii")))?;
            }
            let meta = CaseLabel {
                orientation: pair.code,
                modality: modality.name.clone(),
                seed: spec.seed,
                index: i,
                spacing_mm,
            };
            let path = sub.join(format!("{stem}.json"));
            let text = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Json { path: path.clone(), source: e })?;
            fs::write(&path, text).map_err(|e| DataError::Io { path, source: e })?;
        }
    }
    Ok(parts)
}

/// Loads every `case_*.json` in `dir` with its image and (if present) label.
pub fn load_cases(dir: &Path) -> Result<Vec<ImagePair>, DataError> {
    let mut jsons: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    jsons.sort();
    let mut out = Vec::with_capacity(jsons.len());
    for path in jsons {
        let text = fs::read_to_string(&path).map_err(|e| DataError::Io { path: path.clone(), source: e })?;
        let meta: CaseLabel = serde_json::from_str(&text).map_err(|e| DataError::Json { path: path.clone(), source: e })?;
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let img = read_volume(&path.with_file_name(format!("{stem}.nii")))?;
        let seg_path = path.with_file_name(format!("{stem}_seg.nii"));
        let label = if seg_path.exists() {
            Some(read_volume(&seg_path)?.slice(0).expect("one slice").mapv(|v| v as u8))
        } else {
            None
        };
        out.push(ImagePair { image: img.slice(0).expect("one slice").to_owned(), label, code: meta.orientation });
    }
    Ok(out)
}
