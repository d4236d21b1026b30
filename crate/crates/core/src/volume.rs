//! Volumes and their on-disk forms: a NIfTI-1 single-file subset (`.nii`,
//! `.nii.gz`) and a raw sidecar pair (`.bin` voxels + `.json` geometry).
//!
//! Voxels are kept as `f32` indexed `[x, y, z]`; every supported stored type
//! (u8, i16, u16, f32) is exactly representable, so writing a volume back in
//! its original type is lossless. Scaling fields (`scl_slope`, `scl_inter`)
//! are passed through untouched and never applied.
//!
//! Affine precedence when reading NIfTI: sform rows when `sform_code > 0`,
//! otherwise the quaternion form when `qform_code > 0`, otherwise a plain
//! diagonal of the voxel sizes. The quaternion form is
//!
//! ```text
//! a = sqrt(1 - b² - c² - d²)
//! R = [[a²+b²-c²-d², 2(bc-ad),    2(bd+ac)   ],
//!      [2(bc+ad),    a²+c²-b²-d², 2(cd-ab)   ],
//!      [2(bd-ac),    2(cd+ab),    a²+d²-b²-c²]]
//! affine[:3,:3] = R · diag(dx, dy, qfac·dz),  affine[:3,3] = (qx, qy, qz)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const HEADER_SIZE: usize = 348;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("unsupported data type code {0}")]
    UnsupportedDtype(i16),
    #[error("unsupported dimensionality {0} (only 2D and 3D volumes)")]
    UnsupportedDimension(usize),
    #[error("unsupported file format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

impl VolumeError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        VolumeError::Io { path: path.to_path_buf(), source }
    }
}

/// Stored voxel type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    U8,
    I16,
    U16,
    F32,
}

impl DataType {
    fn nifti_code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::U16 => 512,
            DataType::F32 => 16,
        }
    }

    fn from_nifti_code(code: i16) -> Result<Self, VolumeError> {
        match code {
            2 => Ok(DataType::U8),
            4 => Ok(DataType::I16),
            512 => Ok(DataType::U16),
            16 => Ok(DataType::F32),
            other => Err(VolumeError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::F32 => 4,
        }
    }

    fn decode(self, bytes: &[u8]) -> f32 {
        match self {
            DataType::U8 => bytes[0] as f32,
            DataType::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f32,
            DataType::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f32,
            DataType::F32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        }
    }

    fn encode(self, v: f32, out: &mut Vec<u8>) {
        match self {
            DataType::U8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            DataType::I16 => out.extend((v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes()),
            DataType::U16 => out.extend((v.round().clamp(0.0, 65535.0) as u16).to_le_bytes()),
            DataType::F32 => out.extend(v.to_le_bytes()),
        }
    }
}

/// Raw NIfTI header bytes kept for pass-through of fields this tool does not own.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    raw: Vec<u8>,
    extension: Vec<u8>,
    affine_at_read: Matrix4<f64>,
}

impl NiftiHeader {
    fn i16_at(&self, off: usize) -> i16 {
        i16::from_le_bytes([self.raw[off], self.raw[off + 1]])
    }

    fn f32_at(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw[off..off + 4].try_into().unwrap())
    }

    fn set_i16(&mut self, off: usize, v: i16) {
        self.raw[off..off + 2].copy_from_slice(&v.to_le_bytes());
    }

    fn set_f32(&mut self, off: usize, v: f32) {
        self.raw[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }

    pub fn description(&self) -> String {
        c_string(&self.raw[148..228])
    }

    pub fn intent_code(&self) -> i16 {
        self.i16_at(68)
    }

    pub fn intent_name(&self) -> String {
        c_string(&self.raw[328..344])
    }

    pub fn sform_code(&self) -> i16 {
        self.i16_at(254)
    }

    pub fn qform_code(&self) -> i16 {
        self.i16_at(252)
    }

    /// Bytes of the header fields that geometry updates never touch.
    pub fn passthrough_fields(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.raw[56..70]); // intent parameters and code
        out.extend_from_slice(&self.raw[112..120]); // scaling
        out.extend_from_slice(&self.raw[123..140]); // units, cal range, timing
        out.extend_from_slice(&self.raw[148..252]); // descrip, aux_file
        out.extend_from_slice(&self.raw[328..344]); // intent_name
        out.extend_from_slice(&self.extension);
        out
    }

    fn fresh(description: &str) -> Self {
        let mut raw = vec![0u8; HEADER_SIZE];
        raw[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        raw[344..348].copy_from_slice(MAGIC_SINGLE);
        let desc = description.as_bytes();
        let n = desc.len().min(79);
        raw[148..148 + n].copy_from_slice(&desc[..n]);
        let mut h = NiftiHeader { raw, extension: vec![0; 4], affine_at_read: Matrix4::zeros() };
        h.set_f32(112, 1.0); // scl_slope
        h.raw[123] = 2; // millimetres
        h
    }
}

fn c_string(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

/// A 2D slice or 3D stack of voxels with its world geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    dtype: DataType,
    planar: bool,
    max_gray: f32,
    header: Option<NiftiHeader>,
}

fn max_of(data: &Array3<f32>) -> f32 {
    data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

fn check_geometry(spacing: &[f64; 3], affine: &Matrix4<f64>) -> Result<(), VolumeError> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(VolumeError::Invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    let det = affine.fixed_view::<3, 3>(0, 0).determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(VolumeError::Invalid("affine is singular".into()));
    }
    Ok(())
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self, VolumeError> {
        check_geometry(&spacing, &affine)?;
        if data.is_empty() {
            return Err(VolumeError::Invalid("volume has no voxels".into()));
        }
        let max_gray = max_of(&data);
        Ok(Volume { data, spacing, affine, dtype: DataType::F32, planar: false, max_gray, header: None })
    }

    /// Single 2D slice with an axis-aligned affine built from the spacing.
    pub fn from_plane(plane: Array2<f32>, spacing: [f64; 2]) -> Result<Self, VolumeError> {
        let affine = Matrix4::from_diagonal(&nalgebra::Vector4::new(spacing[0], spacing[1], 1.0, 1.0));
        let data = plane.insert_axis(Axis(2));
        let mut vol = Volume::new(data, [spacing[0], spacing[1], 1.0], affine)?;
        vol.planar = true;
        Ok(vol)
    }

    pub fn with_dtype(mut self, dtype: DataType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_description(mut self, description: &str) -> Self {
        let mut header = self.header.take().unwrap_or_else(|| {
            let mut h = NiftiHeader::fresh("");
            h.affine_at_read = Matrix4::zeros();
            h
        });
        header.raw[148..228].fill(0);
        let n = description.len().min(79);
        header.raw[148..148 + n].copy_from_slice(&description.as_bytes()[..n]);
        self.header = Some(header);
        self
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// (sx, sy, sz)
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn dtype(&self) -> DataType {
        self.dtype
    }

    pub fn is_planar(&self) -> bool {
        self.planar
    }

    /// Maximum voxel value G.
    pub fn max_gray(&self) -> f32 {
        self.max_gray
    }

    pub fn header(&self) -> Option<&NiftiHeader> {
        self.header.as_ref()
    }

    pub fn slice_count(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    /// In-plane slices in z order, each indexed `[x, y]`.
    pub fn slices(&self) -> impl Iterator<Item = (usize, ArrayView2<'_, f32>)> + '_ {
        self.data.axis_iter(Axis(2)).enumerate()
    }

    pub fn slice(&self, k: usize) -> Option<ArrayView2<'_, f32>> {
        (k < self.slice_count()).then(|| self.data.index_axis(Axis(2), k))
    }

    /// World position of the voxel centre `(x, y, z)`.
    pub fn world(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let p = self.affine * nalgebra::Vector4::new(x, y, z, 1.0);
        [p[0], p[1], p[2]]
    }

    /// Replaces the geometry and voxels together; used by the orientation ops.
    pub(crate) fn rebuilt(&self, data: Array3<f32>, spacing: [f64; 3], affine: Matrix4<f64>) -> Volume {
        let max_gray = max_of(&data);
        Volume {
            data,
            spacing,
            affine,
            dtype: self.dtype,
            planar: self.planar,
            max_gray,
            header: self.header.clone(),
        }
    }

    pub fn map_voxels(&self, f: impl Fn(f32) -> f32) -> Volume {
        let data = self.data.mapv(f);
        self.rebuilt(data, self.spacing, self.affine)
    }
}

/// Iterates the slices of a volume in z order, each paired with its index.
pub fn iter_slices(vol: &Volume) -> impl Iterator<Item = (usize, ArrayView2<'_, f32>)> + '_ {
    vol.slices()
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn lower_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default()
}

/// Whether `path` names a NIfTI file this tool handles.
pub fn is_nifti_path(path: &Path) -> bool {
    let name = lower_name(path);
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let name = lower_name(path);
    if name.ends_with(".json") || name.ends_with(".bin") {
        return read_sidecar(path);
    }
    if !is_nifti_path(path) {
        return Err(VolumeError::UnsupportedFormat(path.display().to_string()));
    }
    let bytes = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    decode_nifti(&bytes)
}

/// Parses NIfTI bytes, transparently gunzipping.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| VolumeError::CorruptHeader(format!("gzip stream: {e}")))?;
        return parse_nifti(&raw);
    }
    parse_nifti(bytes)
}

fn parse_nifti(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeError::CorruptHeader(format!("file has {} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(VolumeError::CorruptHeader("big-endian files are not supported".into()));
        }
        return Err(VolumeError::CorruptHeader(format!("sizeof_hdr is {sizeof_hdr}")));
    }
    if &bytes[344..348] != MAGIC_SINGLE {
        return Err(VolumeError::CorruptHeader(format!("bad magic {:?}", &bytes[344..348])));
    }
    let mut header = NiftiHeader {
        raw: bytes[..HEADER_SIZE].to_vec(),
        extension: Vec::new(),
        affine_at_read: Matrix4::zeros(),
    };
    let ndim = header.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::CorruptHeader(format!("dim[0] is {ndim}")));
    }
    let ndim = ndim as usize;
    if ndim > 3 {
        return Err(VolumeError::UnsupportedDimension(ndim));
    }
    if ndim < 2 {
        return Err(VolumeError::UnsupportedDimension(ndim));
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate().take(ndim) {
        let v = header.i16_at(42 + 2 * i);
        if v < 1 {
            return Err(VolumeError::CorruptHeader(format!("dim[{}] is {v}", i + 1)));
        }
        *d = v as usize;
    }
    let dtype = DataType::from_nifti_code(header.i16_at(70))?;
    let vox_offset = header.f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(VolumeError::CorruptHeader(format!("vox_offset is {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let n = dims.iter().product::<usize>();
    let needed = vox_offset + n * dtype.size();
    if bytes.len() < needed {
        return Err(VolumeError::CorruptHeader(format!("file has {} bytes, voxel data needs {needed}", bytes.len())));
    }
    header.extension = bytes[HEADER_SIZE..vox_offset].to_vec();

    let mut pixdim = [1.0f64; 3];
    for (i, p) in pixdim.iter_mut().enumerate().take(ndim) {
        *p = header.f32_at(80 + 4 * i) as f64;
    }
    let spacing = pixdim.map(|p| if p > 0.0 && p.is_finite() { p } else { 1.0 });

    let affine = header_affine(&header, spacing);
    header.affine_at_read = affine;

    let payload = &bytes[vox_offset..needed];
    let size = dtype.size();
    // NIfTI stores x fastest
    let mut data = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
    let mut chunks = payload.chunks_exact(size);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                data[[x, y, z]] = dtype.decode(chunks.next().expect("length checked"));
            }
        }
    }
    check_geometry(&spacing, &affine).map_err(|e| VolumeError::CorruptHeader(e.to_string()))?;
    let max_gray = max_of(&data);
    Ok(Volume { data, spacing, affine, dtype, planar: ndim == 2, max_gray, header: Some(header) })
}

fn header_affine(h: &NiftiHeader, spacing: [f64; 3]) -> Matrix4<f64> {
    if h.sform_code() > 0 {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = h.f32_at(280 + 16 * r + 4 * c) as f64;
            }
        }
        return m;
    }
    if h.qform_code() > 0 {
        let qfac = if h.f32_at(76) < 0.0 { -1.0 } else { 1.0 };
        let q = [h.f32_at(256), h.f32_at(260), h.f32_at(264)].map(|v| v as f64);
        let off = [h.f32_at(268), h.f32_at(272), h.f32_at(276)].map(|v| v as f64);
        return quatern_to_affine(q, off, spacing, qfac);
    }
    Matrix4::from_diagonal(&nalgebra::Vector4::new(spacing[0], spacing[1], spacing[2], 1.0))
}

fn quatern_to_affine(q: [f64; 3], offset: [f64; 3], spacing: [f64; 3], qfac: f64) -> Matrix4<f64> {
    let [mut b, mut c, mut d] = q;
    let mut a = 1.0 - (b * b + c * c + d * d);
    if a < 1e-7 {
        let s = 1.0 / (b * b + c * c + d * d).sqrt();
        b *= s;
        c *= s;
        d *= s;
        a = 0.0;
    } else {
        a = a.sqrt();
    }
    let r = Matrix3::new(
        a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c),
        2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b),
        2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b,
    );
    let scale = [spacing[0], spacing[1], qfac * spacing[2]];
    let mut m = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = r[(i, j)] * scale[j];
        }
        m[(i, 3)] = offset[i];
    }
    m
}

/// Quaternion parameters `(b, c, d)`, offsets and qfac of the rotation part
/// of `affine`; columns are normalised, shear is discarded.
fn affine_to_quatern(affine: &Matrix4<f64>) -> ([f64; 3], [f64; 3], f64) {
    let mut r = affine.fixed_view::<3, 3>(0, 0).into_owned();
    for j in 0..3 {
        let n = r.column(j).norm();
        if n > 0.0 {
            r.column_mut(j).scale_mut(1.0 / n);
        }
    }
    let mut qfac = 1.0;
    if r.determinant() < 0.0 {
        qfac = -1.0;
        r.column_mut(2).scale_mut(-1.0);
    }
    let (r11, r12, r13) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
    let (r21, r22, r23) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
    let (r31, r32, r33) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let trace = r11 + r22 + r33 + 1.0;
    let (a, b, c, d) = if trace > 0.5 {
        let a = 0.5 * trace.sqrt();
        (a, 0.25 * (r32 - r23) / a, 0.25 * (r13 - r31) / a, 0.25 * (r21 - r12) / a)
    } else {
        let xd = 1.0 + r11 - (r22 + r33);
        let yd = 1.0 + r22 - (r11 + r33);
        let zd = 1.0 + r33 - (r11 + r22);
        if xd > 1.0 {
            let b = 0.5 * xd.sqrt();
            (0.25 * (r32 - r23) / b, b, 0.25 * (r12 + r21) / b, 0.25 * (r13 + r31) / b)
        } else if yd > 1.0 {
            let c = 0.5 * yd.sqrt();
            (0.25 * (r13 - r31) / c, 0.25 * (r12 + r21) / c, c, 0.25 * (r23 + r32) / c)
        } else {
            let d = 0.5 * zd.sqrt();
            (0.25 * (r21 - r12) / d, 0.25 * (r13 + r31) / d, 0.25 * (r23 + r32) / d, d)
        }
    };
    // keep a >= 0 so that a can be recovered from b, c, d
    let (b, c, d) = if a < 0.0 { (-b, -c, -d) } else { (b, c, d) };
    ([b, c, d], [affine[(0, 3)], affine[(1, 3)], affine[(2, 3)]], qfac)
}

/// Serialises a volume to uncompressed NIfTI-1 bytes.
pub fn encode_nifti(vol: &Volume) -> Vec<u8> {
    let mut header = vol.header.clone().unwrap_or_else(|| NiftiHeader::fresh(""));
    let (sx, sy, sz) = vol.dims();
    let ndim: i16 = if vol.planar && sz == 1 { 2 } else { 3 };
    header.set_i16(40, ndim);
    header.set_i16(42, sx as i16);
    header.set_i16(44, sy as i16);
    header.set_i16(46, if ndim == 2 { 1 } else { sz as i16 });
    header.set_i16(70, vol.dtype.nifti_code());
    header.set_i16(72, (vol.dtype.size() * 8) as i16);
    if header.extension.len() < 4 {
        header.extension = vec![0; 4];
    }
    header.set_f32(108, (HEADER_SIZE + header.extension.len()) as f32);

    let spacing_changed = (0..ndim as usize).any(|i| header.f32_at(80 + 4 * i) as f64 != vol.spacing[i]);
    let geometry_changed = header.affine_at_read != vol.affine;
    if spacing_changed || geometry_changed {
        for i in 0..ndim as usize {
            header.set_f32(80 + 4 * i, vol.spacing[i] as f32);
        }
    }
    if geometry_changed {
        for r in 0..3 {
            for c in 0..4 {
                header.set_f32(280 + 16 * r + 4 * c, vol.affine[(r, c)] as f32);
            }
        }
        if header.sform_code() <= 0 {
            header.set_i16(254, 2);
        }
        let (q, off, qfac) = affine_to_quatern(&vol.affine);
        for i in 0..3 {
            header.set_f32(256 + 4 * i, q[i] as f32);
            header.set_f32(268 + 4 * i, off[i] as f32);
        }
        header.set_f32(76, qfac as f32);
        if header.qform_code() <= 0 {
            header.set_i16(252, 2);
        }
    }

    let mut out = Vec::with_capacity(HEADER_SIZE + header.extension.len() + vol.data.len() * vol.dtype.size());
    out.extend_from_slice(&header.raw);
    out.extend_from_slice(&header.extension);
    for z in 0..sz {
        for y in 0..sy {
            for x in 0..sx {
                vol.dtype.encode(vol.data[[x, y, z]], &mut out);
            }
        }
    }
    out
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), VolumeError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| VolumeError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| VolumeError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| VolumeError::io(path, e))?;
    tmp.persist(path).map_err(|e| VolumeError::io(path, e.error))?;
    Ok(())
}

pub fn write_volume(vol: &Volume, path: &Path) -> Result<(), VolumeError> {
    let name = lower_name(path);
    if name.ends_with(".json") || name.ends_with(".bin") {
        return write_sidecar(vol, path);
    }
    if !is_nifti_path(path) {
        return Err(VolumeError::UnsupportedFormat(path.display().to_string()));
    }
    let mut bytes = encode_nifti(vol);
    if name.ends_with(".gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| VolumeError::io(path, e))?;
        bytes = enc.finish().map_err(|e| VolumeError::io(path, e))?;
    }
    write_atomic(path, &bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    spacing: Vec<f64>,
    affine: [[f64; 4]; 4],
    dtype: DataType,
}

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

fn read_sidecar(path: &Path) -> Result<Volume, VolumeError> {
    let (json_path, bin_path) = sidecar_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| VolumeError::io(&json_path, e))?;
    let meta: Sidecar = serde_json::from_str(&text)?;
    let planar = match meta.shape.len() {
        2 => true,
        3 => false,
        n => return Err(VolumeError::UnsupportedDimension(n)),
    };
    if meta.spacing.len() != meta.shape.len() {
        return Err(VolumeError::Invalid("spacing and shape lengths differ".into()));
    }
    let bytes = fs::read(&bin_path).map_err(|e| VolumeError::io(&bin_path, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * meta.dtype.size() {
        return Err(VolumeError::Invalid(format!("{} holds {} bytes, expected {}", bin_path.display(), bytes.len(), n * meta.dtype.size())));
    }
    let values: Vec<f32> = bytes.chunks_exact(meta.dtype.size()).map(|c| meta.dtype.decode(c)).collect();
    let sz = if planar { 1 } else { meta.shape[2] };
    let data = Array3::from_shape_vec((meta.shape[0], meta.shape[1], sz), values)
        .map_err(|e| VolumeError::Invalid(e.to_string()))?;
    let mut spacing = [1.0; 3];
    spacing[..meta.spacing.len()].copy_from_slice(&meta.spacing);
    let affine = Matrix4::from_fn(|r, c| meta.affine[r][c]);
    let mut vol = Volume::new(data, spacing, affine)?.with_dtype(meta.dtype);
    vol.planar = planar;
    Ok(vol)
}

fn write_sidecar(vol: &Volume, path: &Path) -> Result<(), VolumeError> {
    let (json_path, bin_path) = sidecar_paths(path);
    let (sx, sy, sz) = vol.dims();
    let (shape, spacing) = if vol.planar && sz == 1 {
        (vec![sx, sy], vol.spacing[..2].to_vec())
    } else {
        (vec![sx, sy, sz], vol.spacing.to_vec())
    };
    let meta = Sidecar {
        shape,
        spacing,
        affine: std::array::from_fn(|r| std::array::from_fn(|c| vol.affine[(r, c)])),
        dtype: vol.dtype,
    };
    let mut bytes = Vec::with_capacity(vol.data.len() * vol.dtype.size());
    // row-major over [x, y, z]
    for v in vol.data.iter() {
        vol.dtype.encode(*v, &mut bytes);
    }
    write_atomic(&bin_path, &bytes)?;
    write_atomic(&json_path, serde_json::to_string_pretty(&meta)?.as_bytes())
}
