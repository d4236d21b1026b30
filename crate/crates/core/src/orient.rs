//! The eight axis-aligned in-plane orientation operations (the dihedral group
//! of order 8) and their action on index grids, voxel arrays and affines.
//!
//! A code is three bits `b2 b1 b0`. Applying a code to an image means: flip
//! along x if `b0`, then flip along y if `b1`, then swap the x and y axes if
//! `b2`. With 0-based indices this gives, for a source of size `sx × sy`:
//!
//! | code | target\[x,y\] =            |
//! |------|----------------------------|
//! | 000  | source\[x, y\]             |
//! | 001  | source\[sx-1-x, y\]        |
//! | 010  | source\[x, sy-1-y\]        |
//! | 011  | source\[sx-1-x, sy-1-y\]   |
//! | 100  | source\[y, x\]             |
//! | 101  | source\[sx-1-y, x\]        |
//! | 110  | source\[y, sy-1-x\]        |
//! | 111  | source\[sx-1-y, sy-1-x\]   |
//!
//! Voxel arrays are indexed `[x, y]` (or `[x, y, z]`). Plain 2D grids passed to
//! [`apply_to_grid`] are in display order instead: the first row is the top
//! of the picture, which is the largest `y`.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix4;
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum OrientError {
    #[error("invalid orientation code {0:?}: expected three binary digits")]
    InvalidCode(String),
    #[error("image sizes must be positive, got {sx}x{sy}")]
    EmptySize { sx: usize, sy: usize },
    #[error("grid is empty")]
    EmptyGrid,
    #[error("affine is singular")]
    SingularAffine,
    #[error("volume needs two in-plane dimensions")]
    NotPlanar,
}

/// One of the eight orientation classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct OrientCode(u8);

impl OrientCode {
    pub const IDENTITY: OrientCode = OrientCode(0);
    pub const COUNT: usize = 8;

    pub fn from_bits(bits: u8) -> Result<Self, OrientError> {
        if bits < 8 {
            Ok(OrientCode(bits))
        } else {
            Err(OrientError::InvalidCode(format!("{bits}")))
        }
    }

    /// Code at position `index` of the class order (000 … 111).
    pub fn from_index(index: usize) -> Option<Self> {
        (index < 8).then(|| OrientCode(index as u8))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn flips_x(self) -> bool {
        self.0 & 0b001 != 0
    }

    pub fn flips_y(self) -> bool {
        self.0 & 0b010 != 0
    }

    pub fn transposes(self) -> bool {
        self.0 & 0b100 != 0
    }

    pub fn is_identity(self) -> bool {
        self.0 == 0
    }

    /// Human readable name of the operation.
    pub fn describe(self) -> &'static str {
        match self.0 {
            0 => "initial state",
            1 => "horizontal flip",
            2 => "vertical flip",
            3 => "rotate 180 clockwise",
            4 => "flip along the upper left-lower right corner",
            5 => "rotate 90 clockwise",
            6 => "rotate 270 clockwise",
            _ => "flip along the bottom left-top right corner",
        }
    }

    /// Signed permutation taking centered target coordinates to centered
    /// source coordinates.
    fn centered_matrix(self) -> [[i8; 2]; 2] {
        let sx = if self.flips_x() { -1 } else { 1 };
        let sy = if self.flips_y() { -1 } else { 1 };
        if self.transposes() {
            [[0, sx], [sy, 0]]
        } else {
            [[sx, 0], [0, sy]]
        }
    }

    fn from_centered_matrix(m: [[i8; 2]; 2]) -> Self {
        all_codes()
            .into_iter()
            .find(|c| c.centered_matrix() == m)
            .expect("signed 2x2 permutations are closed under product")
    }
}

impl fmt::Display for OrientCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03b}", self.0)
    }
}

impl FromStr for OrientCode {
    type Err = OrientError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.len() != 3 || !t.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(OrientError::InvalidCode(s.to_string()));
        }
        Ok(OrientCode(u8::from_str_radix(t, 2).expect("checked binary digits")))
    }
}

impl Serialize for OrientCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OrientCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All eight codes in class order.
pub fn all_codes() -> [OrientCode; 8] {
    std::array::from_fn(|i| OrientCode(i as u8))
}

/// Code equivalent to applying `b` first and then `a`.
pub fn compose(a: OrientCode, b: OrientCode) -> OrientCode {
    // source = M_b · (M_a · target)
    let ma = a.centered_matrix();
    let mb = b.centered_matrix();
    let mut m = [[0i8; 2]; 2];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = mb[i][0] * ma[0][j] + mb[i][1] * ma[1][j];
        }
    }
    OrientCode::from_centered_matrix(m)
}

pub fn invert(code: OrientCode) -> OrientCode {
    // signed permutation matrices are orthogonal: the inverse is the transpose
    let m = code.centered_matrix();
    OrientCode::from_centered_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
}

/// Smallest `n ≥ 1` with `code^n` equal to the identity.
pub fn order(code: OrientCode) -> usize {
    let mut acc = code;
    let mut n = 1;
    while !acc.is_identity() {
        acc = compose(code, acc);
        n += 1;
    }
    n
}

/// Affine map from target voxel indices to source voxel indices:
/// `source = matrix · target + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexMap {
    pub matrix: [[i64; 2]; 2],
    pub offset: [i64; 2],
    /// Size of the source lattice.
    pub source_dims: [usize; 2],
    /// Size of the target lattice.
    pub target_dims: [usize; 2],
}

impl IndexMap {
    pub fn source_of(&self, x: usize, y: usize) -> [usize; 2] {
        let (x, y) = (x as i64, y as i64);
        let sx = self.matrix[0][0] * x + self.matrix[0][1] * y + self.offset[0];
        let sy = self.matrix[1][0] * x + self.matrix[1][1] * y + self.offset[1];
        debug_assert!(sx >= 0 && sy >= 0);
        [sx as usize, sy as usize]
    }

    /// Homogeneous 4×4 form acting on `(x, y, z, 1)`; z passes through.
    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let m = &self.matrix;
        Matrix4::new(
            m[0][0] as f64, m[0][1] as f64, 0.0, self.offset[0] as f64,
            m[1][0] as f64, m[1][1] as f64, 0.0, self.offset[1] as f64,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// The map going the other way (target indices of a source voxel).
    pub fn inverse(&self) -> IndexMap {
        let m = self.matrix;
        let mt = [[m[0][0], m[1][0]], [m[0][1], m[1][1]]];
        let o = self.offset;
        let off = [
            -(mt[0][0] * o[0] + mt[0][1] * o[1]),
            -(mt[1][0] * o[0] + mt[1][1] * o[1]),
        ];
        IndexMap {
            matrix: mt,
            offset: off,
            source_dims: self.target_dims,
            target_dims: self.source_dims,
        }
    }
}

pub fn index_map(code: OrientCode, sx: usize, sy: usize) -> Result<IndexMap, OrientError> {
    if sx == 0 || sy == 0 {
        return Err(OrientError::EmptySize { sx, sy });
    }
    // (u, v) are coordinates in the flipped (not yet transposed) image.
    let (mut matrix, target_dims) = if code.transposes() {
        ([[0, 1], [1, 0]], [sy, sx])
    } else {
        ([[1, 0], [0, 1]], [sx, sy])
    };
    let mut offset = [0, 0];
    if code.flips_x() {
        matrix[0] = [-matrix[0][0], -matrix[0][1]];
        offset[0] = sx as i64 - 1;
    }
    if code.flips_y() {
        matrix[1] = [-matrix[1][0], -matrix[1][1]];
        offset[1] = sy as i64 - 1;
    }
    Ok(IndexMap { matrix, offset, source_dims: [sx, sy], target_dims })
}

/// Applies `code` to an array indexed `[x, y]`.
pub fn apply_to_plane<T: Clone>(code: OrientCode, plane: ArrayView2<'_, T>) -> Array2<T> {
    let (sx, sy) = plane.dim();
    if sx == 0 || sy == 0 {
        return plane.to_owned();
    }
    let map = index_map(code, sx, sy).expect("non-empty plane");
    let [tx, ty] = map.target_dims;
    Array2::from_shape_fn((tx, ty), |(x, y)| {
        let [u, v] = map.source_of(x, y);
        plane[[u, v]].clone()
    })
}

/// Applies `code` to a grid given in display order (rows top to bottom).
pub fn apply_to_grid<T: Clone>(code: OrientCode, grid: &Array2<T>) -> Result<Array2<T>, OrientError> {
    if grid.is_empty() {
        return Err(OrientError::EmptyGrid);
    }
    let plane = grid.t();
    let plane = plane.slice(s![.., ..;-1]);
    let out = apply_to_plane(code, plane);
    Ok(out.slice(s![.., ..;-1]).t().to_owned())
}

/// Applies `code` to every z-slice of an `[x, y, z]` array.
pub fn apply_to_array3<T: Clone>(code: OrientCode, data: &Array3<T>) -> Array3<T> {
    let (sx, sy, sz) = data.dim();
    if sx == 0 || sy == 0 {
        return data.clone();
    }
    let map = index_map(code, sx, sy).expect("non-empty volume");
    let [tx, ty] = map.target_dims;
    let mut out = Vec::with_capacity(tx * ty * sz);
    for x in 0..tx {
        for y in 0..ty {
            let [u, v] = map.source_of(x, y);
            out.extend(data.slice(s![u, v, ..]).iter().cloned());
        }
    }
    let out = Array3::from_shape_vec((tx, ty, sz), out).expect("shape matches length");
    debug_assert_eq!(out.len_of(Axis(2)), sz);
    out
}

/// New voxel→world affine after applying `code` to a volume of in-plane
/// size `sx × sy`, chosen so that every voxel keeps its world position.
pub fn update_affine(
    code: OrientCode,
    affine: &Matrix4<f64>,
    sx: usize,
    sy: usize,
) -> Result<Matrix4<f64>, OrientError> {
    let det = affine.fixed_view::<3, 3>(0, 0).determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(OrientError::SingularAffine);
    }
    let map = index_map(code, sx, sy)?;
    Ok(affine * map.to_matrix4())
}

/// Applies `code` to every slice of `vol` and rewrites its affine and
/// spacing so that world positions are unchanged.
pub fn apply_to_volume(code: OrientCode, vol: &Volume) -> Result<Volume, OrientError> {
    let (sx, sy, _) = vol.dims();
    if sx == 0 || sy == 0 {
        return Err(OrientError::NotPlanar);
    }
    if code.is_identity() {
        return Ok(vol.clone());
    }
    let data = apply_to_array3(code, vol.data());
    let affine = update_affine(code, vol.affine(), sx, sy)?;
    let [dx, dy, dz] = vol.spacing();
    let spacing = if code.transposes() { [dy, dx, dz] } else { [dx, dy, dz] };
    Ok(vol.rebuilt(data, spacing, affine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn c(s: &str) -> OrientCode {
        s.parse().unwrap()
    }

    #[test]
    fn all_codes_in_table_order() {
        let names: Vec<String> = all_codes().iter().map(|c| c.to_string()).collect();
        assert_eq!(names, ["000", "001", "010", "011", "100", "101", "110", "111"]);
        let mut dedup = names.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 8);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!("12".parse::<OrientCode>().is_err());
        assert!("102".parse::<OrientCode>().is_err());
        assert!("1011".parse::<OrientCode>().is_err());
        assert!(OrientCode::from_bits(8).is_err());
        assert_eq!(c("101").bits(), 5);
    }

    #[test]
    fn serde_uses_bit_strings() {
        let json = serde_json::to_string(&c("110")).unwrap();
        assert_eq!(json, "\"110\"");
        let back: OrientCode = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c("110"));
        assert!(serde_json::from_str::<OrientCode>("\"9\"").is_err());
    }

    #[test]
    fn index_map_matches_table_rows() {
        let (sx, sy) = (5, 7);
        let m = index_map(c("001"), sx, sy).unwrap();
        assert_eq!(m.source_of(0, 3), [sx - 1, 3]);
        assert_eq!(m.source_of(2, 6), [sx - 1 - 2, 6]);

        let id = index_map(c("000"), sx, sy).unwrap();
        for x in 0..sx {
            for y in 0..sy {
                assert_eq!(id.source_of(x, y), [x, y]);
            }
        }

        let m = index_map(c("101"), sx, sy).unwrap();
        assert_eq!(m.target_dims, [sy, sx]);
        for x in 0..sy {
            for y in 0..sx {
                assert_eq!(m.source_of(x, y), [sx - 1 - y, x]);
            }
        }
        let m = index_map(c("110"), sx, sy).unwrap();
        for x in 0..sy {
            for y in 0..sx {
                assert_eq!(m.source_of(x, y), [y, sy - 1 - x]);
            }
        }
        let m = index_map(c("111"), sx, sy).unwrap();
        for x in 0..sy {
            for y in 0..sx {
                assert_eq!(m.source_of(x, y), [sx - 1 - y, sy - 1 - x]);
            }
        }
        assert_eq!(index_map(c("010"), 0, 3), Err(OrientError::EmptySize { sx: 0, sy: 3 }));
    }

    #[test]
    fn index_map_inverse_roundtrips() {
        for code in all_codes() {
            let m = index_map(code, 4, 3).unwrap();
            let inv = m.inverse();
            for x in 0..m.target_dims[0] {
                for y in 0..m.target_dims[1] {
                    let [u, v] = m.source_of(x, y);
                    assert_eq!(inv.source_of(u, v), [x, y]);
                }
            }
        }
    }

    #[test]
    fn grid_fixtures() {
        let g = array![[1, 2], [3, 4]];
        assert_eq!(apply_to_grid(c("001"), &g).unwrap(), array![[2, 1], [4, 3]]);
        assert_eq!(apply_to_grid(c("010"), &g).unwrap(), array![[3, 4], [1, 2]]);
        assert_eq!(apply_to_grid(c("011"), &g).unwrap(), array![[4, 3], [2, 1]]);
        assert_eq!(apply_to_grid(c("101"), &g).unwrap(), array![[3, 1], [4, 2]]);
        assert_eq!(apply_to_grid(c("110"), &g).unwrap(), array![[2, 4], [1, 3]]);
        assert_eq!(apply_to_grid(c("000"), &g).unwrap(), g);
        let empty: Array2<i32> = Array2::zeros((0, 3));
        assert_eq!(apply_to_grid(c("001"), &empty), Err(OrientError::EmptyGrid));
    }

    #[test]
    fn transposing_codes_swap_dims() {
        let g = Array2::from_shape_fn((3, 4), |(r, c)| r * 4 + c);
        for code in all_codes() {
            let out = apply_to_grid(code, &g).unwrap();
            let expected = if code.transposes() { (4, 3) } else { (3, 4) };
            assert_eq!(out.dim(), expected, "{code}");
        }
    }

    #[test]
    fn group_examples() {
        assert_eq!(compose(c("001"), c("001")), c("000"));
        assert_eq!(compose(c("101"), c("101")), c("011"));
        assert_eq!(compose(c("100"), c("001")), c("101"));
        assert_eq!(invert(c("000")), c("000"));
        assert_eq!(invert(c("101")), c("110"));
        assert_eq!(invert(c("011")), c("011"));
        for code in all_codes() {
            let expected = match code.bits() {
                0 => 1,
                5 | 6 => 4,
                _ => 2,
            };
            assert_eq!(order(code), expected, "{code}");
        }
    }

    #[test]
    fn update_affine_identity_and_singular() {
        let a = Matrix4::new(
            1.5, 0.1, 0.0, -10.0, 0.0, 1.2, 0.3, 4.0, 0.0, 0.0, 2.0, 7.0, 0.0, 0.0, 0.0, 1.0,
        );
        assert_eq!(update_affine(c("000"), &a, 4, 5).unwrap(), a);
        let mut s = a;
        s[(2, 2)] = 0.0;
        s[(1, 2)] = 0.0;
        assert_eq!(update_affine(c("001"), &s, 4, 5), Err(OrientError::SingularAffine));
    }
}
