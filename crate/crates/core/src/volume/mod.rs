//! Voxel grids, world geometry, NIfTI-1 I/O, label warping and slice rendering.
//!
//! All grids handed out by this module are in canonical RAS orientation
//! (+x Right, +y Anterior, +z Superior). Data is stored x-fastest, then y,
//! then z, which is also the NIfTI on-disk order.

mod nifti;
mod orient;
mod render;
mod warp;

pub use nifti::{
    load_displacement_field, load_nifti, save_displacement_field, save_nifti, Datatype, NiftiImage,
    VoxelData,
};
pub use orient::reorient_to_ras;
pub use render::{brats_palette, midline_palette, render_axial_slice, Overlay, Rgba};
pub use warp::{apply_displacement_field, resample_nearest};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad NIfTI magic {0:?}; expected \"n+1\"")]
    BadMagic([u8; 4]),
    #[error("invalid NIfTI header: {0}")]
    BadHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("payload holds {actual} bytes but dims require {expected}")]
    PayloadMismatch { expected: usize, actual: usize },
    #[error("affine is singular")]
    SingularAffine,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("slice index {z} out of range (0..{nz})")]
    SliceOutOfRange { z: usize, nz: usize },
    #[error("invalid window: lo {lo} must be below hi {hi}")]
    BadWindow { lo: f64, hi: f64 },
    #[error("label conversion failed: {0}")]
    BadLabels(String),
    #[error("non-finite displacement vector at voxel {0}")]
    NonFiniteField(usize),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Voxel-to-world transform in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub Matrix4<f64>);

impl Affine {
    pub fn identity() -> Self {
        Affine(Matrix4::identity())
    }

    /// Axis-aligned transform with the given spacing and origin (world
    /// position of voxel (0,0,0)).
    pub fn from_spacing_origin(spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = spacing[a];
            m[(a, 3)] = origin[a];
        }
        Affine(m)
    }

    pub fn from_rows(rows: [[f64; 4]; 3]) -> Self {
        let mut m = Matrix4::identity();
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        Affine(m)
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Column norms of the linear block.
    pub fn spacing(&self) -> [f64; 3] {
        let l = self.linear();
        [l.column(0).norm(), l.column(1).norm(), l.column(2).norm()]
    }

    pub fn is_invertible(&self) -> bool {
        self.linear().determinant().abs() > 1e-12
    }

    pub fn voxel_to_world(&self, ijk: [f64; 3]) -> [f64; 3] {
        let p = self.0 * Vector4::new(ijk[0], ijk[1], ijk[2], 1.0);
        [p.x, p.y, p.z]
    }

    /// Continuous voxel index of a world point.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let lin = self.linear();
        let inv = lin.try_inverse().filter(|_| self.is_invertible());
        let inv = inv.ok_or(VolumeError::SingularAffine)?;
        let t = Vector3::new(self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)]);
        let v = inv * (Vector3::new(p[0], p[1], p[2]) - t);
        Ok([v.x, v.y, v.z])
    }

    pub fn approx_eq(&self, other: &Affine, tol: f64) -> bool {
        (self.0 - other.0).iter().all(|d| d.abs() <= tol)
    }
}

/// Free-function form of [`Affine::world_to_voxel`].
pub fn world_to_voxel(affine: &Affine, p: [f64; 3]) -> Result<[f64; 3]> {
    affine.world_to_voxel(p)
}

/// Free-function form of [`Affine::voxel_to_world`].
pub fn voxel_to_world(affine: &Affine, ijk: [f64; 3]) -> [f64; 3] {
    affine.voxel_to_world(ijk)
}

/// Dimensions plus geometry of a voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub affine: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], affine: Affine) -> Self {
        Grid { dims, affine }
    }

    /// Axis-aligned grid with the given spacing, origin at zero.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Grid::new(dims, Affine::from_spacing_origin(spacing, [0.0; 3]))
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.affine.spacing()
    }

    /// Volume of one voxel in millilitres.
    pub fn voxel_ml(&self) -> f64 {
        let s = self.spacing();
        s[0] * s[1] * s[2] / 1000.0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn contains(&self, i: i64, j: i64, k: i64) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.dims[0]
            && (j as usize) < self.dims[1]
            && (k as usize) < self.dims[2]
    }

    pub fn world(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(idx);
        self.affine.voxel_to_world([i as f64, j as f64, k as f64])
    }

    /// Same dimensions and affine within `tol` mm.
    pub fn matches(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims && self.affine.approx_eq(&other.affine, tol)
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other, 1e-3) {
            Ok(())
        } else {
            Err(VolumeError::GridMismatch(format!(
                "{what}: dims {:?} vs {:?} or affines differ",
                self.dims, other.dims
            )))
        }
    }
}

/// A voxel grid with one value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    data: Vec<T>,
}

/// Integer label map; 0 is background.
pub type LabelVolume = Volume<u32>;
/// Binary mask.
pub type Mask = Volume<bool>;
/// Scalar intensity image.
pub type IntensityVolume = Volume<f32>;

impl<T> Volume<T> {
    pub fn from_vec(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(VolumeError::GridMismatch(format!(
                "data length {} != voxel count {}",
                data.len(),
                grid.len()
            )));
        }
        if !grid.affine.is_invertible() {
            return Err(VolumeError::SingularAffine);
        }
        Ok(Volume { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing()
    }

    pub fn affine(&self) -> &Affine {
        &self.grid.affine
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> &T {
        &self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Volume<U> {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Volume<T> {
    pub fn filled(grid: Grid, value: T) -> Self {
        assert!(grid.affine.is_invertible(), "grid affine must be invertible");
        Volume {
            data: vec![value; grid.len()],
            grid,
        }
    }
}

impl Volume<u32> {
    /// Binary mask of voxels whose label satisfies `pred`.
    pub fn mask_where(&self, pred: impl Fn(u32) -> bool) -> Mask {
        self.map(|&l| pred(l))
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Distinct non-zero labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        let mut set: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

impl Volume<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn volume_ml(&self) -> f64 {
        self.count_true() as f64 * self.grid.voxel_ml()
    }

    pub fn to_labels(&self, label: u32) -> LabelVolume {
        self.map(|&b| if b { label } else { 0 })
    }
}

/// Dense atlas-to-subject displacement field; vectors are in world mm.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(grid: Grid, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != grid.len() {
            return Err(VolumeError::GridMismatch(format!(
                "field has {} vectors for {} voxels",
                vectors.len(),
                grid.len()
            )));
        }
        if let Some(bad) = vectors
            .iter()
            .position(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(VolumeError::NonFiniteField(bad));
        }
        Ok(DisplacementField { grid, vectors })
    }

    pub fn zeros(grid: Grid) -> Self {
        DisplacementField {
            vectors: vec![[0.0; 3]; grid.len()],
            grid,
        }
    }

    pub fn constant(grid: Grid, v: [f64; 3]) -> Self {
        DisplacementField {
            vectors: vec![v; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_maps_origin_to_origin() {
        let a = Affine::identity();
        assert_eq!(a.world_to_voxel([0.0, 0.0, 0.0]).unwrap(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_scaling() {
        let a = Affine::from_spacing_origin([2.0; 3], [0.0; 3]);
        let v = a.world_to_voxel([4.0, 4.0, 4.0]).unwrap();
        for c in v {
            assert!((c - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_affine_is_rejected() {
        let a = Affine::from_rows([[1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        assert!(matches!(
            a.world_to_voxel([1.0, 1.0, 1.0]),
            Err(VolumeError::SingularAffine)
        ));
    }

    #[test]
    fn grid_index_roundtrip() {
        let g = Grid::with_spacing([3, 4, 5], [1.0; 3]);
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    fn affine_strategy() -> impl Strategy<Value = Affine> {
        (prop::array::uniform12(-3.0f64..3.0), prop::array::uniform3(0.5f64..3.0)).prop_filter_map(
            "needs well-conditioned linear part",
            |(vals, diag)| {
                let mut rows = [[0.0; 4]; 3];
                for r in 0..3 {
                    for c in 0..4 {
                        rows[r][c] = vals[r * 4 + c] * if c == 3 { 30.0 } else { 0.3 };
                    }
                    rows[r][r] += diag[r];
                }
                let a = Affine::from_rows(rows);
                (a.linear().determinant().abs() > 0.1).then_some(a)
            },
        )
    }

    proptest! {
        #[test]
        fn world_voxel_roundtrip(a in affine_strategy(), p in prop::array::uniform3(-100.0f64..100.0)) {
            let v = a.world_to_voxel(p).unwrap();
            let back = a.voxel_to_world(v);
            for c in 0..3 {
                prop_assert!((back[c] - p[c]).abs() < 1e-6);
            }
            let w = a.voxel_to_world(p);
            let v2 = a.world_to_voxel(w).unwrap();
            for c in 0..3 {
                prop_assert!((v2[c] - p[c]).abs() < 1e-6);
            }
        }
    }
}
