use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on voxel counts so corrupt headers cannot trigger huge
/// allocations before we notice.
pub const MAX_VOXELS: usize = 1 << 31;

/// Regular, axis-aligned 3D sampling grid.
///
/// `dims` are voxel counts per axis (x, y, z), `spacing` the voxel edge
/// lengths in millimetres, `origin` the world position of the centre of voxel
/// (0, 0, 0). Arrays attached to a grid are stored x-fastest:
/// `linear = x + dims[0] * (y + dims[1] * z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        for (axis, &d) in dims.iter().enumerate() {
            if d < 2 {
                return Err(Error::Domain(format!(
                    "grid dim[{axis}] = {d}, need at least 2 voxels per axis"
                )));
            }
        }
        let total: u128 = dims.iter().map(|&d| d as u128).product();
        if total > MAX_VOXELS as u128 {
            return Err(Error::Domain(format!("grid of {total} voxels exceeds supported size")));
        }
        for (axis, &s) in spacing.iter().enumerate() {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Domain(format!("grid spacing[{axis}] = {s}, must be finite and positive")));
            }
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Domain("grid origin must be finite".into()));
        }
        Ok(Grid3 { dims, spacing, origin })
    }

    /// Isotropic grid with the given spacing and origin at zero.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Grid3::new(dims, [spacing; 3], [0.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // dims >= 2 per axis by construction
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Grid3::index`].
    #[inline]
    pub fn coords(&self, linear: usize) -> (usize, usize, usize) {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        (x, rest % self.dims[1], rest / self.dims[1])
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// World position of a (possibly fractional) voxel coordinate.
    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + p[0] * self.spacing[0],
            self.origin[1] + p[1] * self.spacing[1],
            self.origin[2] + p[2] * self.spacing[2],
        ]
    }

    /// Voxel coordinate of a world position.
    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        [
            (w[0] - self.origin[0]) / self.spacing[0],
            (w[1] - self.origin[1]) / self.spacing[1],
            (w[2] - self.origin[2]) / self.spacing[2],
        ]
    }
}

/// Check two grids have identical geometry, with a readable error naming the caller.
pub(crate) fn require_same_grid(a: &Grid3, b: &Grid3, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{what}: {:?} vs {:?}",
            (a.dims, a.spacing, a.origin),
            (b.dims, b.spacing, b.origin)
        )));
    }
    Ok(())
}
