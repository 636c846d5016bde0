use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;

/// CT numbers are clamped to this range on construction and load.
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensityUnits {
    Hu,
    Dimensionless,
}

/// Scalar intensity volume on a [`Grid3`], stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    pub grid: Grid3,
    pub data: Vec<f64>,
    pub units: IntensityUnits,
}

impl Volume3 {
    /// Build a volume, enforcing finite data and (for HU) the CT number range.
    pub fn new(grid: Grid3, mut data: Vec<f64>, units: IntensityUnits) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Domain(format!(
                "volume data length {} does not match grid ({} voxels)",
                data.len(),
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite intensity at voxel {i}")));
        }
        if units == IntensityUnits::Hu {
            for v in &mut data {
                *v = v.clamp(HU_MIN, HU_MAX);
            }
        }
        Ok(Volume3 { grid, data, units })
    }

    pub fn constant(grid: Grid3, value: f64, units: IntensityUnits) -> Result<Self> {
        let n = grid.len();
        Volume3::new(grid, vec![value; n], units)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }
}

/// Integer label volume. 0 is background; labels fit in i32 so masks can be
/// written to NIfTI int32 without loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub grid: Grid3,
    pub labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(grid: Grid3, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Domain(format!(
                "mask data length {} does not match grid ({} voxels)",
                labels.len(),
                grid.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > i32::MAX as u32) {
            return Err(Error::Domain(format!("label {bad} exceeds supported range (< 2^31)")));
        }
        Ok(LabelMask { grid, labels })
    }

    pub fn zeros(grid: Grid3) -> Self {
        let n = grid.len();
        LabelMask { grid, labels: vec![0; n] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.grid.index(x, y, z)]
    }

    /// Number of voxels carrying the given label.
    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Number of non-background voxels.
    pub fn count_nonzero(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Block-mean downsampling by an integer factor.
///
/// Output voxel `i` averages source voxels `[i*factor, min((i+1)*factor, n))`
/// per axis; partial blocks at the upper borders average over the voxels
/// present. Output dims are `ceil(n / factor)`, spacing is multiplied by the
/// factor, and the origin is kept so voxel indices scale by `factor` between
/// the two grids (the convention `upsample_field` inverts).
pub fn downsample(vol: &Volume3, factor: usize) -> Result<Volume3> {
    if factor < 2 {
        return Err(Error::Domain(format!("downsample factor {factor}, need >= 2")));
    }
    let [nx, ny, nz] = vol.grid.dims;
    for (axis, &n) in vol.grid.dims.iter().enumerate() {
        if n < 2 * factor {
            return Err(Error::Domain(format!(
                "dim[{axis}] = {n} too small to downsample by {factor} (need >= {})",
                2 * factor
            )));
        }
    }
    let odims = [nx.div_ceil(factor), ny.div_ceil(factor), nz.div_ceil(factor)];
    let ospacing = [
        vol.grid.spacing[0] * factor as f64,
        vol.grid.spacing[1] * factor as f64,
        vol.grid.spacing[2] * factor as f64,
    ];
    let ogrid = Grid3::new(odims, ospacing, vol.grid.origin)?;

    let mut out = vec![0.0; ogrid.len()];
    for oz in 0..odims[2] {
        let z1 = (oz * factor + factor).min(nz);
        for oy in 0..odims[1] {
            let y1 = (oy * factor + factor).min(ny);
            for ox in 0..odims[0] {
                let x1 = (ox * factor + factor).min(nx);
                let mut sum = 0.0;
                let mut count = 0usize;
                for z in oz * factor..z1 {
                    for y in oy * factor..y1 {
                        let row = vol.grid.index(0, y, z);
                        for x in ox * factor..x1 {
                            sum += vol.data[row + x];
                            count += 1;
                        }
                    }
                }
                out[ogrid.index(ox, oy, oz)] = sum / count as f64;
            }
        }
    }
    Volume3::new(ogrid, out, vol.units)
}

/// Resample a label mask onto another grid by nearest source voxel centre in
/// world coordinates. Targets outside the source extent become background.
pub fn resample_nearest(mask: &LabelMask, target: &Grid3) -> LabelMask {
    let src = &mask.grid;
    let [nx, ny, nz] = src.dims;
    let mut labels = vec![0u32; target.len()];
    let mut idx = 0;
    for z in 0..target.dims[2] {
        for y in 0..target.dims[1] {
            for x in 0..target.dims[0] {
                let w = target.voxel_to_world([x as f64, y as f64, z as f64]);
                let p = src.world_to_voxel(w);
                let sx = p[0].round();
                let sy = p[1].round();
                let sz = p[2].round();
                if sx >= 0.0
                    && sy >= 0.0
                    && sz >= 0.0
                    && sx < nx as f64
                    && sy < ny as f64
                    && sz < nz as f64
                {
                    labels[idx] = mask.labels[src.index(sx as usize, sy as usize, sz as usize)];
                }
                idx += 1;
            }
        }
    }
    LabelMask { grid: target.clone(), labels }
}
