//! Separable Gaussian smoothing with zero padding and boundary mass
//! renormalization.
//!
//! The raw operator `G` convolves each axis with a truncated Gaussian,
//! treating everything outside the volume as zero. Near faces that loses
//! mass, so the normalized operator divides by `n(x) = mx(x) my(y) mz(z)`,
//! the product of per-axis kernel mass that actually lands inside:
//!
//! ```text
//! S[f]   = G[f] / n          (local weighted average, exact on constants)
//! S^T[g] = G[g / n]          (adjoint, since zero-padded G is symmetric)
//! ```
//!
//! The adjoint is what gradient code needs: `d<S[f], g>/df = S^T[g]`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Truncated, normalized 1D Gaussian. The radius is `ceil(4 sigma)`, wide
/// enough that the discarded tails are negligible at f64 precision.
pub(crate) fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Domain(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let inv = -0.5 / (sigma * sigma);
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| ((i * i) as f64 * inv).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for w in &mut k {
        *w /= total;
    }
    Ok(k)
}

/// Precomputed smoothing plan for one grid shape and sigma.
pub struct Smoother {
    dims: [usize; 3],
    kernel: Vec<f64>,
    /// Per-voxel mass product `mx(x) my(y) mz(z)`, same layout as the volume.
    mass: Vec<f64>,
}

fn axis_mass(n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    (0..n as i64)
        .map(|i| {
            let mut m = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let j = i + t as i64 - r;
                if (0..n as i64).contains(&j) {
                    m += k;
                }
            }
            m
        })
        .collect()
}

impl Smoother {
    pub fn new(dims: [usize; 3], sigma: f64) -> Result<Self> {
        let kernel = gaussian_kernel(sigma)?;
        let mx = axis_mass(dims[0], &kernel);
        let my = axis_mass(dims[1], &kernel);
        let mz = axis_mass(dims[2], &kernel);
        let mut mass = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let myz = my[y] * mz[z];
                for x in 0..dims[0] {
                    mass.push(mx[x] * myz);
                }
            }
        }
        Ok(Self { dims, kernel, mass })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn check_len(&self, f: &[f64]) -> Result<()> {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        if f.len() != n {
            return Err(Error::GridMismatch(format!(
                "smoother built for {n} voxels, input has {}",
                f.len()
            )));
        }
        Ok(())
    }

    /// Raw zero-padded separable convolution `G[f]`.
    pub(crate) fn convolve(&self, f: &[f64]) -> Vec<f64> {
        let a = conv_x(f, self.dims, &self.kernel);
        let b = conv_y(&a, self.dims, &self.kernel);
        conv_z(&b, self.dims, &self.kernel)
    }

    /// Normalized smoothing `S[f] = G[f] / n`. Reproduces constants to
    /// within rounding even at faces and corners.
    pub fn smooth(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f)?;
        let mut out = self.convolve(f);
        out.par_iter_mut()
            .zip(self.mass.par_iter())
            .for_each(|(v, &m)| *v /= m);
        Ok(out)
    }

    /// Adjoint of `smooth`: `S^T[g] = G[g / n]`.
    pub fn adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_len(g)?;
        let scaled: Vec<f64> = g
            .par_iter()
            .zip(self.mass.par_iter())
            .map(|(&v, &m)| v / m)
            .collect();
        Ok(self.convolve(&scaled))
    }
}

/// Convolve along x. Rows are contiguous, so each tap is a shifted
/// slice accumulation that the optimizer can vectorize.
fn conv_x(f: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let r = (kernel.len() / 2) as i64;
    let plane = nx * ny;
    let mut out = vec![0.0; f.len()];
    out.par_chunks_mut(plane)
        .zip(f.par_chunks(plane))
        .for_each(|(out_plane, in_plane)| {
            debug_assert_eq!(out_plane.len(), plane);
            for y in 0..ny {
                let row = &in_plane[y * nx..(y + 1) * nx];
                let out_row = &mut out_plane[y * nx..(y + 1) * nx];
                for (t, &k) in kernel.iter().enumerate() {
                    let d = t as i64 - r;
                    let x0 = (-d).max(0) as usize;
                    let x1 = ((nx as i64 - d).min(nx as i64)).max(0) as usize;
                    for x in x0..x1 {
                        out_row[x] += k * row[(x as i64 + d) as usize];
                    }
                }
            }
        });
    let _ = nz;
    out
}

/// Convolve along y: per z-plane, each tap adds a whole shifted row block.
fn conv_y(f: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, _nz] = dims;
    let r = (kernel.len() / 2) as i64;
    let plane = nx * ny;
    let mut out = vec![0.0; f.len()];
    out.par_chunks_mut(plane)
        .zip(f.par_chunks(plane))
        .for_each(|(out_plane, in_plane)| {
            for (t, &k) in kernel.iter().enumerate() {
                let d = t as i64 - r;
                let y0 = (-d).max(0) as usize;
                let y1 = ((ny as i64 - d).min(ny as i64)).max(0) as usize;
                if y0 >= y1 {
                    continue;
                }
                let src = &in_plane[((y0 as i64 + d) as usize) * nx..((y1 as i64 + d) as usize) * nx];
                let dst = &mut out_plane[y0 * nx..y1 * nx];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += k * s;
                }
            }
        });
    out
}

/// Convolve along z: each output plane is a weighted sum of input planes.
fn conv_z(f: &[f64], dims: [usize; 3], kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let r = (kernel.len() / 2) as i64;
    let plane = nx * ny;
    let mut out = vec![0.0; f.len()];
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(z, out_plane)| {
            for (t, &k) in kernel.iter().enumerate() {
                let zj = z as i64 + t as i64 - r;
                if !(0..nz as i64).contains(&zj) {
                    continue;
                }
                let src = &f[zj as usize * plane..(zj as usize + 1) * plane];
                for (o, &s) in out_plane.iter_mut().zip(src) {
                    *o += k * s;
                }
            }
        });
    out
}
