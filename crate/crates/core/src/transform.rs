//! Dense displacement fields and the resampling operations built on them.
//!
//! A field stores one displacement vector per voxel, in voxel units of its
//! own grid. Warping follows the pull convention: `out(x) = in(x + u(x))`,
//! with clamp-to-edge sampling. Trilinear interpolation is exact at integer
//! coordinates (the weight-1 path returns the stored value bitwise), which
//! keeps `compose(f, identity) == f` reproducible down to the bit.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{require_same_grid, Grid3};
use crate::volume::{LabelMask, Volume3};

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid3,
    /// Per-voxel displacement in voxel units, indexed like the grid.
    pub u: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(grid: Grid3, u: Vec<[f64; 3]>) -> Result<Self> {
        if u.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "field has {} vectors for a grid of {} voxels",
                u.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, u })
    }
}

/// The zero field: every voxel maps to itself.
pub fn identity_field(grid: &Grid3) -> DisplacementField {
    DisplacementField {
        grid: grid.clone(),
        u: vec![[0.0; 3]; grid.len()],
    }
}

/// Scalar Jacobian determinant of `x -> x + u(x)` per voxel.
#[derive(Debug, Clone)]
pub struct JacobianMap {
    pub grid: Grid3,
    pub det: Vec<f64>,
}

impl JacobianMap {
    /// Number of voxels where the transform folds (det <= 0).
    pub fn folding_count(&self) -> usize {
        self.det.iter().filter(|&&d| d <= 0.0).count()
    }
}

/// One axis of trilinear setup: cell nodes, fraction, and whether the
/// coordinate was clamped to the edge (gradient is zero there).
#[inline]
fn axis_setup(p: f64, n: usize) -> (usize, usize, f64, bool) {
    let top = (n - 1) as f64;
    let clamped = p <= 0.0 || p >= top;
    let pc = p.clamp(0.0, top);
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, i0 + 1, pc - i0 as f64, clamped)
}

/// Endpoint-exact linear interpolation: t = 0 and t = 1 return the stored
/// endpoints bitwise instead of routing them through arithmetic.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a * (1.0 - t) + b * t
    }
}

struct Cell {
    /// Linear indices of the 8 cell corners, x fastest.
    idx: [usize; 8],
    frac: [f64; 3],
    clamped: [bool; 3],
}

#[inline]
fn cell_at(grid: &Grid3, p: [f64; 3]) -> Cell {
    let (x0, x1, fx, cx) = axis_setup(p[0], grid.dims[0]);
    let (y0, y1, fy, cy) = axis_setup(p[1], grid.dims[1]);
    let (z0, z1, fz, cz) = axis_setup(p[2], grid.dims[2]);
    Cell {
        idx: [
            grid.index(x0, y0, z0),
            grid.index(x1, y0, z0),
            grid.index(x0, y1, z0),
            grid.index(x1, y1, z0),
            grid.index(x0, y0, z1),
            grid.index(x1, y0, z1),
            grid.index(x0, y1, z1),
            grid.index(x1, y1, z1),
        ],
        frac: [fx, fy, fz],
        clamped: [cx, cy, cz],
    }
}

#[inline]
fn trilerp(c: &[f64; 8], f: &[f64; 3]) -> f64 {
    let v00 = lerp(c[0], c[1], f[0]);
    let v10 = lerp(c[2], c[3], f[0]);
    let v01 = lerp(c[4], c[5], f[0]);
    let v11 = lerp(c[6], c[7], f[0]);
    lerp(lerp(v00, v10, f[1]), lerp(v01, v11, f[1]), f[2])
}

/// Derivative of `trilerp` with respect to the sample point. Components
/// where the point was clamped are zero: moving further out changes nothing.
#[inline]
fn trilerp_grad(c: &[f64; 8], f: &[f64; 3], clamped: &[bool; 3]) -> [f64; 3] {
    let gx = lerp(
        lerp(c[1] - c[0], c[3] - c[2], f[1]),
        lerp(c[5] - c[4], c[7] - c[6], f[1]),
        f[2],
    );
    let gy = lerp(
        lerp(c[2] - c[0], c[3] - c[1], f[0]),
        lerp(c[6] - c[4], c[7] - c[5], f[0]),
        f[2],
    );
    let gz = lerp(
        lerp(c[4] - c[0], c[5] - c[1], f[0]),
        lerp(c[6] - c[2], c[7] - c[3], f[0]),
        f[1],
    );
    [
        if clamped[0] { 0.0 } else { gx },
        if clamped[1] { 0.0 } else { gy },
        if clamped[2] { 0.0 } else { gz },
    ]
}

#[inline]
pub(crate) fn sample_scalar(data: &[f64], grid: &Grid3, p: [f64; 3]) -> f64 {
    let cell = cell_at(grid, p);
    let c = cell.idx.map(|i| data[i]);
    trilerp(&c, &cell.frac)
}

#[inline]
pub(crate) fn sample_scalar_grad(data: &[f64], grid: &Grid3, p: [f64; 3]) -> (f64, [f64; 3]) {
    let cell = cell_at(grid, p);
    let c = cell.idx.map(|i| data[i]);
    (trilerp(&c, &cell.frac), trilerp_grad(&c, &cell.frac, &cell.clamped))
}

#[inline]
pub(crate) fn sample_vec(u: &[[f64; 3]], grid: &Grid3, p: [f64; 3]) -> [f64; 3] {
    let cell = cell_at(grid, p);
    let mut out = [0.0; 3];
    for comp in 0..3 {
        let c = cell.idx.map(|i| u[i][comp]);
        out[comp] = trilerp(&c, &cell.frac);
    }
    out
}

/// Value and Jacobian of a vector field sample: `jac[c][k] = d u_c / d p_k`.
#[inline]
pub(crate) fn sample_vec_jac(
    u: &[[f64; 3]],
    grid: &Grid3,
    p: [f64; 3],
) -> ([f64; 3], [[f64; 3]; 3]) {
    let cell = cell_at(grid, p);
    let mut val = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for comp in 0..3 {
        let c = cell.idx.map(|i| u[i][comp]);
        val[comp] = trilerp(&c, &cell.frac);
        jac[comp] = trilerp_grad(&c, &cell.frac, &cell.clamped);
    }
    (val, jac)
}

/// Trilinear interpolation weights for the 8 corners of the cell at `p`,
/// matching `trilerp` exactly away from cell faces. Used by adjoint scatter.
#[inline]
pub(crate) fn cell_weights(grid: &Grid3, p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
    let cell = cell_at(grid, p);
    let [fx, fy, fz] = cell.frac;
    let wx = [1.0 - fx, fx];
    let wy = [1.0 - fy, fy];
    let wz = [1.0 - fz, fz];
    let mut w = [0.0; 8];
    for (corner, wc) in w.iter_mut().enumerate() {
        *wc = wx[corner & 1] * wy[(corner >> 1) & 1] * wz[corner >> 2];
    }
    (cell.idx, w)
}

/// Resample a volume through a displacement field with trilinear
/// interpolation: `out(x) = in(x + u(x))`.
pub fn warp(vol: &Volume3, field: &DisplacementField) -> Result<Volume3> {
    require_same_grid(&vol.grid, &field.grid, "warp image vs field")?;
    let grid = &vol.grid;
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let u = field.u[i];
            let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
            sample_scalar(&vol.data, grid, p)
        })
        .collect();
    Ok(Volume3 {
        grid: grid.clone(),
        data,
        units: vol.units,
    })
}

/// Resample a label mask through a displacement field with nearest-neighbour
/// lookup (labels must not be blended).
pub fn warp_mask(mask: &LabelMask, field: &DisplacementField) -> Result<LabelMask> {
    require_same_grid(&mask.grid, &field.grid, "warp mask vs field")?;
    let grid = &mask.grid;
    let labels: Vec<u32> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let u = field.u[i];
            let mut node = [0usize; 3];
            for k in 0..3 {
                let p = [x, y, z][k] as f64 + u[k];
                let r = p.round().clamp(0.0, (grid.dims[k] - 1) as f64);
                node[k] = r as usize;
            }
            mask.labels[grid.index(node[0], node[1], node[2])]
        })
        .collect();
    Ok(LabelMask {
        grid: grid.clone(),
        labels,
    })
}

/// Compose two fields on the same grid so the result applies `inner` first:
/// `u_out(x) = u_in(x) + u_outer(x + u_in(x))`, i.e. warping by the result
/// equals warping by `outer` then by `inner`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    require_same_grid(&outer.grid, &inner.grid, "compose outer vs inner")?;
    let grid = &outer.grid;
    let u: Vec<[f64; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let ui = inner.u[i];
            let p = [x as f64 + ui[0], y as f64 + ui[1], z as f64 + ui[2]];
            let uo = sample_vec(&outer.u, grid, p);
            [ui[0] + uo[0], ui[1] + uo[1], ui[2] + uo[2]]
        })
        .collect();
    Ok(DisplacementField {
        grid: grid.clone(),
        u,
    })
}

/// Jacobian determinant of `x -> x + u(x)` by finite differences: central in
/// the interior, one-sided on boundary faces. Exact for affine fields.
pub fn jacobian_determinant(field: &DisplacementField) -> JacobianMap {
    let grid = &field.grid;
    let u = &field.u;
    let det: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let pos = [x, y, z];
            let mut jac = [[0.0; 3]; 3];
            for axis in 0..3 {
                let n = grid.dims[axis];
                let xi = pos[axis];
                let mut lo = pos;
                let mut hi = pos;
                let scale = if xi == 0 {
                    hi[axis] = xi + 1;
                    1.0
                } else if xi == n - 1 {
                    lo[axis] = xi - 1;
                    1.0
                } else {
                    lo[axis] = xi - 1;
                    hi[axis] = xi + 1;
                    0.5
                };
                let a = u[grid.index(lo[0], lo[1], lo[2])];
                let b = u[grid.index(hi[0], hi[1], hi[2])];
                for comp in 0..3 {
                    jac[comp][axis] = (b[comp] - a[comp]) * scale;
                }
            }
            for k in 0..3 {
                jac[k][k] += 1.0;
            }
            det3(&jac)
        })
        .collect();
    JacobianMap {
        grid: grid.clone(),
        det,
    }
}

#[inline]
fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Lift a coarse field to a finer grid. Voxel indices scale by `factor`
/// between the grids (the inverse of `downsample`), so the source coordinate
/// for target voxel `i` is `i / factor` and displacement vectors, being in
/// voxel units, are multiplied by `factor`.
pub fn upsample_field(
    field: &DisplacementField,
    factor: usize,
    target_dims: [usize; 3],
) -> Result<DisplacementField> {
    if factor < 1 {
        return Err(Error::Domain("upsample factor must be >= 1".into()));
    }
    for k in 0..3 {
        let implied = field.grid.dims[k] * factor;
        if target_dims[k].abs_diff(implied) > factor {
            return Err(Error::GridMismatch(format!(
                "target dim {} incompatible with {} x factor {factor}",
                target_dims[k], field.grid.dims[k]
            )));
        }
    }
    let spacing = field.grid.spacing.map(|s| s / factor as f64);
    let grid = Grid3::new(target_dims, spacing, field.grid.origin)?;
    let inv = 1.0 / factor as f64;
    let scale = factor as f64;
    let mut u = vec![[0.0; 3]; grid.len()];
    for (i, out) in u.iter_mut().enumerate() {
        let (x, y, z) = grid.coords(i);
        let p = [x as f64 * inv, y as f64 * inv, z as f64 * inv];
        let s = sample_vec(&field.u, &field.grid, p);
        *out = [s[0] * scale, s[1] * scale, s[2] * scale];
    }
    Ok(DisplacementField { grid, u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IntensityUnits;

    fn grid(n: usize) -> Grid3 {
        Grid3::isotropic([n, n, n], 1.0).unwrap()
    }

    fn ramp_volume(g: &Grid3) -> Volume3 {
        let data = (0..g.len())
            .map(|i| {
                let (x, y, z) = g.coords(i);
                x as f64 * 7.0 + y as f64 * 0.3 - z as f64 * 2.25 + 5.0
            })
            .collect();
        Volume3::new(g.clone(), data, IntensityUnits::Dimensionless).unwrap()
    }

    #[test]
    fn trilinear_at_integer_coords_is_bitwise() {
        let g = grid(4);
        let data: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.917).sin() * 13.7).collect();
        for i in 0..g.len() {
            let (x, y, z) = g.coords(i);
            let v = sample_scalar(&data, &g, [x as f64, y as f64, z as f64]);
            assert_eq!(v.to_bits(), data[i].to_bits());
        }
    }

    #[test]
    fn trilinear_cell_midpoint_averages_corners() {
        let g = grid(2);
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let v = sample_scalar(&data, &g, [0.5, 0.5, 0.5]);
        assert!((v - 4.5).abs() < 1e-15);
    }

    #[test]
    fn clamped_samples_hold_edge_value_with_zero_gradient() {
        let g = grid(3);
        let vol = ramp_volume(&g);
        let (v, dg) = sample_scalar_grad(&vol.data, &g, [-3.5, 1.0, 1.0]);
        assert_eq!(v, vol.at(0, 1, 1));
        assert_eq!(dg[0], 0.0);
        // y and z stay interpolable and keep their slopes
        let (_, dg) = sample_scalar_grad(&vol.data, &g, [5.0, 1.0, 1.5]);
        assert_eq!(dg[0], 0.0);
        assert!((dg[1] - 0.3).abs() < 1e-12);
        assert!((dg[2] + 2.25).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_inside_a_cell() {
        let g = grid(5);
        let data: Vec<f64> = (0..g.len()).map(|i| ((i * 31 % 17) as f64).cos() * 4.0).collect();
        let p = [1.3, 1.6, 2.2];
        let (_, dg) = sample_scalar_grad(&data, &g, p);
        let h = 1e-6;
        for k in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[k] -= h;
            hi[k] += h;
            let fd = (sample_scalar(&data, &g, hi) - sample_scalar(&data, &g, lo)) / (2.0 * h);
            assert!((dg[k] - fd).abs() < 1e-7, "axis {k}: {} vs {fd}", dg[k]);
        }
    }

    #[test]
    fn warp_by_integer_shift_translates_exactly() {
        let g = grid(5);
        let vol = ramp_volume(&g);
        let mut f = identity_field(&g);
        for u in &mut f.u {
            u[0] = 2.0;
        }
        let w = warp(&vol, &f).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..3 {
                    assert_eq!(w.at(x, y, z), vol.at(x + 2, y, z));
                }
                // beyond the edge the sample clamps to the last column
                assert_eq!(w.at(4, y, z), vol.at(4, y, z));
            }
        }
    }

    #[test]
    fn warp_mask_uses_nearest_lookup() {
        let g = grid(4);
        let mut m = LabelMask::zeros(g.clone());
        m.labels[g.index(2, 1, 1)] = 7;
        let mut f = identity_field(&g);
        for u in &mut f.u {
            u[0] = 0.6;
        }
        let w = warp_mask(&m, &f).unwrap();
        // 1 + 0.6 rounds to 2, so the label lands one voxel to the left
        assert_eq!(w.at(1, 1, 1), 7);
        assert_eq!(w.at(2, 1, 1), 0);
    }

    #[test]
    fn compose_with_identity_is_bitwise_either_side() {
        let g = grid(4);
        let mut f = identity_field(&g);
        for (i, u) in f.u.iter_mut().enumerate() {
            u[0] = (i as f64 * 0.11).sin();
            u[1] = (i as f64 * 0.07).cos() * 0.5;
            u[2] = 0.25 - (i % 5) as f64 * 0.1;
        }
        let id = identity_field(&g);
        assert_eq!(compose(&f, &id).unwrap().u, f.u);
        assert_eq!(compose(&id, &f).unwrap().u, f.u);
    }

    #[test]
    fn composing_translations_adds_them() {
        let g = grid(6);
        let mut a = identity_field(&g);
        let mut b = identity_field(&g);
        for u in &mut a.u {
            *u = [0.5, 0.0, -0.25];
        }
        for u in &mut b.u {
            *u = [1.0, 0.75, 0.0];
        }
        let c = compose(&a, &b).unwrap();
        for u in &c.u {
            assert!((u[0] - 1.5).abs() < 1e-15);
            assert!((u[1] - 0.75).abs() < 1e-15);
            assert!((u[2] + 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_of_identity_is_one_everywhere() {
        let g = grid(4);
        let j = jacobian_determinant(&identity_field(&g));
        assert!(j.det.iter().all(|&d| d == 1.0));
        assert_eq!(j.folding_count(), 0);
    }

    /// Independent oracle: det(I + A) for a constant matrix A, computed with
    /// a cofactor expansion written out by hand.
    fn det_i_plus_a(a: [[f64; 3]; 3]) -> f64 {
        let m = [
            [1.0 + a[0][0], a[0][1], a[0][2]],
            [a[1][0], 1.0 + a[1][1], a[1][2]],
            [a[2][0], a[2][1], 1.0 + a[2][2]],
        ];
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[test]
    fn jacobian_is_exact_for_affine_fields() {
        let g = grid(6);
        let a = [
            [0.10, 0.02, -0.03],
            [-0.01, -0.08, 0.04],
            [0.05, 0.00, 0.12],
        ];
        let mut f = identity_field(&g);
        for (i, u) in f.u.iter_mut().enumerate() {
            let (x, y, z) = g.coords(i);
            let p = [x as f64, y as f64, z as f64];
            for r in 0..3 {
                u[r] = a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2];
            }
        }
        let want = det_i_plus_a(a);
        let j = jacobian_determinant(&f);
        for &d in &j.det {
            assert!((d - want).abs() < 1e-12, "{d} vs {want}");
        }
    }

    #[test]
    fn uniform_scaling_gives_cubed_determinant() {
        let g = grid(5);
        let mut f = identity_field(&g);
        for (i, u) in f.u.iter_mut().enumerate() {
            let (x, y, z) = g.coords(i);
            u[0] = 0.1 * x as f64;
            u[1] = 0.1 * y as f64;
            u[2] = 0.1 * z as f64;
        }
        let j = jacobian_determinant(&f);
        for &d in &j.det {
            assert!((d - 1.331).abs() < 1e-12);
        }
    }

    #[test]
    fn folding_is_detected() {
        let g = grid(4);
        let mut f = identity_field(&g);
        // strong negative x-gradient: u_x = -2x collapses and reverses x
        for (i, u) in f.u.iter_mut().enumerate() {
            let (x, _, _) = g.coords(i);
            u[0] = -2.0 * x as f64;
        }
        let j = jacobian_determinant(&f);
        assert_eq!(j.folding_count(), g.len());
    }

    #[test]
    fn upsample_reproduces_linear_fields() {
        let src_grid = Grid3::isotropic([4, 4, 4], 2.0).unwrap();
        let mut coarse = identity_field(&src_grid);
        for (i, u) in coarse.u.iter_mut().enumerate() {
            let (x, y, z) = src_grid.coords(i);
            u[0] = 0.5 * x as f64 + 0.25 * y as f64;
            u[1] = -0.1 * z as f64;
            u[2] = 1.0;
        }
        let fine = upsample_field(&coarse, 2, [8, 8, 8]).unwrap();
        assert_eq!(fine.grid.spacing, [1.0, 1.0, 1.0]);
        for (i, u) in fine.u.iter().enumerate() {
            let (x, y, z) = fine.grid.coords(i);
            // the linear source field sampled at x/2 (clamped to the source
            // extent, so the last fine voxel repeats the edge), scaled by 2
            let sx = (x as f64 / 2.0).min(3.0);
            let sy = (y as f64 / 2.0).min(3.0);
            let sz = (z as f64 / 2.0).min(3.0);
            let want = [2.0 * (0.5 * sx + 0.25 * sy), 2.0 * (-0.1 * sz), 2.0];
            for k in 0..3 {
                assert!((u[k] - want[k]).abs() < 1e-12, "voxel {i} comp {k}");
            }
        }
    }

    #[test]
    fn upsample_rejects_incompatible_dims() {
        let g = grid(4);
        let f = identity_field(&g);
        assert!(upsample_field(&f, 2, [8, 8, 8]).is_ok());
        assert!(upsample_field(&f, 2, [7, 8, 8]).is_ok());
        assert!(upsample_field(&f, 2, [11, 8, 8]).is_err());
    }

    #[test]
    fn vector_jacobian_matches_finite_differences() {
        let g = grid(5);
        let mut f = identity_field(&g);
        for (i, u) in f.u.iter_mut().enumerate() {
            u[0] = (i as f64 * 0.31).sin();
            u[1] = (i as f64 * 0.17).cos();
            u[2] = ((i * i) % 23) as f64 * 0.05;
        }
        let p = [1.4, 2.3, 1.8];
        let (_, jac) = sample_vec_jac(&f.u, &g, p);
        let h = 1e-6;
        for k in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[k] -= h;
            hi[k] += h;
            let a = sample_vec(&f.u, &g, lo);
            let b = sample_vec(&f.u, &g, hi);
            for comp in 0..3 {
                let fd = (b[comp] - a[comp]) / (2.0 * h);
                assert!((jac[comp][k] - fd).abs() < 1e-7);
            }
        }
    }
}
