//! Registration objective: bidirectional local normalized cross correlation
//! plus a gradient inverse-consistency penalty, with exact analytic
//! gradients with respect to either displacement field.
//!
//! ```text
//! L = LNCC(I_A ∘ f_ab, I_B) + LNCC(I_B ∘ f_ba, I_A) + λ · mean‖∇(u_C)‖²_F
//! ```
//!
//! where `u_C` is the displacement of the composed map `f_ab ∘ f_ba` (warp
//! by `f_ab`, then by `f_ba`), which is the identity when the two fields
//! are mutual inverses.
//!
//! LNCC here is the squared-correlation variant: with windowed means,
//! variances and covariance from a normalized Gaussian window `S`,
//! `ncc²(x) = cov² / (var_w · var_t + eps)` and the loss is `1 − mean ncc²`.
//! Squaring makes the measure sign-invariant and the eps floor keeps it
//! differentiable on flat regions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{require_same_grid, Grid3};
use crate::smooth::Smoother;
use crate::transform::{
    cell_weights, sample_scalar, sample_scalar_grad, sample_vec, sample_vec_jac, DisplacementField,
};
use crate::volume::Volume3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Gaussian window std for the LNCC statistics, in voxels.
    pub lncc_sigma: f64,
    /// Variance floor in the ncc² denominator.
    pub eps: f64,
    /// Weight of the inverse-consistency term.
    pub lambda: f64,
    /// Stride between regularizer evaluation voxels (1 = every interior voxel).
    pub reg_subsample: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lncc_sigma: 2.5,
            eps: 1e-5,
            lambda: 1.5,
            reg_subsample: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lncc_sigma.is_finite() || self.lncc_sigma <= 0.0 {
            return Err(Error::Config(format!("lncc_sigma must be > 0, got {}", self.lncc_sigma)));
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.reg_subsample < 1 {
            return Err(Error::Config("reg_subsample must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim_ab: f64,
    pub sim_ba: f64,
    pub reg: f64,
    pub total: f64,
}

/// Which displacement field a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSide {
    Ab,
    Ba,
}

/// Pull the source through a field, recording sampled values only.
fn warp_values(src: &Volume3, field: &DisplacementField) -> Vec<f64> {
    let grid = &src.grid;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let u = field.u[i];
            sample_scalar(
                &src.data,
                grid,
                [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]],
            )
        })
        .collect()
}

/// As `warp_values`, but also the source-intensity gradient at each sample
/// point, which is the chain factor `∂w(x)/∂u(x)`.
fn warp_values_grad(src: &Volume3, field: &DisplacementField) -> (Vec<f64>, Vec<[f64; 3]>) {
    let grid = &src.grid;
    let pairs: Vec<(f64, [f64; 3])> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let u = field.u[i];
            sample_scalar_grad(
                &src.data,
                grid,
                [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]],
            )
        })
        .collect();
    let mut vals = Vec::with_capacity(pairs.len());
    let mut grads = Vec::with_capacity(pairs.len());
    for (v, g) in pairs {
        vals.push(v);
        grads.push(g);
    }
    (vals, grads)
}

struct WindowStats {
    mean: Vec<f64>,
    /// Variance clamped at zero; a zero entry also marks where the clamp cut.
    var: Vec<f64>,
}

fn window_stats(s: &Smoother, f: &[f64]) -> Result<WindowStats> {
    let mean = s.smooth(f)?;
    let sq: Vec<f64> = f.par_iter().map(|&v| v * v).collect();
    let mut var = s.smooth(&sq)?;
    var.par_iter_mut()
        .zip(mean.par_iter())
        .for_each(|(v, &m)| *v = (*v - m * m).max(0.0));
    Ok(WindowStats { mean, var })
}

/// One direction of the similarity term, with the target-side statistics
/// precomputed so the optimizer can re-evaluate cheaply as the field moves.
pub(crate) struct SimPlan {
    src: Volume3,
    tgt: Vec<f64>,
    smoother: Smoother,
    tgt_stats: WindowStats,
    eps: f64,
}

impl SimPlan {
    pub(crate) fn new(src: &Volume3, tgt: &Volume3, cfg: &LossConfig) -> Result<Self> {
        require_same_grid(&src.grid, &tgt.grid, "lncc warped vs target")?;
        cfg.validate()?;
        let smoother = Smoother::new(tgt.grid.dims, cfg.lncc_sigma)?;
        let tgt_stats = window_stats(&smoother, &tgt.data)?;
        Ok(Self {
            src: src.clone(),
            tgt: tgt.data.clone(),
            smoother,
            tgt_stats,
            eps: cfg.eps,
        })
    }

    /// `1 − mean ncc²` over all voxels, for given warped values.
    fn value_of(&self, w: &[f64]) -> Result<f64> {
        let ws = window_stats(&self.smoother, w)?;
        let prod: Vec<f64> = w.par_iter().zip(self.tgt.par_iter()).map(|(&a, &b)| a * b).collect();
        let sp = self.smoother.smooth(&prod)?;
        let ncc2: Vec<f64> = (0..w.len())
            .into_par_iter()
            .map(|i| {
                let cov = sp[i] - ws.mean[i] * self.tgt_stats.mean[i];
                let d = ws.var[i] * self.tgt_stats.var[i] + self.eps;
                cov * cov / d
            })
            .collect();
        let mean = ncc2.iter().sum::<f64>() / w.len() as f64;
        Ok(1.0 - mean)
    }

    pub(crate) fn value(&self, field: &DisplacementField) -> Result<f64> {
        require_same_grid(&self.src.grid, &field.grid, "lncc image vs field")?;
        self.value_of(&warp_values(&self.src, field))
    }

    /// Loss value and its exact gradient with respect to the field.
    ///
    /// With `S` the normalized window, `N` the voxel count and per-voxel
    /// coefficients
    ///
    /// ```text
    /// A = -(2/N) cov / d,    B = (1/N) cov² var_t / d² · [var_w > 0]
    /// ```
    ///
    /// the derivative with respect to the warped values is
    ///
    /// ```text
    /// ∂sim/∂w = t ⊙ Sᵀ[A] + 2 w ⊙ Sᵀ[B] − Sᵀ[A m_t + 2 B m_w]
    /// ```
    ///
    /// and the chain to the field multiplies by the sampled source gradient.
    pub(crate) fn value_and_grad(&self, field: &DisplacementField) -> Result<(f64, Vec<[f64; 3]>)> {
        require_same_grid(&self.src.grid, &field.grid, "lncc image vs field")?;
        let (w, gsrc) = warp_values_grad(&self.src, field);
        let n = w.len() as f64;
        let ws = window_stats(&self.smoother, &w)?;
        let prod: Vec<f64> = w.par_iter().zip(self.tgt.par_iter()).map(|(&a, &b)| a * b).collect();
        let sp = self.smoother.smooth(&prod)?;

        let mut ncc2 = vec![0.0; w.len()];
        let mut a = vec![0.0; w.len()];
        let mut b = vec![0.0; w.len()];
        let mut mix = vec![0.0; w.len()];
        ncc2.par_iter_mut()
            .zip(a.par_iter_mut())
            .zip(b.par_iter_mut().zip(mix.par_iter_mut()))
            .enumerate()
            .for_each(|(i, ((n2, ai), (bi, mi)))| {
                let cov = sp[i] - ws.mean[i] * self.tgt_stats.mean[i];
                let vt = self.tgt_stats.var[i];
                let d = ws.var[i] * vt + self.eps;
                *n2 = cov * cov / d;
                *ai = -(2.0 / n) * cov / d;
                *bi = if ws.var[i] > 0.0 {
                    (1.0 / n) * cov * cov * vt / (d * d)
                } else {
                    0.0
                };
                *mi = *ai * self.tgt_stats.mean[i] + 2.0 * *bi * ws.mean[i];
            });
        let value = 1.0 - ncc2.iter().sum::<f64>() / n;

        let st_a = self.smoother.adjoint(&a)?;
        let st_b = self.smoother.adjoint(&b)?;
        let st_mix = self.smoother.adjoint(&mix)?;
        let grad: Vec<[f64; 3]> = (0..w.len())
            .into_par_iter()
            .map(|i| {
                let dw = self.tgt[i] * st_a[i] + 2.0 * w[i] * st_b[i] - st_mix[i];
                [dw * gsrc[i][0], dw * gsrc[i][1], dw * gsrc[i][2]]
            })
            .collect();
        Ok((value, grad))
    }
}

/// Similarity between an already-warped image and its target.
pub fn lncc_loss(warped: &Volume3, target: &Volume3, cfg: &LossConfig) -> Result<f64> {
    require_same_grid(&warped.grid, &target.grid, "lncc warped vs target")?;
    cfg.validate()?;
    let smoother = Smoother::new(target.grid.dims, cfg.lncc_sigma)?;
    let tgt_stats = window_stats(&smoother, &target.data)?;
    let plan = SimPlan {
        src: warped.clone(),
        tgt: target.data.clone(),
        smoother,
        tgt_stats,
        eps: cfg.eps,
    };
    plan.value_of(&warped.data)
}

/// Displacement of the composition `f_ab ∘ f_ba` (apply `f_ab`'s warp, then
/// `f_ba`'s): `u_C(x) = u_ba(x) + u_ab(x + u_ba(x))`.
fn composed_displacement(f_ab: &DisplacementField, f_ba: &DisplacementField) -> Vec<[f64; 3]> {
    let grid = &f_ab.grid;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let ui = f_ba.u[i];
            let p = [x as f64 + ui[0], y as f64 + ui[1], z as f64 + ui[2]];
            let uo = sample_vec(&f_ab.u, grid, p);
            [ui[0] + uo[0], ui[1] + uo[1], ui[2] + uo[2]]
        })
        .collect()
}

/// Whether a voxel is a regularizer evaluation point: strictly interior and
/// on the subsampling lattice anchored at (1,1,1).
#[inline]
fn is_eval(pos: [usize; 3], dims: [usize; 3], stride: usize) -> bool {
    for k in 0..3 {
        if pos[k] < 1 || pos[k] + 1 >= dims[k] || (pos[k] - 1) % stride != 0 {
            return false;
        }
    }
    true
}

fn eval_count(dims: [usize; 3], stride: usize) -> usize {
    dims.iter()
        .map(|&n| (n - 2).div_ceil(stride))
        .product()
}

fn check_reg_grid(grid: &Grid3) -> Result<()> {
    if grid.dims.iter().any(|&n| n < 3) {
        return Err(Error::Domain(format!(
            "inverse-consistency term needs interior voxels, dims {:?} too small",
            grid.dims
        )));
    }
    Ok(())
}

/// Central-difference Jacobian rows of `u_C` at an interior voxel:
/// `d[c][k] = (u_C[e + δ_k][c] − u_C[e − δ_k][c]) / 2`.
#[inline]
fn interior_jac(u_c: &[[f64; 3]], grid: &Grid3, pos: [usize; 3]) -> [[f64; 3]; 3] {
    let mut d = [[0.0; 3]; 3];
    for k in 0..3 {
        let mut lo = pos;
        let mut hi = pos;
        lo[k] -= 1;
        hi[k] += 1;
        let a = u_c[grid.index(lo[0], lo[1], lo[2])];
        let b = u_c[grid.index(hi[0], hi[1], hi[2])];
        for c in 0..3 {
            d[c][k] = 0.5 * (b[c] - a[c]);
        }
    }
    d
}

fn reg_value_of(u_c: &[[f64; 3]], grid: &Grid3, stride: usize) -> f64 {
    let dims = grid.dims;
    let mut sum = 0.0;
    for z in (1..dims[2] - 1).step_by(stride) {
        for y in (1..dims[1] - 1).step_by(stride) {
            for x in (1..dims[0] - 1).step_by(stride) {
                let d = interior_jac(u_c, grid, [x, y, z]);
                for row in &d {
                    for &v in row {
                        sum += v * v;
                    }
                }
            }
        }
    }
    sum / eval_count(dims, stride) as f64
}

pub(crate) fn reg_value(f_ab: &DisplacementField, f_ba: &DisplacementField, stride: usize) -> Result<f64> {
    require_same_grid(&f_ab.grid, &f_ba.grid, "regularizer field pair")?;
    check_reg_grid(&f_ab.grid)?;
    let u_c = composed_displacement(f_ab, f_ba);
    Ok(reg_value_of(&u_c, &f_ab.grid, stride))
}

/// Gradient of the regularizer value with respect to `u_C`, in gather form:
/// voxel `y` collects the stencil contributions of the evaluation voxels
/// one step away on each axis.
fn reg_grad_wrt_composed(u_c: &[[f64; 3]], grid: &Grid3, stride: usize) -> Vec<[f64; 3]> {
    let dims = grid.dims;
    let inv_count = 1.0 / eval_count(dims, stride) as f64;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let pos = [x, y, z];
            let mut g = [0.0; 3];
            for k in 0..3 {
                // evaluation voxel below: d[c][k] there reads u_C at this voxel with +1/2
                if pos[k] >= 1 {
                    let mut e = pos;
                    e[k] -= 1;
                    if is_eval(e, dims, stride) {
                        let mut far = pos;
                        far[k] -= 2;
                        let a = u_c[grid.index(far[0], far[1], far[2])];
                        let b = u_c[i];
                        for c in 0..3 {
                            g[c] += inv_count * 0.5 * (b[c] - a[c]);
                        }
                    }
                }
                // evaluation voxel above: reads u_C here with -1/2
                if pos[k] + 1 < dims[k] {
                    let mut e = pos;
                    e[k] += 1;
                    if is_eval(e, dims, stride) {
                        let mut far = pos;
                        far[k] += 2;
                        let a = u_c[i];
                        let b = u_c[grid.index(far[0], far[1], far[2])];
                        for c in 0..3 {
                            g[c] -= inv_count * 0.5 * (b[c] - a[c]);
                        }
                    }
                }
            }
            g
        })
        .collect()
}

/// Regularizer value plus its gradient with respect to one field.
///
/// `u_C(x) = u_ba(x) + u_ab(p(x))` with `p(x) = x + u_ba(x)`, so the ab
/// gradient scatters each voxel's contribution onto the interpolation cell
/// of `p(x)`, while the ba gradient is diagonal plus the sampled Jacobian
/// of `u_ab` at `p(x)`.
pub(crate) fn reg_value_grad(
    f_ab: &DisplacementField,
    f_ba: &DisplacementField,
    stride: usize,
    side: FieldSide,
) -> Result<(f64, Vec<[f64; 3]>)> {
    require_same_grid(&f_ab.grid, &f_ba.grid, "regularizer field pair")?;
    check_reg_grid(&f_ab.grid)?;
    let grid = &f_ab.grid;
    let u_c = composed_displacement(f_ab, f_ba);
    let value = reg_value_of(&u_c, grid, stride);
    let g_c = reg_grad_wrt_composed(&u_c, grid, stride);

    let grad = match side {
        FieldSide::Ab => {
            // sequential scatter keeps the accumulation order fixed
            let mut g = vec![[0.0; 3]; grid.len()];
            for i in 0..grid.len() {
                let gc = g_c[i];
                if gc == [0.0; 3] {
                    continue;
                }
                let (x, y, z) = grid.coords(i);
                let ui = f_ba.u[i];
                let p = [x as f64 + ui[0], y as f64 + ui[1], z as f64 + ui[2]];
                let (idx, w) = cell_weights(grid, p);
                for (j, &node) in idx.iter().enumerate() {
                    let wj = w[j];
                    if wj != 0.0 {
                        for c in 0..3 {
                            g[node][c] += wj * gc[c];
                        }
                    }
                }
            }
            g
        }
        FieldSide::Ba => (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = grid.coords(i);
                let ui = f_ba.u[i];
                let p = [x as f64 + ui[0], y as f64 + ui[1], z as f64 + ui[2]];
                let (_, jac) = sample_vec_jac(&f_ab.u, grid, p);
                let gc = g_c[i];
                let mut g = gc;
                for k in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        acc += jac[c][k] * gc[c];
                    }
                    g[k] += acc;
                }
                g
            })
            .collect(),
    };
    Ok((value, grad))
}

/// Mean squared Frobenius deviation of the composed map's Jacobian from the
/// identity, over the evaluation lattice.
pub fn gradicon_reg(f_ab: &DisplacementField, f_ba: &DisplacementField, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    reg_value(f_ab, f_ba, cfg.reg_subsample)
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} is non-finite ({v})")))
    }
}

/// Full objective for one image pair and field pair.
pub fn total_loss(
    i_a: &Volume3,
    i_b: &Volume3,
    f_ab: &DisplacementField,
    f_ba: &DisplacementField,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    require_same_grid(&i_a.grid, &i_b.grid, "total_loss image pair")?;
    require_same_grid(&i_a.grid, &f_ab.grid, "total_loss images vs fields")?;
    cfg.validate()?;
    let plan_ab = SimPlan::new(i_a, i_b, cfg)?;
    let plan_ba = SimPlan::new(i_b, i_a, cfg)?;
    let sim_ab = check_finite("sim_ab", plan_ab.value(f_ab)?)?;
    let sim_ba = check_finite("sim_ba", plan_ba.value(f_ba)?)?;
    let reg = check_finite("reg", reg_value(f_ab, f_ba, cfg.reg_subsample)?)?;
    Ok(LossBreakdown {
        sim_ab,
        sim_ba,
        reg,
        total: sim_ab + sim_ba + cfg.lambda * reg,
    })
}

/// Exact gradient of the total objective with respect to one field.
pub fn loss_gradient(
    i_a: &Volume3,
    i_b: &Volume3,
    f_ab: &DisplacementField,
    f_ba: &DisplacementField,
    cfg: &LossConfig,
    wrt: FieldSide,
) -> Result<DisplacementField> {
    require_same_grid(&i_a.grid, &i_b.grid, "loss_gradient image pair")?;
    require_same_grid(&i_a.grid, &f_ab.grid, "loss_gradient images vs fields")?;
    cfg.validate()?;
    let (_, mut grad) = match wrt {
        FieldSide::Ab => SimPlan::new(i_a, i_b, cfg)?.value_and_grad(f_ab)?,
        FieldSide::Ba => SimPlan::new(i_b, i_a, cfg)?.value_and_grad(f_ba)?,
    };
    let (_, reg_grad) = reg_value_grad(f_ab, f_ba, cfg.reg_subsample, wrt)?;
    grad.par_iter_mut().zip(reg_grad.par_iter()).for_each(|(g, r)| {
        for k in 0..3 {
            g[k] += cfg.lambda * r[k];
        }
    });
    if let Some(i) = grad
        .iter()
        .position(|g| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric(format!("non-finite gradient at voxel {i}")));
    }
    DisplacementField::new(f_ab.grid.clone(), grad)
}
