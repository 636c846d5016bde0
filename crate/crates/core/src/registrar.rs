//! Bidirectional deformable registration by per-pair instance optimization.
//!
//! The solver runs a multiresolution schedule: stage 1 chains three units
//! (default grid factors 4, 2, 1), stage 2 refines once more at full
//! resolution. Each unit solves for the residual between the already-warped
//! image and its target, and the residual is composed onto the running
//! field, so every level starts from a small correction.
//!
//! A unit is plain alternating gradient descent on the two fields under the
//! shared objective. The raw gradient is Gaussian-smoothed (a fluid-like
//! regularization standing in for the smoothness a learned predictor would
//! supply), normalized to a max step of one voxel, and applied with a step
//! size that halves whenever a step would increase the loss. Accepted steps
//! therefore trace a monotone loss curve.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::require_same_grid;
use crate::loss::{reg_value, reg_value_grad, FieldSide, LossBreakdown, LossConfig, SimPlan};
use crate::smooth::Smoother;
use crate::transform::{compose, identity_field, upsample_field, warp, DisplacementField};
use crate::volume::{downsample, Volume3};

/// Budget of step halvings for one unit before it gives up refining.
const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationUnit {
    /// Grid downsampling factor this unit works at (1, 2 or 4).
    pub level_factor: usize,
    /// Std of the Gaussian applied to the field gradient each step, voxels.
    pub smoothing_sigma: f64,
    /// Maximum alternating iterations (each updates both fields once).
    pub iterations: usize,
    /// Initial step size in voxels of maximum displacement change.
    pub step_size: f64,
}

impl Default for RegistrationUnit {
    fn default() -> Self {
        Self {
            level_factor: 1,
            smoothing_sigma: 1.5,
            iterations: 100,
            step_size: 0.1,
        }
    }
}

impl RegistrationUnit {
    fn with_factor(level_factor: usize) -> Self {
        Self {
            level_factor,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.level_factor) {
            return Err(Error::Config(format!(
                "level_factor must be 1, 2 or 4, got {}",
                self.level_factor
            )));
        }
        if !self.smoothing_sigma.is_finite() || self.smoothing_sigma <= 0.0 {
            return Err(Error::Config(format!(
                "smoothing_sigma must be > 0, got {}",
                self.smoothing_sigma
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Coarse-to-fine schedule; exactly three units in non-increasing factor order.
    pub stage1_units: Vec<RegistrationUnit>,
    /// Full-resolution refinement unit.
    pub stage2_unit: RegistrationUnit,
    pub loss: LossConfig,
    /// Echoed into outputs for traceability; the solver itself is deterministic.
    pub seed: u64,
    /// Stop a unit when the relative loss decrease per iteration falls below this.
    pub convergence_tol: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            stage1_units: vec![
                RegistrationUnit::with_factor(4),
                RegistrationUnit::with_factor(2),
                RegistrationUnit::with_factor(1),
            ],
            stage2_unit: RegistrationUnit::with_factor(1),
            loss: LossConfig::default(),
            seed: 0,
            convergence_tol: 1e-5,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_units.len() != 3 {
            return Err(Error::Config(format!(
                "stage1_units must have exactly 3 units, got {}",
                self.stage1_units.len()
            )));
        }
        for pair in self.stage1_units.windows(2) {
            if pair[0].level_factor < pair[1].level_factor {
                return Err(Error::Config(
                    "stage1_units must be in non-increasing level_factor order".into(),
                ));
            }
        }
        for u in &self.stage1_units {
            u.validate()?;
        }
        self.stage2_unit.validate()?;
        if self.stage2_unit.level_factor != 1 {
            return Err(Error::Config("stage2_unit must run at level_factor 1".into()));
        }
        self.loss.validate()?;
        if !self.convergence_tol.is_finite() || self.convergence_tol < 0.0 {
            return Err(Error::Config(format!(
                "convergence_tol must be >= 0, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// Accepted-step loss history of one unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitTrace {
    pub stage: usize,
    pub level_factor: usize,
    /// Initial breakdown followed by one entry per accepted step.
    pub entries: Vec<LossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub field_ab: DisplacementField,
    pub field_ba: DisplacementField,
    pub loss_trace: Vec<UnitTrace>,
    pub runtime_seconds: f64,
    pub config_echo: RegistrationConfig,
}

fn smooth_components(smoother: &Smoother, g: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let mut out = vec![[0.0; 3]; g.len()];
    for k in 0..3 {
        let comp: Vec<f64> = g.par_iter().map(|v| v[k]).collect();
        let s = smoother.smooth(&comp)?;
        out.par_iter_mut().zip(s.par_iter()).for_each(|(o, &v)| o[k] = v);
    }
    Ok(out)
}

fn max_vector_norm(g: &[[f64; 3]]) -> f64 {
    let mut best = 0.0f64;
    for v in g {
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > best {
            best = n2;
        }
    }
    best.sqrt()
}

/// Core unit solver over two independent similarity directions coupled by
/// the inverse-consistency term. The two directions may compare different
/// source images against different targets: residual levels keep the
/// original targets while warping already-corrected sources.
#[allow(clippy::too_many_arguments)]
fn optimize_pair(
    src_ab: &Volume3,
    tgt_ab: &Volume3,
    src_ba: &Volume3,
    tgt_ba: &Volume3,
    init_ab: &DisplacementField,
    init_ba: &DisplacementField,
    unit: &RegistrationUnit,
    loss_cfg: &LossConfig,
    convergence_tol: f64,
) -> Result<(DisplacementField, DisplacementField, Vec<LossBreakdown>)> {
    require_same_grid(&src_ab.grid, &tgt_ab.grid, "unit images ab")?;
    require_same_grid(&src_ba.grid, &tgt_ba.grid, "unit images ba")?;
    require_same_grid(&src_ab.grid, &src_ba.grid, "unit image directions")?;
    require_same_grid(&src_ab.grid, &init_ab.grid, "unit image vs field")?;
    require_same_grid(&init_ab.grid, &init_ba.grid, "unit field pair")?;

    let plans = [
        SimPlan::new(src_ab, tgt_ab, loss_cfg)?,
        SimPlan::new(src_ba, tgt_ba, loss_cfg)?,
    ];
    let grad_smoother = Smoother::new(src_ab.grid.dims, unit.smoothing_sigma)?;
    let stride = loss_cfg.reg_subsample;
    let lambda = loss_cfg.lambda;

    let mut fields = [init_ab.clone(), init_ba.clone()];
    let mut sims = [plans[0].value(&fields[0])?, plans[1].value(&fields[1])?];
    let mut reg = reg_value(&fields[0], &fields[1], stride)?;
    let mut total = sims[0] + sims[1] + lambda * reg;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite initial loss (sim_ab {}, sim_ba {}, reg {reg})",
            sims[0], sims[1]
        )));
    }
    let mut trace = vec![LossBreakdown {
        sim_ab: sims[0],
        sim_ba: sims[1],
        reg,
        total,
    }];

    let mut step = unit.step_size;
    let mut halvings = 0usize;
    'outer: for _ in 0..unit.iterations {
        let iter_start_total = total;
        for side in 0..2 {
            let wrt = if side == 0 { FieldSide::Ab } else { FieldSide::Ba };
            let (_, sim_grad) = plans[side].value_and_grad(&fields[side])?;
            let (_, reg_grad) = reg_value_grad(&fields[0], &fields[1], stride, wrt)?;
            let combined: Vec<[f64; 3]> = sim_grad
                .par_iter()
                .zip(reg_grad.par_iter())
                .map(|(s, r)| [s[0] + lambda * r[0], s[1] + lambda * r[1], s[2] + lambda * r[2]])
                .collect();
            let dir = smooth_components(&grad_smoother, &combined)?;
            let norm = max_vector_norm(&dir);
            if norm == 0.0 {
                continue;
            }
            let scale = 1.0 / norm;

            loop {
                let cand_u: Vec<[f64; 3]> = fields[side]
                    .u
                    .par_iter()
                    .zip(dir.par_iter())
                    .map(|(f, d)| {
                        [
                            f[0] - step * scale * d[0],
                            f[1] - step * scale * d[1],
                            f[2] - step * scale * d[2],
                        ]
                    })
                    .collect();
                let candidate = DisplacementField {
                    grid: fields[side].grid.clone(),
                    u: cand_u,
                };
                let cand_sim = plans[side].value(&candidate)?;
                let cand_reg = if side == 0 {
                    reg_value(&candidate, &fields[1], stride)?
                } else {
                    reg_value(&fields[0], &candidate, stride)?
                };
                let other_sim = sims[1 - side];
                let cand_total = cand_sim + other_sim + lambda * cand_reg;
                if cand_total.is_finite() && cand_total <= total {
                    fields[side] = candidate;
                    sims[side] = cand_sim;
                    reg = cand_reg;
                    total = cand_total;
                    trace.push(LossBreakdown {
                        sim_ab: sims[0],
                        sim_ba: sims[1],
                        reg,
                        total,
                    });
                    break;
                }
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    break 'outer;
                }
                step *= 0.5;
            }
        }
        let rel = (iter_start_total - total) / iter_start_total.abs().max(1e-12);
        if rel < convergence_tol {
            break;
        }
    }

    let [f_ab, f_ba] = fields;
    Ok((f_ab, f_ba, trace))
}

/// One optimization unit at its working resolution.
pub fn optimize_unit(
    i_a: &Volume3,
    i_b: &Volume3,
    init_ab: &DisplacementField,
    init_ba: &DisplacementField,
    unit: &RegistrationUnit,
    cfg: &RegistrationConfig,
) -> Result<(DisplacementField, DisplacementField, Vec<LossBreakdown>)> {
    optimize_pair(
        i_a,
        i_b,
        i_b,
        i_a,
        init_ab,
        init_ba,
        unit,
        &cfg.loss,
        cfg.convergence_tol,
    )
}

/// Residual solve at reduced resolution, with zero-initialized fields and
/// the four images downsampled, lifted back to `full_dims` afterwards.
#[allow(clippy::too_many_arguments)]
fn downsample_solve(
    src_ab: &Volume3,
    tgt_ab: &Volume3,
    src_ba: &Volume3,
    tgt_ba: &Volume3,
    unit: &RegistrationUnit,
    cfg: &RegistrationConfig,
    full_dims: [usize; 3],
) -> Result<(DisplacementField, DisplacementField, Vec<LossBreakdown>)> {
    let f = unit.level_factor;
    let d_src_ab = downsample(src_ab, f)?;
    let d_tgt_ab = downsample(tgt_ab, f)?;
    let d_src_ba = downsample(src_ba, f)?;
    let d_tgt_ba = downsample(tgt_ba, f)?;
    let zero = identity_field(&d_src_ab.grid);
    let (low_ab, low_ba, trace) = optimize_pair(
        &d_src_ab,
        &d_tgt_ab,
        &d_src_ba,
        &d_tgt_ba,
        &zero,
        &zero,
        unit,
        &cfg.loss,
        cfg.convergence_tol,
    )?;
    let f_ab = upsample_field(&low_ab, f, full_dims)?;
    let f_ba = upsample_field(&low_ba, f, full_dims)?;
    Ok((f_ab, f_ba, trace))
}

/// Solve a unit on grids reduced by its level factor and lift the fields to
/// full resolution.
pub fn downsample_op(
    i_a: &Volume3,
    i_b: &Volume3,
    unit: &RegistrationUnit,
    cfg: &RegistrationConfig,
) -> Result<(DisplacementField, DisplacementField)> {
    if unit.level_factor < 2 {
        return Err(Error::Config(format!(
            "downsample_op needs level_factor >= 2, got {}",
            unit.level_factor
        )));
    }
    let (f_ab, f_ba, _) = downsample_solve(i_a, i_b, i_b, i_a, unit, cfg, i_a.grid.dims)?;
    Ok((f_ab, f_ba))
}

/// Coarse-then-residual refinement: warp each image by its running field,
/// solve the residual against the original targets (at reduced resolution
/// when the unit calls for it), and compose the residual onto the coarse
/// field. The coarse field is the outer map: warping by the composition
/// equals warping by coarse, then by the residual.
pub fn two_step(
    i_a: &Volume3,
    i_b: &Volume3,
    coarse_ab: &DisplacementField,
    coarse_ba: &DisplacementField,
    unit: &RegistrationUnit,
    cfg: &RegistrationConfig,
) -> Result<(DisplacementField, DisplacementField, Vec<LossBreakdown>)> {
    let warped_a = warp(i_a, coarse_ab)?;
    let warped_b = warp(i_b, coarse_ba)?;
    let (resid_ab, resid_ba, trace) = if unit.level_factor >= 2 {
        downsample_solve(&warped_a, i_b, &warped_b, i_a, unit, cfg, i_a.grid.dims)?
    } else {
        let zero = identity_field(&i_a.grid);
        optimize_pair(
            &warped_a,
            i_b,
            &warped_b,
            i_a,
            &zero,
            &zero,
            unit,
            &cfg.loss,
            cfg.convergence_tol,
        )?
    };
    let f_ab = compose(coarse_ab, &resid_ab)?;
    let f_ba = compose(coarse_ba, &resid_ba)?;
    Ok((f_ab, f_ba, trace))
}

/// Full two-stage registration of an image pair, producing both directions.
pub fn register(i_a: &Volume3, i_b: &Volume3, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    require_same_grid(&i_a.grid, &i_b.grid, "register image pair")?;
    cfg.validate()?;
    let start = Instant::now();

    let mut f_ab = identity_field(&i_a.grid);
    let mut f_ba = identity_field(&i_a.grid);
    let mut loss_trace = Vec::new();

    for unit in &cfg.stage1_units {
        let (next_ab, next_ba, entries) = two_step(i_a, i_b, &f_ab, &f_ba, unit, cfg)?;
        f_ab = next_ab;
        f_ba = next_ba;
        loss_trace.push(UnitTrace {
            stage: 1,
            level_factor: unit.level_factor,
            entries,
        });
    }
    let (next_ab, next_ba, entries) = two_step(i_a, i_b, &f_ab, &f_ba, &cfg.stage2_unit, cfg)?;
    f_ab = next_ab;
    f_ba = next_ba;
    loss_trace.push(UnitTrace {
        stage: 2,
        level_factor: cfg.stage2_unit.level_factor,
        entries,
    });

    Ok(RegistrationResult {
        field_ab: f_ab,
        field_ba: f_ba,
        loss_trace,
        runtime_seconds: start.elapsed().as_secs_f64(),
        config_echo: cfg.clone(),
    })
}
