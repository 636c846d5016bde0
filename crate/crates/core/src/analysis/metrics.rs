//! Overlap and Jacobian summary statistics.

use crate::error::{Error, Result};
use crate::transform::JacobianMap;
use crate::volume::LabelMask;

/// Dice overlap of one label between two masks on the same grid.
///
/// Two empty regions agree perfectly (1.0); exactly one empty region is total
/// disagreement (0.0).
pub fn dice(a: &LabelMask, b: &LabelMask, label: u32) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!(
            "dice operands live on different grids ({:?} vs {:?})",
            a.grid.dims, b.grid.dims
        )));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        let ha = la == label;
        let hb = lb == label;
        na += ha as usize;
        nb += hb as usize;
        inter += (ha && hb) as usize;
    }
    if na == 0 && nb == 0 {
        return Ok(1.0);
    }
    if na == 0 || nb == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Population standard deviation, computed against a shift by the first
/// value so that identical inputs give exactly zero and simple dyadic
/// spreads stay exact.
pub(crate) fn population_std(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let shift = vals[0];
    let mean_d = vals.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - shift - mean_d).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

/// Standard deviation of `ln(detJ)` with the count of voxels that had to be
/// excluded because their determinant was non-positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdLogJ {
    pub value: f64,
    pub excluded: usize,
}

/// Population standard deviation of the log Jacobian determinant over a
/// region (`None` means the whole grid; otherwise all nonzero mask voxels).
/// Folded voxels (detJ <= 0) are excluded and counted.
pub fn sdlogj(jac: &JacobianMap, roi: Option<&LabelMask>) -> Result<SdLogJ> {
    if let Some(m) = roi {
        if m.grid != jac.grid {
            return Err(Error::GridMismatch(format!(
                "region grid {:?} does not match Jacobian grid {:?}",
                m.grid.dims, jac.grid.dims
            )));
        }
    }
    let in_region = |i: usize| roi.is_none_or(|m| m.labels[i] != 0);
    let mut total = 0usize;
    let mut logs = Vec::new();
    for (i, &d) in jac.det.iter().enumerate() {
        if !in_region(i) {
            continue;
        }
        total += 1;
        if d > 0.0 {
            logs.push(d.ln());
        }
    }
    if total == 0 {
        return Err(Error::Domain("region is empty".into()));
    }
    if logs.is_empty() {
        return Err(Error::Domain(format!(
            "all {total} region voxels are folded (detJ <= 0)"
        )));
    }
    Ok(SdLogJ {
        value: population_std(&logs),
        excluded: total - logs.len(),
    })
}

/// Jacobian determinant summary for one region.
///
/// Statistics are over voxels with detJ > 0; non-positive determinants only
/// contribute to `folding_fraction`. A region with no voxels at all yields
/// `voxel_count == 0` and `None` everywhere; a region that is entirely folded
/// keeps its `folding_fraction` but has no order statistics to report.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiJacobianStats {
    pub roi_id: u32,
    pub voxel_count: usize,
    pub median_detj: Option<f64>,
    pub mean_detj: Option<f64>,
    pub std_detj: Option<f64>,
    /// Fraction of included voxels with detJ < 1.
    pub frac_shrinking: Option<f64>,
    /// Fraction of included voxels with detJ > 1.
    pub frac_expanding: Option<f64>,
    /// Fraction of all region voxels with detJ <= 0.
    pub folding_fraction: Option<f64>,
}

/// Per-region Jacobian statistics for an explicit list of region ids.
/// The median is the lower-middle order statistic (an actual sample value,
/// never an average of two).
pub fn roi_jacobian_stats(
    jac: &JacobianMap,
    rois: &LabelMask,
    ids: &[u32],
) -> Result<Vec<RoiJacobianStats>> {
    if rois.grid != jac.grid {
        return Err(Error::GridMismatch(format!(
            "region grid {:?} does not match Jacobian grid {:?}",
            rois.grid.dims, jac.grid.dims
        )));
    }
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let dets: Vec<f64> = rois
            .labels
            .iter()
            .zip(&jac.det)
            .filter(|(&l, _)| l == id)
            .map(|(_, &d)| d)
            .collect();
        let voxel_count = dets.len();
        if voxel_count == 0 {
            out.push(RoiJacobianStats {
                roi_id: id,
                voxel_count: 0,
                median_detj: None,
                mean_detj: None,
                std_detj: None,
                frac_shrinking: None,
                frac_expanding: None,
                folding_fraction: None,
            });
            continue;
        }
        let mut included: Vec<f64> = dets.iter().copied().filter(|&d| d > 0.0).collect();
        let folding = (voxel_count - included.len()) as f64 / voxel_count as f64;
        if included.is_empty() {
            out.push(RoiJacobianStats {
                roi_id: id,
                voxel_count,
                median_detj: None,
                mean_detj: None,
                std_detj: None,
                frac_shrinking: None,
                frac_expanding: None,
                folding_fraction: Some(folding),
            });
            continue;
        }
        included.sort_by(f64::total_cmp);
        let n = included.len();
        let median = included[(n - 1) / 2];
        let mean = included.iter().sum::<f64>() / n as f64;
        let std = population_std(&included);
        let shrinking = included.iter().filter(|&&d| d < 1.0).count() as f64 / n as f64;
        let expanding = included.iter().filter(|&&d| d > 1.0).count() as f64 / n as f64;
        out.push(RoiJacobianStats {
            roi_id: id,
            voxel_count,
            median_detj: Some(median),
            mean_detj: Some(mean),
            std_detj: Some(std),
            frac_shrinking: Some(shrinking),
            frac_expanding: Some(expanding),
            folding_fraction: Some(folding),
        });
    }
    Ok(out)
}

/// Signed percent volume change implied by a Jacobian statistic: a voxel
/// whose volume scales by `s` has changed by `(s - 1) * 100` percent.
pub fn percent_volume_change(detj_stat: f64) -> Result<f64> {
    if !(detj_stat > 0.0) {
        return Err(Error::Domain(format!(
            "volume change needs a positive Jacobian statistic, got {detj_stat}"
        )));
    }
    Ok((detj_stat - 1.0) * 100.0)
}
