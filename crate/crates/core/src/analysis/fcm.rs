//! Fuzzy c-means sub-segmentation of tumour intensities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::volume::{LabelMask, Volume3};

/// Sub-segmentation always resolves three tissue classes, so cluster count is
/// validated rather than truly free.
pub const FCM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcmParams {
    pub c: usize,
    pub fuzziness: f64,
    /// Convergence threshold on the largest centre shift between iterations.
    pub tol: f64,
    pub max_iter: usize,
    /// Accepted for interface stability; the percentile initialization is
    /// deterministic, so the seed is currently unused.
    pub seed: u64,
}

impl Default for FcmParams {
    fn default() -> Self {
        FcmParams { c: FCM_CLASSES, fuzziness: 2.0, tol: 1e-5, max_iter: 300, seed: 0 }
    }
}

impl FcmParams {
    pub fn validate(&self) -> Result<()> {
        if self.c != FCM_CLASSES {
            return Err(Error::Config(format!(
                "sub-segmentation is three-class; c must be {FCM_CLASSES}, got {}",
                self.c
            )));
        }
        if !(self.fuzziness > 1.0) {
            return Err(Error::Config(format!(
                "fuzziness must exceed 1, got {}",
                self.fuzziness
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tumour voxels split into hypo/intermediate/hyper intensity classes.
///
/// `class_map` holds 0 outside the tumour and 1..=3 inside, ordered by
/// increasing centre intensity. `memberships` is per-voxel and sums to 1
/// (within float tolerance) on tumour voxels, and is all zero elsewhere.
/// `centers` is strictly ascending.
#[derive(Debug, Clone)]
pub struct SubSegmentation {
    pub class_map: LabelMask,
    pub memberships: Vec<[f64; FCM_CLASSES]>,
    pub centers: [f64; FCM_CLASSES],
}

/// One fuzzy c-means run on a plain list of intensities. Returns ascending
/// centres, per-sample memberships in centre order, and the objective
/// \sum_i \sum_k u_ik^m d_ik^2 recorded once per iteration (after the centre
/// update), which alternate minimization keeps non-increasing.
pub fn fcm_cluster(
    values: &[f64],
    params: &FcmParams,
) -> Result<([f64; FCM_CLASSES], Vec<[f64; FCM_CLASSES]>, Vec<f64>)> {
    params.validate()?;
    if values.is_empty() {
        return Err(Error::Domain("cannot cluster an empty intensity sample".into()));
    }
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < FCM_CLASSES {
        return Err(Error::Domain(format!(
            "only {} distinct intensities, need at least {FCM_CLASSES} to cluster",
            distinct.len()
        )));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pick = |v: &[f64], q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
    let mut centers = [pick(&sorted, 0.1), pick(&sorted, 0.5), pick(&sorted, 0.9)];
    if centers[0] >= centers[1] || centers[1] >= centers[2] {
        // heavy ties collapse raw percentiles; fall back to percentiles of
        // the distinct values, which the distinct-count check keeps apart
        centers = [pick(&distinct, 0.1), pick(&distinct, 0.5), pick(&distinct, 0.9)];
    }

    let exp = 1.0 / (params.fuzziness - 1.0);
    let m = params.fuzziness;
    let mut memberships = vec![[0.0; FCM_CLASSES]; values.len()];
    let mut objective = Vec::new();
    for _ in 0..params.max_iter {
        // membership update for fixed centres
        for (u, &x) in memberships.iter_mut().zip(values) {
            let d2 = [
                (x - centers[0]).powi(2),
                (x - centers[1]).powi(2),
                (x - centers[2]).powi(2),
            ];
            if let Some(hit) = d2.iter().position(|&d| d == 0.0) {
                *u = [0.0; FCM_CLASSES];
                u[hit] = 1.0;
                continue;
            }
            for k in 0..FCM_CLASSES {
                let denom: f64 = d2.iter().map(|&dj| (d2[k] / dj).powf(exp)).sum();
                u[k] = 1.0 / denom;
            }
        }
        // centre update for fixed memberships
        let mut num = [0.0; FCM_CLASSES];
        let mut den = [0.0; FCM_CLASSES];
        for (u, &x) in memberships.iter().zip(values) {
            for k in 0..FCM_CLASSES {
                let w = u[k].powf(m);
                num[k] += w * x;
                den[k] += w;
            }
        }
        let mut shift = 0.0f64;
        for k in 0..FCM_CLASSES {
            if den[k] > 0.0 {
                let c_new = num[k] / den[k];
                shift = shift.max((c_new - centers[k]).abs());
                centers[k] = c_new;
            }
        }
        let j: f64 = memberships
            .iter()
            .zip(values)
            .map(|(u, &x)| {
                (0..FCM_CLASSES)
                    .map(|k| u[k].powf(m) * (x - centers[k]).powi(2))
                    .sum::<f64>()
            })
            .sum();
        objective.push(j);
        if shift < params.tol {
            break;
        }
    }

    // order classes by centre intensity
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let centers = [centers[order[0]], centers[order[1]], centers[order[2]]];
    for u in &mut memberships {
        *u = [u[order[0]], u[order[1]], u[order[2]]];
    }
    Ok((centers, memberships, objective))
}

/// Split a tumour mask into three intensity classes by fuzzy c-means.
pub fn fcm_subsegment(
    image: &Volume3,
    tumour: &LabelMask,
    params: &FcmParams,
) -> Result<SubSegmentation> {
    params.validate()?;
    if image.grid != tumour.grid {
        return Err(Error::GridMismatch(format!(
            "image grid {:?} does not match tumour mask grid {:?}",
            image.grid.dims, tumour.grid.dims
        )));
    }
    let voxels: Vec<usize> = (0..tumour.labels.len())
        .filter(|&i| tumour.labels[i] != 0)
        .collect();
    if voxels.is_empty() {
        return Err(Error::Domain("tumour mask is empty".into()));
    }
    let values: Vec<f64> = voxels.iter().map(|&i| image.data[i]).collect();
    let (centers, u, _) = fcm_cluster(&values, params)?;

    let grid: &Grid3 = &image.grid;
    let mut class_map = LabelMask::zeros(grid.clone());
    let mut memberships = vec![[0.0; FCM_CLASSES]; grid.len()];
    for (&i, uk) in voxels.iter().zip(&u) {
        memberships[i] = *uk;
        let mut best = 0;
        for k in 1..FCM_CLASSES {
            if uk[k] > uk[best] {
                best = k;
            }
        }
        class_map.labels[i] = best as u32 + 1;
    }
    Ok(SubSegmentation { class_map, memberships, centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid3;
    use crate::volume::IntensityUnits;

    fn params() -> FcmParams {
        FcmParams::default()
    }

    #[test]
    fn param_validation() {
        assert!(FcmParams { c: 4, ..params() }.validate().is_err());
        assert!(FcmParams { fuzziness: 1.0, ..params() }.validate().is_err());
        assert!(FcmParams { tol: 0.0, ..params() }.validate().is_err());
        assert!(FcmParams { max_iter: 0, ..params() }.validate().is_err());
        assert!(params().validate().is_ok());
    }

    #[test]
    fn clean_plateaus_are_recovered_exactly() {
        // three well separated plateaus, 100 samples each
        let mut values = Vec::new();
        for _ in 0..100 {
            values.push(-100.0);
        }
        for _ in 0..100 {
            values.push(40.0);
        }
        for _ in 0..100 {
            values.push(300.0);
        }
        let (centers, u, obj) = fcm_cluster(&values, &params()).unwrap();
        assert!((centers[0] - -100.0).abs() < 1e-6, "{centers:?}");
        assert!((centers[1] - 40.0).abs() < 1e-6);
        assert!((centers[2] - 300.0).abs() < 1e-6);
        for (i, uk) in u.iter().enumerate() {
            let sum: f64 = uk.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "membership sum {sum} at {i}");
            let want = i / 100;
            let best = (0..3).max_by(|&a, &b| uk[a].total_cmp(&uk[b])).unwrap();
            assert_eq!(best, want, "sample {i} classified {best}");
        }
        for w in obj.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn objective_is_nonincreasing_on_noisy_data() {
        let mut s = 0xf00du64;
        let mut rand01 = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 10_000) as f64 / 10_000.0
        };
        let mut values = Vec::new();
        for k in 0..3 {
            let base = [-80.0, 30.0, 250.0][k];
            for _ in 0..200 {
                values.push(base + (rand01() - 0.5) * 40.0);
            }
        }
        let (_, u, obj) = fcm_cluster(&values, &params()).unwrap();
        assert!(obj.len() >= 2, "expected several iterations");
        for w in obj.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
        }
        for uk in &u {
            let sum: f64 = uk.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(uk.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn centre_hits_get_one_hot_membership() {
        // a sample exactly at a converged centre must be fully assigned to it
        let mut values = vec![0.0; 50];
        values.extend(std::iter::repeat_n(100.0, 50));
        values.extend(std::iter::repeat_n(200.0, 50));
        let (centers, u, _) = fcm_cluster(&values, &params()).unwrap();
        assert_eq!(centers, [0.0, 100.0, 200.0]);
        assert_eq!(u[0], [1.0, 0.0, 0.0]);
        assert_eq!(u[60], [0.0, 1.0, 0.0]);
        assert_eq!(u[120], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn too_few_distinct_intensities_is_an_error() {
        let values = vec![5.0; 100];
        assert!(matches!(fcm_cluster(&values, &params()), Err(Error::Domain(_))));
        let mut two = vec![1.0; 50];
        two.extend(std::iter::repeat_n(2.0, 50));
        assert!(matches!(fcm_cluster(&two, &params()), Err(Error::Domain(_))));
    }

    #[test]
    fn percentile_collision_falls_back_to_distinct_values() {
        // 97% of samples share one value, so raw 10/50/90 percentiles
        // coincide; the distinct-value fallback must still find 3 centres
        let mut values = vec![10.0; 970];
        values.extend(std::iter::repeat_n(-50.0, 15));
        values.extend(std::iter::repeat_n(90.0, 15));
        let (centers, _, _) = fcm_cluster(&values, &params()).unwrap();
        assert!(centers[0] < centers[1] && centers[1] < centers[2], "{centers:?}");
    }

    #[test]
    fn subsegment_maps_classes_back_onto_the_grid() {
        let g = Grid3::isotropic([6, 6, 6], 1.0).unwrap();
        let mut data = vec![0.0; g.len()];
        let mut labels = vec![0u32; g.len()];
        // tumour = x in 1..5, y,z in 2..4; intensity by x band
        for z in 2..4 {
            for y in 2..4 {
                for x in 1..5 {
                    let i = g.index(x, y, z);
                    labels[i] = 1;
                    data[i] = match x {
                        1 => -100.0,
                        2 | 3 => 40.0,
                        _ => 300.0,
                    };
                }
            }
        }
        let img = Volume3::new(g.clone(), data, IntensityUnits::Hu).unwrap();
        let tum = LabelMask::new(g.clone(), labels).unwrap();
        let seg = fcm_subsegment(&img, &tum, &params()).unwrap();
        assert!(seg.centers[0] < seg.centers[1] && seg.centers[1] < seg.centers[2]);
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let inside = (2..4).contains(&z) && (2..4).contains(&y) && (1..5).contains(&x);
                    let i = g.index(x, y, z);
                    if !inside {
                        assert_eq!(seg.class_map.labels[i], 0);
                        assert_eq!(seg.memberships[i], [0.0; 3]);
                    } else {
                        let want = match x {
                            1 => 1,
                            2 | 3 => 2,
                            _ => 3,
                        };
                        assert_eq!(seg.class_map.labels[i], want, "voxel {x},{y},{z}");
                        let sum: f64 = seg.memberships[i].iter().sum();
                        assert!((sum - 1.0).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn subsegment_rejects_empty_mask_and_grid_mismatch() {
        let g = Grid3::isotropic([4, 4, 4], 1.0).unwrap();
        let img = Volume3::constant(g.clone(), 0.0, IntensityUnits::Hu).unwrap();
        let empty = LabelMask::zeros(g.clone());
        assert!(matches!(fcm_subsegment(&img, &empty, &params()), Err(Error::Domain(_))));
        let other = LabelMask::zeros(Grid3::isotropic([5, 5, 5], 1.0).unwrap());
        assert!(matches!(
            fcm_subsegment(&img, &other, &params()),
            Err(Error::GridMismatch(_))
        ));
    }
}
