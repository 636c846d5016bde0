//! Synthetic CT phantoms with known lesion geometry and analytic ground-truth
//! deformations, for end-to-end validation of the registration pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::transform::{jacobian_determinant, warp, DisplacementField};
use crate::volume::{IntensityUnits, LabelMask, Volume3};

/// Tissue-class intensities assigned inside lesions.
pub const HYPO_HU: f64 = -100.0;
pub const INTERMEDIATE_HU: f64 = 40.0;
pub const HYPER_HU: f64 = 300.0;

/// Subregion labels written into the truth mask.
pub const CLASS_HYPO: u32 = 1;
pub const CLASS_INTERMEDIATE: u32 = 2;
pub const CLASS_HYPER: u32 = 3;

const NUM_BLOBS: usize = 12;
const BLOB_AMPLITUDE_HU: f64 = 120.0;

/// Volume fractions of the three tissue classes inside one lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub hypo: f64,
    pub intermediate: f64,
    pub hyper: f64,
}

impl Default for Composition {
    fn default() -> Self {
        Composition { hypo: 0.2, intermediate: 0.6, hyper: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    #[serde(default = "default_site")]
    pub site: String,
    #[serde(default)]
    pub composition: Composition,
}

fn default_site() -> String {
    "unspecified".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: Grid3,
    pub lesions: Vec<LesionSpec>,
    /// Standard deviation of additive Gaussian intensity noise, in HU.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: Grid3::isotropic([64, 64, 64], 1.0).expect("static dims"),
            lesions: vec![LesionSpec {
                center_mm: [32.0, 32.0, 32.0],
                radius_mm: 8.0,
                site: default_site(),
                composition: Composition::default(),
            }],
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let grid = Grid3::new(self.grid.dims, self.grid.spacing, self.grid.origin)?;
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if l.center_mm.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("lesion {i} has a non-finite centre")));
            }
            if !l.radius_mm.is_finite() || l.radius_mm <= 0.0 {
                return Err(Error::Config(format!(
                    "lesion {i} radius must be positive, got {}",
                    l.radius_mm
                )));
            }
            let c = &l.composition;
            for (name, f) in [("hypo", c.hypo), ("intermediate", c.intermediate), ("hyper", c.hyper)] {
                if !f.is_finite() || f < 0.0 {
                    return Err(Error::Config(format!(
                        "lesion {i} {name} fraction must be non-negative, got {f}"
                    )));
                }
            }
            let sum = c.hypo + c.intermediate + c.hyper;
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "lesion {i} composition fractions sum to {sum}, expected 1"
                )));
            }
            let cv = grid.world_to_voxel(l.center_mm);
            for axis in 0..3 {
                let r = l.radius_mm / grid.spacing[axis];
                if r <= 2.0 {
                    return Err(Error::Config(format!(
                        "lesion {i} radius is {r:.2} voxels along axis {axis}, must exceed 2"
                    )));
                }
                if cv[axis] - r < 0.0 || cv[axis] + r > (grid.dims[axis] - 1) as f64 {
                    return Err(Error::Config(format!("lesion {i} extends outside the grid")));
                }
            }
        }
        Ok(())
    }
}

/// A generated phantom: the image, the binary-per-lesion tumour mask (voxel
/// value = lesion index + 1), and the tissue-class truth labels.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume3,
    pub tumour: LabelMask,
    pub subregions: LabelMask,
}

/// Generate a phantom image with known lesions.
///
/// Background is 0 HU modulated by a fixed number of smooth Gaussian blobs
/// standing in for anatomy. Each lesion is an ellipsoid in voxel space (a
/// sphere in world space): a hypointense core sized to its volume fraction,
/// an intermediate shell, and hyperintense flecks scattered in the shell
/// until the hyper volume quota is met. Gaussian noise is added last, voxel
/// by voxel in index order, so a given seed yields a bitwise-identical
/// phantom at any thread count.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = &spec.grid;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    // anatomy blobs: parameters first (sequential draws), evaluation second
    let min_dim = *grid.dims.iter().min().expect("3 axes") as f64;
    let sigma_hi = (min_dim / 4.0).max(2.5);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..NUM_BLOBS)
        .map(|_| {
            let c = [
                rng.random_range(0.0..(grid.dims[0] - 1) as f64),
                rng.random_range(0.0..(grid.dims[1] - 1) as f64),
                rng.random_range(0.0..(grid.dims[2] - 1) as f64),
            ];
            let sigma = rng.random_range(2.0..sigma_hi);
            let amp = rng.random_range(-BLOB_AMPLITUDE_HU..BLOB_AMPLITUDE_HU);
            (c, sigma, amp)
        })
        .collect();
    let mut data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let p = [x as f64, y as f64, z as f64];
            blobs
                .iter()
                .map(|(c, sigma, amp)| {
                    let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum()
        })
        .collect();

    let mut tumour = LabelMask::zeros(grid.clone());
    let mut subregions = LabelMask::zeros(grid.clone());
    for (li, lesion) in spec.lesions.iter().enumerate() {
        let cv = grid.world_to_voxel(lesion.center_mm);
        let r = [
            lesion.radius_mm / grid.spacing[0],
            lesion.radius_mm / grid.spacing[1],
            lesion.radius_mm / grid.spacing[2],
        ];
        let core_rho = lesion.composition.hypo.cbrt();
        let mut inside = Vec::new();
        let mut shell = Vec::new();
        // bounding box keeps the scan local
        let lo = |a: usize| ((cv[a] - r[a]).floor().max(0.0)) as usize;
        let hi = |a: usize| ((cv[a] + r[a]).ceil() as usize).min(grid.dims[a] - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let rho2 = ((x as f64 - cv[0]) / r[0]).powi(2)
                        + ((y as f64 - cv[1]) / r[1]).powi(2)
                        + ((z as f64 - cv[2]) / r[2]).powi(2);
                    if rho2 > 1.0 {
                        continue;
                    }
                    let i = grid.index(x, y, z);
                    inside.push(i);
                    tumour.labels[i] = li as u32 + 1;
                    if lesion.composition.hypo > 0.0 && rho2.sqrt() <= core_rho {
                        subregions.labels[i] = CLASS_HYPO;
                    } else {
                        subregions.labels[i] = CLASS_INTERMEDIATE;
                        shell.push(i);
                    }
                }
            }
        }
        // hyper flecks: random seeds in the shell grown over axis neighbours
        let quota = ((lesion.composition.hyper * inside.len() as f64).round() as usize)
            .min(shell.len());
        let mut placed = 0usize;
        let mut attempts = 0usize;
        while placed < quota && attempts < 20 * quota.max(1) {
            attempts += 1;
            let v = shell[rng.random_range(0..shell.len())];
            if subregions.labels[v] == CLASS_HYPER {
                continue;
            }
            subregions.labels[v] = CLASS_HYPER;
            placed += 1;
            let (x, y, z) = grid.coords(v);
            for (dx, dy, dz) in [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                if placed >= quota {
                    break;
                }
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if nx >= grid.dims[0] || ny >= grid.dims[1] || nz >= grid.dims[2] {
                    continue;
                }
                let n = grid.index(nx, ny, nz);
                if subregions.labels[n] == CLASS_INTERMEDIATE && tumour.labels[n] == li as u32 + 1 {
                    subregions.labels[n] = CLASS_HYPER;
                    placed += 1;
                }
            }
        }
        if placed < quota {
            // rare: random placement kept colliding, top up deterministically
            for &v in &shell {
                if placed == quota {
                    break;
                }
                if subregions.labels[v] != CLASS_HYPER {
                    subregions.labels[v] = CLASS_HYPER;
                    placed += 1;
                }
            }
        }
        for &i in &inside {
            data[i] = match subregions.labels[i] {
                CLASS_HYPO => HYPO_HU,
                CLASS_HYPER => HYPER_HU,
                _ => INTERMEDIATE_HU,
            };
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }

    Ok(Phantom {
        image: Volume3::new(grid.clone(), data, IntensityUnits::Hu)?,
        tumour,
        subregions,
    })
}

/// Closed-form deformations with known Jacobians, used as registration
/// ground truth. All quantities are in voxel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticDeformation {
    /// Rigid shift: u(x) = t.
    Translation { t: [f64; 3] },
    /// Affine about the grid centre c: u(x) = A (x - c). The Frobenius norm
    /// of A must stay below 0.5, which keeps det(I + A) positive.
    Linear { a: [[f64; 3]; 3] },
    /// Uniform contraction of a spherical core by factor alpha, decaying to
    /// zero across a rim of the given width with a cubic smoothstep:
    /// u(x) = -alpha * g(r) * (x - center). Inside the core detJ is exactly
    /// (1 - alpha)^3.
    RadialContraction {
        center: [f64; 3],
        core_radius: f64,
        rim_width: f64,
        alpha: f64,
    },
}

impl AnalyticDeformation {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticDeformation::Translation { t } => {
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("translation must be finite".into()));
                }
            }
            AnalyticDeformation::Linear { a } => {
                let frob: f64 = a
                    .iter()
                    .flatten()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if !frob.is_finite() || frob >= 0.5 {
                    return Err(Error::Config(format!(
                        "linear deformation norm {frob:.3} must be below 0.5"
                    )));
                }
            }
            AnalyticDeformation::RadialContraction { center, core_radius, rim_width, alpha } => {
                if center.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("contraction centre must be finite".into()));
                }
                if !(*core_radius > 0.0) || !(*rim_width > 0.0) {
                    return Err(Error::Config(format!(
                        "core radius {core_radius} and rim width {rim_width} must be positive"
                    )));
                }
                if !alpha.is_finite() || *alpha >= 1.0 {
                    return Err(Error::Config(format!(
                        "contraction factor {alpha} must be finite and below 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Displacement at a voxel coordinate.
    pub fn displacement_at(&self, x: [f64; 3], grid: &Grid3) -> [f64; 3] {
        match self {
            AnalyticDeformation::Translation { t } => *t,
            AnalyticDeformation::Linear { a } => {
                let c = [
                    (grid.dims[0] - 1) as f64 / 2.0,
                    (grid.dims[1] - 1) as f64 / 2.0,
                    (grid.dims[2] - 1) as f64 / 2.0,
                ];
                let d = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
                [
                    a[0][0] * d[0] + a[0][1] * d[1] + a[0][2] * d[2],
                    a[1][0] * d[0] + a[1][1] * d[1] + a[1][2] * d[2],
                    a[2][0] * d[0] + a[2][1] * d[1] + a[2][2] * d[2],
                ]
            }
            AnalyticDeformation::RadialContraction { center, core_radius, rim_width, alpha } => {
                let d = [x[0] - center[0], x[1] - center[1], x[2] - center[2]];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let g = if r <= *core_radius {
                    1.0
                } else if r >= core_radius + rim_width {
                    0.0
                } else {
                    let s = (r - core_radius) / rim_width;
                    1.0 - s * s * (3.0 - 2.0 * s)
                };
                [-alpha * g * d[0], -alpha * g * d[1], -alpha * g * d[2]]
            }
        }
    }

    /// Evaluate the deformation at every voxel of a grid.
    pub fn sample(&self, grid: &Grid3) -> Result<DisplacementField> {
        self.validate()?;
        let u: Vec<[f64; 3]> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = grid.coords(i);
                self.displacement_at([x as f64, y as f64, z as f64], grid)
            })
            .collect();
        Ok(DisplacementField { grid: grid.clone(), u })
    }
}

/// Warp a volume by an analytic deformation, returning the warped image and
/// the sampled ground-truth field. Errors if the sampled field folds anywhere
/// (non-positive Jacobian determinant), since such truth would be unusable.
pub fn apply_deformation(
    vol: &Volume3,
    d: &AnalyticDeformation,
) -> Result<(Volume3, DisplacementField)> {
    let truth = d.sample(&vol.grid)?;
    let jac = jacobian_determinant(&truth);
    if let Some(i) = jac.det.iter().position(|&v| v <= 0.0) {
        return Err(Error::Domain(format!(
            "deformation folds at voxel {i} (detJ = {})",
            jac.det[i]
        )));
    }
    let warped = warp(vol, &truth)?;
    Ok((warped, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(lesions: Vec<LesionSpec>, noise: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid: Grid3::isotropic([64, 64, 64], 1.0).unwrap(),
            lesions,
            noise_sigma: noise,
            seed,
        }
    }

    fn central_lesion(radius_mm: f64, comp: Composition) -> LesionSpec {
        LesionSpec {
            center_mm: [32.0, 32.0, 32.0],
            radius_mm,
            site: "lung".into(),
            composition: comp,
        }
    }

    #[test]
    fn spec_validation_catches_bad_lesions() {
        let mut s = spec_with(vec![central_lesion(8.0, Composition::default())], 0.0, 1);
        assert!(s.validate().is_ok());
        s.lesions[0].composition.hyper = 0.5;
        assert!(matches!(s.validate(), Err(Error::Config(_))), "fractions off");
        s.lesions[0].composition.hyper = 0.2;
        s.lesions[0].radius_mm = 1.5;
        assert!(matches!(s.validate(), Err(Error::Config(_))), "too small");
        s.lesions[0].radius_mm = 8.0;
        s.lesions[0].center_mm = [3.0, 32.0, 32.0];
        assert!(matches!(s.validate(), Err(Error::Config(_))), "out of grid");
        s.lesions[0].center_mm = [32.0; 3];
        s.noise_sigma = -1.0;
        assert!(matches!(s.validate(), Err(Error::Config(_))), "negative noise");
    }

    #[test]
    fn empty_lesion_list_gives_background_only() {
        let p = make_phantom(&spec_with(vec![], 0.0, 7)).unwrap();
        assert_eq!(p.tumour.count_nonzero(), 0);
        assert_eq!(p.subregions.count_nonzero(), 0);
        assert_eq!(p.image.units, IntensityUnits::Hu);
    }

    #[test]
    fn sphere_voxel_count_matches_its_volume() {
        // 5 mm radius on a 1 mm grid: 4/3 pi 125 ~ 524 voxels
        let p = make_phantom(&spec_with(vec![central_lesion(5.0, Composition::default())], 0.0, 3))
            .unwrap();
        let n = p.tumour.count_nonzero() as f64;
        assert!((n - 524.0).abs() <= 52.4, "count {n}");
    }

    #[test]
    fn composition_fractions_are_respected() {
        let comp = Composition { hypo: 0.3, intermediate: 0.5, hyper: 0.2 };
        let p = make_phantom(&spec_with(vec![central_lesion(10.0, comp)], 0.0, 11)).unwrap();
        let total = p.tumour.count_nonzero() as f64;
        let hypo = p.subregions.count(CLASS_HYPO) as f64;
        let hyper = p.subregions.count(CLASS_HYPER) as f64;
        // the core is discretized, so allow generous slack there
        assert!((hypo / total - 0.3).abs() < 0.08, "hypo fraction {}", hypo / total);
        // the fleck quota is met exactly when the shell has room
        assert_eq!(hyper, (0.2 * total).round());
    }

    #[test]
    fn subregions_partition_the_tumour() {
        let p = make_phantom(&spec_with(
            vec![central_lesion(8.0, Composition::default())],
            2.0,
            5,
        ))
        .unwrap();
        for i in 0..p.tumour.labels.len() {
            assert_eq!(p.tumour.labels[i] != 0, p.subregions.labels[i] != 0, "voxel {i}");
            assert!(p.subregions.labels[i] <= 3);
        }
    }

    #[test]
    fn noiseless_lesion_voxels_carry_class_intensities() {
        let p = make_phantom(&spec_with(vec![central_lesion(8.0, Composition::default())], 0.0, 2))
            .unwrap();
        for i in 0..p.tumour.labels.len() {
            if p.tumour.labels[i] == 0 {
                continue;
            }
            let want = match p.subregions.labels[i] {
                CLASS_HYPO => HYPO_HU,
                CLASS_HYPER => HYPER_HU,
                _ => INTERMEDIATE_HU,
            };
            assert_eq!(p.image.data[i], want);
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_seeds_differ() {
        let spec = spec_with(vec![central_lesion(8.0, Composition::default())], 2.5, 42);
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.tumour.labels, b.tumour.labels);
        assert_eq!(a.subregions.labels, b.subregions.labels);
        let mut other = spec.clone();
        other.seed = 43;
        let c = make_phantom(&other).unwrap();
        assert_ne!(a.image.data, c.image.data);
    }

    #[test]
    fn translation_truth_is_exact_with_unit_jacobian() {
        let g = Grid3::isotropic([12, 12, 12], 1.0).unwrap();
        let d = AnalyticDeformation::Translation { t: [1.5, -2.0, 0.25] };
        let f = d.sample(&g).unwrap();
        assert!(f.u.iter().all(|u| *u == [1.5, -2.0, 0.25]));
        let jac = jacobian_determinant(&f);
        assert!(jac.det.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_truth_has_constant_determinant() {
        let g = Grid3::isotropic([16, 16, 16], 1.0).unwrap();
        let a = [[0.1, 0.02, 0.0], [0.0, -0.05, 0.01], [0.03, 0.0, 0.08]];
        let d = AnalyticDeformation::Linear { a };
        let f = d.sample(&g).unwrap();
        let jac = jacobian_determinant(&f);
        // det(I + A), expanded by hand for the 3x3 above
        let m = [
            [1.0 + a[0][0], a[0][1], a[0][2]],
            [a[1][0], 1.0 + a[1][1], a[1][2]],
            [a[2][0], a[2][1], 1.0 + a[2][2]],
        ];
        let expect = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        for &v in &jac.det {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn linear_norm_bound_is_enforced() {
        let d = AnalyticDeformation::Linear { a: [[0.5, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]] };
        assert!(d.validate().is_err());
    }

    #[test]
    fn radial_contraction_core_determinant() {
        let g = Grid3::isotropic([32, 32, 32], 1.0).unwrap();
        let d = AnalyticDeformation::RadialContraction {
            center: [15.5, 15.5, 15.5],
            core_radius: 6.0,
            rim_width: 5.0,
            alpha: 0.2,
        };
        let f = d.sample(&g).unwrap();
        let jac = jacobian_determinant(&f);
        let mut checked = 0;
        for i in 0..g.len() {
            let (x, y, z) = g.coords(i);
            let r = ((x as f64 - 15.5).powi(2) + (y as f64 - 15.5).powi(2) + (z as f64 - 15.5).powi(2))
                .sqrt();
            if r <= 4.5 {
                // all stencil neighbours stay inside the core: u is affine
                // there, so the central difference is exact
                assert!((jac.det[i] - 0.512).abs() < 1e-3, "detJ {} at r {r}", jac.det[i]);
                checked += 1;
            } else if r >= 13.0 {
                assert!((jac.det[i] - 1.0).abs() < 1e-12);
            }
        }
        assert!(checked > 100, "core sample too small ({checked})");
    }

    #[test]
    fn warped_lesion_volume_ratio_matches_core_determinant() {
        // the contraction core holds the whole lesion, and its preimage under
        // the pull-back warp too, so voxel counting reproduces the analytic
        // volume change: baseline voxels / warped voxels = (1 - alpha)^3.
        // The lesion is sized so nearest-neighbour shell fuzz stays small.
        let spec = spec_with(vec![central_lesion(10.0, Composition::default())], 0.0, 11);
        let p = make_phantom(&spec).unwrap();
        let d = AnalyticDeformation::RadialContraction {
            center: [32.0, 32.0, 32.0],
            core_radius: 14.0,
            rim_width: 10.0,
            alpha: 0.2,
        };
        let truth = d.sample(&p.image.grid).unwrap();
        let warped = crate::transform::warp_mask(&p.tumour, &truth).unwrap();
        let ratio = p.tumour.count_nonzero() as f64 / warped.count_nonzero() as f64;
        let expect = (1.0 - 0.2f64).powi(3);
        assert!(
            (ratio - expect).abs() / expect < 0.05,
            "volume ratio {ratio:.4} vs detJ {expect:.4}"
        );
    }

    #[test]
    fn folding_deformation_is_rejected() {
        // a strong expansion over a thin rim pushes core-edge material past
        // the stationary outside, so radii cross and the field folds
        let g = Grid3::isotropic([24, 24, 24], 1.0).unwrap();
        let v = Volume3::constant(g.clone(), 0.0, IntensityUnits::Dimensionless).unwrap();
        let d = AnalyticDeformation::RadialContraction {
            center: [11.5, 11.5, 11.5],
            core_radius: 6.0,
            rim_width: 1.0,
            alpha: -0.9,
        };
        assert!(matches!(apply_deformation(&v, &d), Err(Error::Domain(_))));
    }

    #[test]
    fn apply_deformation_returns_matching_truth() {
        let spec = spec_with(vec![central_lesion(8.0, Composition::default())], 0.0, 9);
        let p = make_phantom(&spec).unwrap();
        let d = AnalyticDeformation::Translation { t: [2.0, 0.0, 0.0] };
        let (warped, truth) = apply_deformation(&p.image, &d).unwrap();
        assert_eq!(warped.grid, p.image.grid);
        assert_eq!(truth.u, d.sample(&p.image.grid).unwrap().u);
        // content moved: a voxel 2 left of the old center now reads the
        // center intensity
        assert_eq!(warped.at(30, 32, 32), p.image.at(32, 32, 32));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = spec_with(vec![central_lesion(6.0, Composition::default())], 1.0, 77);
        let text = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        // unknown keys are rejected so config typos cannot pass silently
        let bad = text.replace("\"noise_sigma\"", "\"noise_sgima\"");
        assert!(serde_json::from_str::<PhantomSpec>(&bad).is_err());
    }
}
