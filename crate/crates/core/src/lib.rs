//! Deformable 3D registration and Jacobian-based response quantification
//! for longitudinal CT.
//!
//! The crate registers a baseline/followup image pair in both directions
//! with a multiresolution instance optimizer, then derives local volume
//! change from the Jacobian determinant of the forward field: lesion-wise
//! medians, subregion breakdowns, and lesion correspondence (matched,
//! split, merged, disappeared, new) across the two time points.
//!
//! I/O is a deliberately small NIfTI-1 subset (little-endian, axis-aligned
//! single files) so that clinical volumes, label masks and displacement
//! fields round-trip bitwise through `f64`/`i32` payloads.

pub mod analysis;
pub mod error;
pub mod grid;
pub mod loss;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod registrar;
pub mod report;
pub mod smooth;
pub mod transform;
pub mod volume;

pub use analysis::{
    connected_components, dice, fcm_subsegment, match_lesions, percent_volume_change,
    roi_jacobian_stats, sdlogj, Connectivity, FcmParams, LesionMatch, LesionSet, MatchKind,
    RoiJacobianStats, SdLogJ, SubSegmentation,
};
pub use error::{Error, Result};
pub use phantom::{
    apply_deformation, make_phantom, AnalyticDeformation, Composition, LesionSpec, Phantom,
    PhantomSpec,
};
pub use pipeline::{
    make_phantom_pair, run_analyze, run_eval, run_phantom, run_register, AnalysisConfig,
    EvalConfig, IoConfig, PhantomCmdConfig, PipelineConfig, ReportFormat, SdlogjRegion,
};
pub use grid::Grid3;
pub use loss::{gradicon_reg, lncc_loss, loss_gradient, total_loss, FieldSide, LossBreakdown, LossConfig};
pub use report::{report_round, round_sig, ReportRow, ResponseReport, REPORT_CSV_HEADER};
pub use registrar::{
    downsample_op, optimize_unit, register, two_step, RegistrationConfig, RegistrationResult,
    RegistrationUnit, UnitTrace,
};
pub use transform::{
    compose, identity_field, jacobian_determinant, upsample_field, warp, warp_mask,
    DisplacementField, JacobianMap,
};
pub use volume::{downsample, resample_nearest, IntensityUnits, LabelMask, Volume3};
