//! Lesion-level analysis: component labeling, overlap and Jacobian
//! statistics, intensity sub-segmentation, and longitudinal matching.

pub mod components;
pub mod fcm;
pub mod matching;
pub mod metrics;

pub use components::{connected_components, Connectivity, LesionSet};
pub use fcm::{fcm_cluster, fcm_subsegment, FcmParams, SubSegmentation, FCM_CLASSES};
pub use matching::{match_lesions, LesionMatch, MatchKind, PairDice};
pub use metrics::{
    dice, percent_volume_change, roi_jacobian_stats, sdlogj, RoiJacobianStats, SdLogJ,
};
