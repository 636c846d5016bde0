//! File-to-file pipeline drivers behind the command-line interface.
//!
//! Each driver validates its configuration and inputs completely before
//! writing anything, computes, then writes all outputs into the configured
//! output directory along with a `config_echo.json` that has every default
//! materialized. Given the same inputs, seed and thread count, reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    connected_components, dice, fcm_subsegment, match_lesions, percent_volume_change,
    roi_jacobian_stats, sdlogj, Connectivity, FcmParams, LesionSet,
};
use crate::error::{Error, Result};
use crate::nifti;
use crate::phantom::{apply_deformation, make_phantom, AnalyticDeformation, PhantomSpec};
use crate::registrar::{register, RegistrationConfig, RegistrationResult, UnitTrace};
use crate::report::{report_round, write_csv, ReportRow, ResponseReport};
use crate::transform::{jacobian_determinant, warp_mask, DisplacementField, JacobianMap};
use crate::volume::{IntensityUnits, LabelMask, Volume3};

/// Region over which the field-wide SDlogJ is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdlogjRegion {
    Whole,
    Tumour,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub fcm: FcmParams,
    /// Minimum Dice overlap for two lesions to be considered corresponding.
    pub min_dice: f64,
    pub sdlogj_region: SdlogjRegion,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            fcm: FcmParams::default(),
            min_dice: 0.1,
            sdlogj_region: SdlogjRegion::Whole,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        self.fcm.validate()?;
        if !(0.0..=1.0).contains(&self.min_dice) {
            return Err(Error::Config(format!(
                "min_dice must be within [0, 1], got {}",
                self.min_dice
            )));
        }
        Ok(())
    }
}

/// One organ delineated at both time points, for propagation accuracy checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganMaskPair {
    pub name: String,
    pub baseline: PathBuf,
    pub followup: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub baseline_image: PathBuf,
    pub followup_image: PathBuf,
    pub baseline_tumour: PathBuf,
    pub followup_tumour: PathBuf,
    #[serde(default)]
    pub organ_masks: Vec<OrganMaskPair>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    pub io: IoConfig,
    #[serde(default = "default_report_formats")]
    pub report_formats: Vec<ReportFormat>,
}

fn default_report_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Json]
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn require_input(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        self.analysis.validate()?;
        if self.report_formats.is_empty() {
            return Err(Error::Config("report_formats must not be empty".into()));
        }
        Ok(())
    }

    /// Every input file the pipeline reads must exist before any output is
    /// written.
    pub fn check_inputs(&self) -> Result<()> {
        require_input(&self.io.baseline_image, "baseline image")?;
        require_input(&self.io.followup_image, "follow-up image")?;
        require_input(&self.io.baseline_tumour, "baseline tumour mask")?;
        require_input(&self.io.followup_tumour, "follow-up tumour mask")?;
        for organ in &self.io.organ_masks {
            require_input(&organ.baseline, &format!("organ mask '{}' baseline", organ.name))?;
            require_input(&organ.followup, &format!("organ mask '{}' follow-up", organ.name))?;
        }
        Ok(())
    }
}

/// Registration trace persisted next to the fields: the loss history plus
/// the wall-clock runtime the report later echoes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTraceFile {
    pub runtime_seconds: f64,
    pub units: Vec<UnitTrace>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numeric(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))
}

fn binarize(mask: &LabelMask) -> LabelMask {
    LabelMask {
        grid: mask.grid.clone(),
        labels: mask.labels.iter().map(|&l| (l != 0) as u32).collect(),
    }
}

fn require_same_grid(a: &crate::grid::Grid3, b: &crate::grid::Grid3, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

struct LoadedInputs {
    baseline: Volume3,
    followup: Volume3,
    base_tumour: LabelMask,
    follow_tumour: LabelMask,
    organs: Vec<(String, LabelMask, LabelMask)>,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<LoadedInputs> {
    let baseline = nifti::load_volume(&cfg.io.baseline_image)?;
    let followup = nifti::load_volume(&cfg.io.followup_image)?;
    let base_tumour = nifti::load_mask(&cfg.io.baseline_tumour)?;
    let follow_tumour = nifti::load_mask(&cfg.io.followup_tumour)?;
    require_same_grid(&baseline.grid, &followup.grid, "baseline vs follow-up image")?;
    require_same_grid(&baseline.grid, &base_tumour.grid, "image vs baseline tumour mask")?;
    require_same_grid(&baseline.grid, &follow_tumour.grid, "image vs follow-up tumour mask")?;
    let mut organs = Vec::new();
    for organ in &cfg.io.organ_masks {
        let b = nifti::load_mask(&organ.baseline)?;
        let f = nifti::load_mask(&organ.followup)?;
        require_same_grid(&baseline.grid, &b.grid, "image vs organ mask")?;
        require_same_grid(&baseline.grid, &f.grid, "image vs organ mask")?;
        organs.push((organ.name.clone(), b, f));
    }
    Ok(LoadedInputs { baseline, followup, base_tumour, follow_tumour, organs })
}

/// Register the configured image pair and write fields, Jacobian map, loss
/// trace and config echo into the output directory.
pub fn run_register(cfg: &PipelineConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let inputs = load_inputs(cfg)?;

    let result = register(&inputs.baseline, &inputs.followup, &cfg.registration)?;
    let jac = jacobian_determinant(&result.field_ab);
    let jac_vol = Volume3::new(jac.grid.clone(), jac.det.clone(), IntensityUnits::Dimensionless)?;

    let out = &cfg.io.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    nifti::save_field(out.join("field_ab.nii.gz"), &result.field_ab)?;
    nifti::save_field(out.join("field_ba.nii.gz"), &result.field_ba)?;
    nifti::save_volume(out.join("jacobian.nii.gz"), &jac_vol)?;
    write_json(
        &out.join("loss_trace.json"),
        &LossTraceFile {
            runtime_seconds: result.runtime_seconds,
            units: result.loss_trace.clone(),
        },
    )?;
    write_json(&out.join("config_echo.json"), cfg)?;
    Ok(result)
}

const SUBREGION_NAMES: [&str; 3] = ["hypo", "intermediate", "hyper"];

fn lesion_rows(
    jac: &JacobianMap,
    base_set: &LesionSet,
    kind_of: &BTreeMap<u32, &'static str>,
    subseg_base: &LabelMask,
) -> Result<Vec<ReportRow>> {
    let ids = base_set.ids();
    let stats = roi_jacobian_stats(jac, &base_set.mask, &ids)?;
    let mut rows = Vec::new();
    for s in &stats {
        let id = s.roi_id;
        let median = s.median_detj.map(report_round);
        let pct = match median {
            Some(m) => Some(report_round(percent_volume_change(m)?)),
            None => None,
        };
        rows.push(ReportRow {
            lesion_id: Some(id),
            site: base_set.site_of.get(&id).cloned(),
            baseline_mm3: base_set.volumes_mm3.get(&id).map(|&v| report_round(v)),
            match_kind: kind_of.get(&id).map(|k| k.to_string()),
            median_detj: median,
            mean_detj: s.mean_detj.map(report_round),
            pct_change: pct,
            ..ReportRow::default()
        });

        // subregion rows: this lesion's voxels relabeled by tissue class
        let class_in_lesion = LabelMask {
            grid: base_set.mask.grid.clone(),
            labels: base_set
                .mask
                .labels
                .iter()
                .zip(&subseg_base.labels)
                .map(|(&l, &c)| if l == id { c } else { 0 })
                .collect(),
        };
        let sub_stats = roi_jacobian_stats(jac, &class_in_lesion, &[1, 2, 3])?;
        for (k, ss) in sub_stats.iter().enumerate() {
            let median = ss.median_detj.map(report_round);
            let pct = match median {
                Some(m) => Some(report_round(percent_volume_change(m)?)),
                None => None,
            };
            rows.push(ReportRow {
                lesion_id: Some(id),
                site: base_set.site_of.get(&id).cloned(),
                subregion: Some(SUBREGION_NAMES[k].to_string()),
                median_detj: median,
                mean_detj: ss.mean_detj.map(report_round),
                pct_change: pct,
                ..ReportRow::default()
            });
        }
    }
    Ok(rows)
}

/// Analyze a registered pair: lesion statistics, sub-segmentation, matching,
/// overlap metrics, and the report in the configured formats.
pub fn run_analyze(cfg: &PipelineConfig) -> Result<ResponseReport> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let inputs = load_inputs(cfg)?;
    let out = &cfg.io.out_dir;

    let field_ab = nifti::load_field(&out.join("field_ab.nii.gz"))?;
    let field_ba = nifti::load_field(&out.join("field_ba.nii.gz"))?;
    require_same_grid(&inputs.baseline.grid, &field_ab.grid, "image vs forward field")?;
    require_same_grid(&inputs.baseline.grid, &field_ba.grid, "image vs backward field")?;
    let trace: LossTraceFile = read_json(&out.join("loss_trace.json"))?;

    // the Jacobian map is recomputed from the persisted field, not trusted
    // from disk, so analyze depends only on the fields
    let jac = jacobian_determinant(&field_ab);

    let base_set = connected_components(&inputs.base_tumour, Connectivity::TwentySix);
    let follow_set = connected_components(&inputs.follow_tumour, Connectivity::TwentySix);
    if base_set.ids().is_empty() {
        return Err(Error::Domain("baseline tumour mask is empty".into()));
    }

    let subseg_base = fcm_subsegment(&inputs.baseline, &inputs.base_tumour, &cfg.analysis.fcm)?;
    let subseg_follow = fcm_subsegment(&inputs.followup, &inputs.follow_tumour, &cfg.analysis.fcm)?;

    let matches = match_lesions(&base_set, &follow_set, &field_ba, cfg.analysis.min_dice)?;
    let mut kind_of: BTreeMap<u32, &'static str> = BTreeMap::new();
    for m in &matches {
        for &id in &m.baseline_ids {
            kind_of.insert(id, m.kind.as_str());
        }
    }

    let mut rows = lesion_rows(&jac, &base_set, &kind_of, &subseg_base.class_map)?;

    // overlap rows: tumour mask, then each organ
    let base_bin = binarize(&inputs.base_tumour);
    let follow_bin = binarize(&inputs.follow_tumour);
    let warped_follow = warp_mask(&follow_bin, &field_ba)?;
    rows.push(ReportRow {
        site: Some("tumour".into()),
        dsc_pre: Some(report_round(dice(&base_bin, &follow_bin, 1)?)),
        dsc_post: Some(report_round(dice(&base_bin, &warped_follow, 1)?)),
        ..ReportRow::default()
    });
    for (name, b, f) in &inputs.organs {
        let (bb, fb) = (binarize(b), binarize(f));
        let wf = warp_mask(&fb, &field_ba)?;
        rows.push(ReportRow {
            site: Some(name.clone()),
            dsc_pre: Some(report_round(dice(&bb, &fb, 1)?)),
            dsc_post: Some(report_round(dice(&bb, &wf, 1)?)),
            ..ReportRow::default()
        });
    }

    // summary row: field-wide quality numbers
    let sd = match cfg.analysis.sdlogj_region {
        SdlogjRegion::Whole => sdlogj(&jac, None)?,
        SdlogjRegion::Tumour => sdlogj(&jac, Some(&base_bin))?,
    };
    let folding = jac.folding_count() as f64 / jac.det.len() as f64;
    rows.push(ReportRow {
        sdlogj: Some(report_round(sd.value)),
        folding_frac: Some(report_round(folding)),
        runtime_s: Some(report_round(trace.runtime_seconds)),
        ..ReportRow::default()
    });

    let report = ResponseReport {
        config: serde_json::to_value(cfg)
            .map_err(|e| Error::Numeric(format!("config echo: {e}")))?,
        rows,
    };

    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    if cfg.report_formats.contains(&ReportFormat::Csv) {
        let path = out.join("report.csv");
        let file = fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        write_csv(&report.rows, file)?;
    }
    if cfg.report_formats.contains(&ReportFormat::Json) {
        write_json(&out.join("report.json"), &report)?;
    }
    nifti::save_mask(out.join("subseg_baseline.nii.gz"), &subseg_base.class_map)?;
    nifti::save_mask(out.join("subseg_followup.nii.gz"), &subseg_follow.class_map)?;
    write_json(&out.join("lesion_matches.json"), &matches)?;
    write_json(&out.join("config_echo.json"), cfg)?;
    Ok(report)
}

/// Phantom generation config: the phantom itself plus the analytic
/// deformation that produces the follow-up time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomCmdConfig {
    pub phantom: PhantomSpec,
    pub deformation: AnalyticDeformation,
}

impl Default for PhantomCmdConfig {
    fn default() -> Self {
        PhantomCmdConfig {
            phantom: PhantomSpec::default(),
            deformation: AnalyticDeformation::Translation { t: [3.0, 0.0, 0.0] },
        }
    }
}

/// Everything a generated phantom pair consists of.
#[derive(Debug, Clone)]
pub struct PhantomOutputs {
    pub baseline: Volume3,
    pub followup: Volume3,
    pub tumour_baseline: LabelMask,
    pub tumour_followup: LabelMask,
    pub subregions_baseline: LabelMask,
    pub truth_field: DisplacementField,
}

/// Generate a phantom pair in memory.
pub fn make_phantom_pair(cfg: &PhantomCmdConfig) -> Result<PhantomOutputs> {
    let phantom = make_phantom(&cfg.phantom)?;
    let (followup, truth) = apply_deformation(&phantom.image, &cfg.deformation)?;
    let tumour_followup = warp_mask(&phantom.tumour, &truth)?;
    Ok(PhantomOutputs {
        baseline: phantom.image,
        followup,
        tumour_baseline: phantom.tumour,
        tumour_followup,
        subregions_baseline: phantom.subregions,
        truth_field: truth,
    })
}

/// Generate a phantom pair and write it as NIfTI plus a config echo.
pub fn run_phantom(cfg: &PhantomCmdConfig, out_dir: &Path) -> Result<PhantomOutputs> {
    let outputs = make_phantom_pair(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::Io { path: out_dir.into(), source: e })?;
    nifti::save_volume(out_dir.join("baseline.nii.gz"), &outputs.baseline)?;
    nifti::save_volume(out_dir.join("followup.nii.gz"), &outputs.followup)?;
    nifti::save_mask(out_dir.join("tumour_baseline.nii.gz"), &outputs.tumour_baseline)?;
    nifti::save_mask(out_dir.join("tumour_followup.nii.gz"), &outputs.tumour_followup)?;
    nifti::save_mask(out_dir.join("subregions_baseline.nii.gz"), &outputs.subregions_baseline)?;
    nifti::save_field(out_dir.join("truth_field.nii.gz"), &outputs.truth_field)?;
    write_json(&out_dir.join("config_echo.json"), cfg)?;
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub truth_field: PathBuf,
    pub estimated_field: PathBuf,
    /// Region of interest for displacement error and overlap; whole grid
    /// when absent.
    #[serde(default)]
    pub mask: Option<PathBuf>,
}

/// Compare an estimated field against ground truth.
///
/// Displacement error is the per-voxel Euclidean distance between the two
/// fields, over the mask when one is given. `dsc_pre` is the overlap of the
/// mask with its truth-warped self (how far apart the time points are
/// without registration); `dsc_post` compares truth-warped against
/// estimate-warped.
pub fn run_eval(cfg: &EvalConfig) -> Result<serde_json::Value> {
    if let Some(mask) = &cfg.mask {
        require_input(mask, "evaluation mask")?;
    }
    require_input(&cfg.truth_field, "truth field")?;
    require_input(&cfg.estimated_field, "estimated field")?;
    let truth = nifti::load_field(&cfg.truth_field)?;
    let est = nifti::load_field(&cfg.estimated_field)?;
    require_same_grid(&truth.grid, &est.grid, "truth vs estimated field")?;
    let mask = match &cfg.mask {
        Some(p) => {
            let m = nifti::load_mask(p)?;
            require_same_grid(&truth.grid, &m.grid, "field vs evaluation mask")?;
            Some(binarize(&m))
        }
        None => None,
    };

    let mut errors: Vec<f64> = Vec::new();
    for i in 0..truth.u.len() {
        if let Some(m) = &mask {
            if m.labels[i] == 0 {
                continue;
            }
        }
        let (t, e) = (truth.u[i], est.u[i]);
        let d = [e[0] - t[0], e[1] - t[1], e[2] - t[2]];
        errors.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
    }
    if errors.is_empty() {
        return Err(Error::Domain("evaluation region is empty".into()));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    let max = *sorted.last().expect("nonempty");

    let jac = jacobian_determinant(&est);
    let sd = sdlogj(&jac, None)?;
    let folding = jac.folding_count() as f64 / jac.det.len() as f64;

    let (dsc_pre, dsc_post) = match &mask {
        Some(m) => {
            let by_truth = warp_mask(m, &truth)?;
            let by_est = warp_mask(m, &est)?;
            (
                Some(report_round(dice(m, &by_truth, 1)?)),
                Some(report_round(dice(&by_truth, &by_est, 1)?)),
            )
        }
        None => (None, None),
    };

    Ok(serde_json::json!({
        "mean_error_voxels": report_round(mean),
        "median_error_voxels": report_round(median),
        "max_error_voxels": report_round(max),
        "dsc_pre": dsc_pre,
        "dsc_post": dsc_post,
        "sdlogj": report_round(sd.value),
        "sdlogj_excluded": sd.excluded,
        "folding_frac": report_round(folding),
        "voxels_evaluated": errors.len(),
    }))
}
