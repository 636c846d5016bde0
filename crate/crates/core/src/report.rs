//! Response report rows and their CSV/JSON serialization.
//!
//! Reports are flat tables with a fixed 13-column schema shared by every row
//! kind. Lesion rows fill the lesion columns, per-lesion subregion rows add
//! the `subregion` tag, overlap rows fill `dsc_pre`/`dsc_post` with the mask
//! name in `site`, and a single summary row carries the field-wide values.
//! Absent values are empty CSV cells and JSON nulls. Every number is rounded
//! to [`REPORT_SIG_DIGITS`] significant digits when the row is built, so the
//! CSV and JSON forms carry identical values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SIG_DIGITS: u32 = 6;

/// The exact CSV header line, including the spaces.
pub const REPORT_CSV_HEADER: &str = "lesion_id, site, baseline_mm3, match_kind, median_detj, \
     mean_detj, pct_change, subregion, dsc_pre, dsc_post, sdlogj, folding_frac, runtime_s";

/// Round to a fixed number of significant decimal digits. Goes through the
/// formatter's correctly-rounded scientific notation, so the result is the
/// nearest representable of the rounded decimal.
pub fn round_sig(v: f64, digits: u32) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", digits as usize - 1, v)
        .parse()
        .expect("formatter output parses back")
}

/// Rounding applied to every report value.
pub fn report_round(v: f64) -> f64 {
    round_sig(v, REPORT_SIG_DIGITS)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportRow {
    pub lesion_id: Option<u32>,
    pub site: Option<String>,
    pub baseline_mm3: Option<f64>,
    pub match_kind: Option<String>,
    pub median_detj: Option<f64>,
    pub mean_detj: Option<f64>,
    pub pct_change: Option<f64>,
    pub subregion: Option<String>,
    pub dsc_pre: Option<f64>,
    pub dsc_post: Option<f64>,
    pub sdlogj: Option<f64>,
    pub folding_frac: Option<f64>,
    pub runtime_s: Option<f64>,
}

/// The full response report: rows plus the materialized configuration they
/// were produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseReport {
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

fn cell_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn cell_str(v: &Option<String>) -> String {
    v.clone().unwrap_or_default()
}

/// Write the rows as CSV with the fixed header.
pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let header: Vec<&str> = REPORT_CSV_HEADER.split(',').collect();
    w.write_record(&header)
        .map_err(|e| Error::Io { path: "<report csv>".into(), source: std::io::Error::other(e) })?;
    for r in rows {
        let record = [
            r.lesion_id.map(|v| v.to_string()).unwrap_or_default(),
            cell_str(&r.site),
            cell_num(r.baseline_mm3),
            cell_str(&r.match_kind),
            cell_num(r.median_detj),
            cell_num(r.mean_detj),
            cell_num(r.pct_change),
            cell_str(&r.subregion),
            cell_num(r.dsc_pre),
            cell_num(r.dsc_post),
            cell_num(r.sdlogj),
            cell_num(r.folding_frac),
            cell_num(r.runtime_s),
        ];
        w.write_record(&record)
            .map_err(|e| Error::Io { path: "<report csv>".into(), source: std::io::Error::other(e) })?;
    }
    w.flush()
        .map_err(|e| Error::Io { path: "<report csv>".into(), source: e })?;
    Ok(())
}

pub fn to_csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Numeric(format!("report is not UTF-8: {e}")))
}

/// Parse a report CSV produced by [`write_csv`] back into rows. Used by the
/// cross-format consistency checks.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Numeric(format!("report line {line}: {e}")))?;
        if line == 0 {
            let names: Vec<String> = rec.iter().map(|f| f.trim().to_string()).collect();
            let want: Vec<&str> = REPORT_CSV_HEADER.split(", ").collect();
            if names != want {
                return Err(Error::Numeric(format!("unexpected report header {names:?}")));
            }
            continue;
        }
        if rec.len() != 13 {
            return Err(Error::Numeric(format!(
                "report line {line} has {} fields, expected 13",
                rec.len()
            )));
        }
        let opt_str = |i: usize| {
            let s = rec.get(i).unwrap_or_default();
            if s.is_empty() { None } else { Some(s.to_string()) }
        };
        let opt_num = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or_default();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Numeric(format!("report line {line} field {i}: {e}")))
            }
        };
        rows.push(ReportRow {
            lesion_id: opt_str(0)
                .map(|s| s.parse::<u32>())
                .transpose()
                .map_err(|e| Error::Numeric(format!("report line {line} lesion id: {e}")))?,
            site: opt_str(1),
            baseline_mm3: opt_num(2)?,
            match_kind: opt_str(3),
            median_detj: opt_num(4)?,
            mean_detj: opt_num(5)?,
            pct_change: opt_num(6)?,
            subregion: opt_str(7),
            dsc_pre: opt_num(8)?,
            dsc_post: opt_num(9)?,
            sdlogj: opt_num(10)?,
            folding_frac: opt_num(11)?,
            runtime_s: opt_num(12)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_six_significant_digits() {
        assert_eq!(round_sig(0.5120000000000001, 6), 0.512);
        assert_eq!(round_sig(1234567.89, 6), 1234570.0);
        assert_eq!(round_sig(0.000123456749, 6), 0.000123457);
        assert_eq!(round_sig(0.000123456449, 6), 0.000123456);
        assert_eq!(round_sig(-48.828125, 6), -48.8281);
        assert_eq!(round_sig(0.0, 6), 0.0);
        assert_eq!(round_sig(2.5, 6), 2.5);
        assert!((round_sig(f64::NAN, 6)).is_nan());
    }

    #[test]
    fn rounding_is_idempotent() {
        for v in [0.46381, -54.0001, 1.9531249, 3.25e-7, 9.999995e5] {
            let once = report_round(v);
            assert_eq!(report_round(once), once, "{v}");
        }
    }

    #[test]
    fn header_line_is_exact() {
        let csv = to_csv_string(&[]).unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "lesion_id, site, baseline_mm3, match_kind, median_detj, mean_detj, pct_change, \
             subregion, dsc_pre, dsc_post, sdlogj, folding_frac, runtime_s"
        );
    }

    fn sample_rows() -> Vec<ReportRow> {
        vec![
            ReportRow {
                lesion_id: Some(1),
                site: Some("lung".into()),
                baseline_mm3: Some(report_round(523.598775)),
                match_kind: Some("matched".into()),
                median_detj: Some(report_round(0.5120000001)),
                mean_detj: Some(report_round(0.5133333)),
                pct_change: Some(report_round(-48.8)),
                ..ReportRow::default()
            },
            ReportRow {
                lesion_id: Some(1),
                site: Some("lung".into()),
                subregion: Some("hypo".into()),
                median_detj: Some(0.5),
                mean_detj: Some(0.5),
                pct_change: Some(-50.0),
                ..ReportRow::default()
            },
            ReportRow {
                site: Some("tumour".into()),
                dsc_pre: Some(report_round(0.5634)),
                dsc_post: Some(report_round(0.912345678)),
                ..ReportRow::default()
            },
            ReportRow {
                sdlogj: Some(report_round(0.03123456789)),
                folding_frac: Some(0.0),
                runtime_s: Some(report_round(12.3456789)),
                ..ReportRow::default()
            },
        ]
    }

    #[test]
    fn csv_round_trips_and_blank_cells_are_none() {
        let rows = sample_rows();
        let text = to_csv_string(&rows).unwrap();
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, rows);
        // the summary row leaves lesion columns empty
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[4].starts_with(",,,,"));
    }

    #[test]
    fn csv_and_json_carry_identical_values() {
        let rows = sample_rows();
        let report = ResponseReport { config: serde_json::json!({"seed": 7}), rows: rows.clone() };
        let json = serde_json::to_string_pretty(&report).unwrap();
        let parsed: ResponseReport = serde_json::from_str(&json).unwrap();
        let from_csv = parse_csv(&to_csv_string(&rows).unwrap()).unwrap();
        assert_eq!(parsed.rows, from_csv);
    }

    #[test]
    fn json_uses_null_for_absent_values() {
        let row = ReportRow { sdlogj: Some(0.5), ..ReportRow::default() };
        let v = serde_json::to_value(&row).unwrap();
        assert_eq!(v["lesion_id"], serde_json::Value::Null);
        assert_eq!(v["sdlogj"], serde_json::json!(0.5));
    }

    #[test]
    fn sites_with_commas_survive_csv() {
        let rows = vec![ReportRow {
            lesion_id: Some(2),
            site: Some("liver, segment IV".into()),
            ..ReportRow::default()
        }];
        let text = to_csv_string(&rows).unwrap();
        let back = parse_csv(&text).unwrap();
        assert_eq!(back, rows);
    }
}
