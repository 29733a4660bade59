//! Presentation artifacts: the cross-run MAE comparison table, distribution
//! and training plots, and the dataset bias report.

mod plot;

pub use plot::{emit_plot, PlotKind, PlotPayload};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetStats;
use crate::engine::{EvalResult, Months, TrainHistory};
use crate::models::{BackboneId, Regime};

pub type ReportResult<T> = Result<T, ReportError>;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("duplicate cell for backbone `{backbone}` regime `{regime}`")]
    DuplicateCell { backbone: BackboneId, regime: Regime },
    #[error("payload does not match plot kind {kind:?}")]
    PayloadMismatch { kind: PlotKind },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image encode error at {path}: {source}")]
    ImageEncode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// One completed training-plus-evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub backbone_id: BackboneId,
    pub regime: Regime,
    /// Absent when a run is reconstructed from its metrics file alone.
    pub history: Option<TrainHistory>,
    pub eval: EvalResult,
    /// Echo of the configuration the run used.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub backbone_id: BackboneId,
    pub mae_full: Option<Months>,
    pub mae_frozen: Option<Months>,
}

/// The backbone-by-regime MAE grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    /// Cell with the minimum MAE; first in row-major scan order on ties.
    pub best_cell: Option<(BackboneId, Regime)>,
}

/// Arrange run results into one row per backbone and one MAE column per
/// regime. Rows follow registry order; missing cells stay absent.
pub fn render_comparison_table(results: &[RunResult]) -> ReportResult<ComparisonTable> {
    let mut cells: BTreeMap<BackboneId, (Option<Months>, Option<Months>)> = BTreeMap::new();
    for r in results {
        let entry = cells.entry(r.backbone_id).or_insert((None, None));
        let slot = match r.regime {
            Regime::Full => &mut entry.0,
            Regime::Frozen => &mut entry.1,
        };
        if slot.is_some() {
            return Err(ReportError::DuplicateCell {
                backbone: r.backbone_id,
                regime: r.regime,
            });
        }
        *slot = Some(r.eval.mae);
    }

    let rows: Vec<TableRow> = BackboneId::ALL
        .into_iter()
        .filter_map(|id| {
            cells.get(&id).map(|&(mae_full, mae_frozen)| TableRow {
                backbone_id: id,
                mae_full,
                mae_frozen,
            })
        })
        .collect();

    let mut best: Option<(Months, BackboneId, Regime)> = None;
    for row in &rows {
        for (mae, regime) in [(row.mae_full, Regime::Full), (row.mae_frozen, Regime::Frozen)] {
            if let Some(mae) = mae {
                if best.as_ref().is_none_or(|(b, _, _)| mae < *b) {
                    best = Some((mae, row.backbone_id, regime));
                }
            }
        }
    }

    Ok(ComparisonTable {
        rows,
        best_cell: best.map(|(_, id, regime)| (id, regime)),
    })
}

impl ComparisonTable {
    /// Markdown rendering with MAEs at two decimals; the best cell is bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| Backbone | MAE full (months) | MAE frozen (months) |\n");
        out.push_str("|---|---|---|\n");
        for row in &self.rows {
            let cell = |mae: Option<Months>, regime: Regime| -> String {
                match mae {
                    None => "-".to_string(),
                    Some(v) => {
                        if self.best_cell == Some((row.backbone_id, regime)) {
                            format!("**{v:.2}**")
                        } else {
                            format!("{v:.2}")
                        }
                    }
                }
            };
            out.push_str(&format!(
                "| {} | {} | {} |\n",
                row.backbone_id,
                cell(row.mae_full, Regime::Full),
                cell(row.mae_frozen, Regime::Frozen),
            ));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "best_cell": self.best_cell.map(|(id, regime)| serde_json::json!({
                "backbone_id": id,
                "regime": regime,
            })),
        })
    }
}

/// Default age-band width of the bias report, months.
pub const DEFAULT_BAND_WIDTH: u32 = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMae {
    pub count: usize,
    pub mae: Months,
}

/// Measures the dataset imbalances that skew predictions: the dominant age
/// band and gender ratio, plus per-band MAE when predictions are available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// male/female count ratio; absent when either count is zero.
    pub gender_ratio: Option<f64>,
    /// Lower edge of the most populated age band, months.
    pub modal_band: Option<u32>,
    /// Share of all samples inside the modal band.
    pub band_mass: Option<f64>,
    pub band_width: u32,
    /// Pooled per-band MAE over the supplied runs, keyed by band lower edge.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_band_mae: Option<BTreeMap<u32, BandMae>>,
}

/// Build the bias report. Bands are `band_width` months wide; histogram bins
/// are assigned to bands by their lower edge, which is exact whenever
/// `band_width` is a multiple of the stats bin width.
pub fn bias_report(stats: &DatasetStats, results: &[RunResult], band_width: u32) -> BiasReport {
    assert!(band_width >= 1, "band_width must be at least 1 month");

    let mut bands: BTreeMap<u32, usize> = BTreeMap::new();
    for (&bin, &count) in &stats.age_histogram {
        *bands.entry((bin / band_width) * band_width).or_insert(0) += count;
    }
    let modal = bands
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(band, count)| (*band, *count));

    let gender_ratio = (stats.male_count > 0 && stats.female_count > 0)
        .then(|| stats.male_count as f64 / stats.female_count as f64);

    let per_band_mae = if results.is_empty() {
        None
    } else {
        let mut acc: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
        for run in results {
            for p in &run.eval.predictions {
                let band = ((p.true_months as u32) / band_width) * band_width;
                let entry = acc.entry(band).or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 += (p.true_months - p.pred_months).abs();
            }
        }
        Some(
            acc.into_iter()
                .map(|(band, (count, sum))| {
                    (
                        band,
                        BandMae {
                            count,
                            mae: sum / count as f64,
                        },
                    )
                })
                .collect(),
        )
    };

    BiasReport {
        gender_ratio,
        modal_band: modal.map(|(band, _)| band),
        band_mass: modal
            .filter(|_| stats.total > 0)
            .map(|(_, count)| count as f64 / stats.total as f64),
        band_width,
        per_band_mae,
    }
}

impl BiasReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("bias report serialization")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.gender_ratio {
            Some(r) => out.push_str(&format!("gender ratio (male:female): {r:.2}\n")),
            None => out.push_str("gender ratio: undefined (a gender count is zero)\n"),
        }
        match (self.modal_band, self.band_mass) {
            (Some(band), Some(mass)) => out.push_str(&format!(
                "modal age band: [{}, {}) months holding {:.1}% of samples\n",
                band,
                band + self.band_width,
                100.0 * mass
            )),
            _ => out.push_str("modal age band: undefined (empty dataset)\n"),
        }
        if let Some(per_band) = &self.per_band_mae {
            out.push_str("per-band MAE (months):\n");
            for (band, entry) in per_band {
                out.push_str(&format!(
                    "  [{:>3}, {:>3}): n={:<4} mae={:.2}\n",
                    band,
                    band + self.band_width,
                    entry.count,
                    entry.mae
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_stats, DatasetManifest, SampleRecord};
    use crate::engine::Prediction;

    fn run(backbone_id: BackboneId, regime: Regime, mae: f64) -> RunResult {
        RunResult {
            backbone_id,
            regime,
            history: None,
            eval: EvalResult {
                mae,
                predictions: Vec::new(),
            },
            config: serde_json::json!({}),
        }
    }

    fn paper_grid() -> Vec<RunResult> {
        vec![
            run(BackboneId::Vgg16, Regime::Full, 14.00),
            run(BackboneId::Vgg16, Regime::Frozen, 29.51),
            run(BackboneId::InceptionV3, Regime::Full, 10.23),
            run(BackboneId::InceptionV3, Regime::Frozen, 29.13),
            run(BackboneId::MobileNet, Regime::Full, 9.55),
            run(BackboneId::MobileNet, Regime::Frozen, 29.56),
            run(BackboneId::Xception, Regime::Full, 9.98),
            run(BackboneId::Xception, Regime::Frozen, 26.65),
        ]
    }

    #[test]
    fn eight_cell_grid_renders_with_best_cell() {
        let table = render_comparison_table(&paper_grid()).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.best_cell, Some((BackboneId::MobileNet, Regime::Full)));
        let row = &table.rows[2];
        assert_eq!(row.backbone_id, BackboneId::MobileNet);
        assert_eq!(row.mae_full, Some(9.55));
        assert_eq!(row.mae_frozen, Some(29.56));
    }

    #[test]
    fn empty_results_render_headers_only() {
        let table = render_comparison_table(&[]).unwrap();
        assert!(table.rows.is_empty());
        assert_eq!(table.best_cell, None);
        let md = table.to_markdown();
        assert!(md.starts_with("| Backbone |"));
        assert_eq!(md.lines().count(), 2);
    }

    #[test]
    fn single_result_is_best() {
        let table = render_comparison_table(&[run(BackboneId::Xception, Regime::Frozen, 26.65)])
            .unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].mae_full, None);
        assert_eq!(table.best_cell, Some((BackboneId::Xception, Regime::Frozen)));
    }

    #[test]
    fn duplicate_cell_rejected() {
        let results = vec![
            run(BackboneId::Vgg16, Regime::Full, 14.0),
            run(BackboneId::Vgg16, Regime::Full, 15.0),
        ];
        assert!(matches!(
            render_comparison_table(&results),
            Err(ReportError::DuplicateCell {
                backbone: BackboneId::Vgg16,
                regime: Regime::Full
            })
        ));
    }

    /// Parse a rendered markdown table back into cells.
    fn parse_markdown(md: &str) -> Vec<(String, Option<(f64, bool)>, Option<(f64, bool)>)> {
        md.lines()
            .skip(2)
            .map(|line| {
                let cols: Vec<&str> = line
                    .trim_matches('|')
                    .split('|')
                    .map(str::trim)
                    .collect();
                let parse = |s: &str| -> Option<(f64, bool)> {
                    if s == "-" {
                        return None;
                    }
                    let bold = s.starts_with("**") && s.ends_with("**");
                    let body = s.trim_matches('*');
                    Some((body.parse().unwrap(), bold))
                };
                (cols[0].to_string(), parse(cols[1]), parse(cols[2]))
            })
            .collect()
    }

    #[test]
    fn markdown_round_trips_to_two_decimals() {
        let table = render_comparison_table(&paper_grid()).unwrap();
        let parsed = parse_markdown(&table.to_markdown());
        let expected = [
            ("vgg16", 14.00, 29.51),
            ("inception_v3", 10.23, 29.13),
            ("mobilenet", 9.55, 29.56),
            ("xception", 9.98, 26.65),
        ];
        assert_eq!(parsed.len(), 4);
        for ((name, full, frozen), row) in expected.iter().zip(&parsed) {
            assert_eq!(&row.0, name);
            assert_eq!(row.1.unwrap().0, *full);
            assert_eq!(row.2.unwrap().0, *frozen);
        }
        // Exactly one bold cell, on the mobilenet/full value.
        let bolds: Vec<(&str, bool, bool)> = parsed
            .iter()
            .map(|r| {
                (
                    r.0.as_str(),
                    r.1.map(|c| c.1).unwrap_or(false),
                    r.2.map(|c| c.1).unwrap_or(false),
                )
            })
            .filter(|(_, a, b)| *a || *b)
            .collect();
        assert_eq!(bolds, vec![("mobilenet", true, false)]);
    }

    #[test]
    fn best_cell_matches_independent_scan() {
        let table = render_comparison_table(&paper_grid()).unwrap();
        // Independent row-major argmin over populated cells.
        let mut best: Option<(f64, BackboneId, Regime)> = None;
        for row in &table.rows {
            for (v, regime) in [(row.mae_full, Regime::Full), (row.mae_frozen, Regime::Frozen)] {
                if let Some(v) = v {
                    if best.map_or(true, |(b, _, _)| v < b) {
                        best = Some((v, row.backbone_id, regime));
                    }
                }
            }
        }
        assert_eq!(table.best_cell, best.map(|(_, id, r)| (id, r)));
    }

    fn stats_of(ages_genders: &[(u32, bool)], bin_width: u32) -> DatasetStats {
        let records = ages_genders
            .iter()
            .enumerate()
            .map(|(i, &(bone_age, male))| SampleRecord {
                id: format!("r{i}"),
                image_path: std::path::PathBuf::from("x.png"),
                bone_age,
                male,
            })
            .collect();
        compute_stats(
            &DatasetManifest {
                records,
                source: "test".into(),
            },
            bin_width,
        )
    }

    #[test]
    fn bias_report_basics() {
        // 144-155 band dominates, two males per female.
        let samples: Vec<(u32, bool)> = vec![
            (150, true),
            (152, true),
            (148, false),
            (150, true),
            (30, true),
            (200, false),
        ];
        let stats = stats_of(&samples, 12);
        let report = bias_report(&stats, &[], 24);
        assert_eq!(report.gender_ratio, Some(2.0));
        assert_eq!(report.modal_band, Some(144));
        assert!((report.band_mass.unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!(report.per_band_mae.is_none());
        let text = report.to_text();
        assert!(text.contains("modal age band: [144, 168)"));
    }

    #[test]
    fn bias_report_uniform_band_shares_near_equal() {
        // Two samples in each 24-month band.
        let samples: Vec<(u32, bool)> = (0..12)
            .map(|i| (1 + (i / 2) * 24 + (i % 2) * 10, i % 2 == 0))
            .collect();
        let stats = stats_of(&samples, 12);
        let report = bias_report(&stats, &[], 24);
        let mass = report.band_mass.unwrap();
        assert!((mass - 2.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn per_band_mae_matches_brute_force_for_constant_predictor() {
        let samples: Vec<(u32, bool)> = vec![(10, true), (20, false), (40, true), (100, false)];
        let stats = stats_of(&samples, 12);
        let c = 50.0;
        let predictions: Vec<Prediction> = samples
            .iter()
            .enumerate()
            .map(|(i, &(age, _))| Prediction {
                id: format!("r{i}"),
                true_months: f64::from(age),
                pred_months: c,
            })
            .collect();
        let result = RunResult {
            backbone_id: BackboneId::TinyTest,
            regime: Regime::Full,
            history: None,
            eval: EvalResult {
                mae: 0.0,
                predictions: predictions.clone(),
            },
            config: serde_json::json!({}),
        };
        let report = bias_report(&stats, &[result], 24);
        let per_band = report.per_band_mae.unwrap();

        // Brute-force oracle: group predictions by band and average directly.
        let mut oracle: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for p in &predictions {
            oracle
                .entry(((p.true_months as u32) / 24) * 24)
                .or_default()
                .push((p.true_months - c).abs());
        }
        assert_eq!(per_band.len(), oracle.len());
        for (band, errs) in oracle {
            let want = errs.iter().sum::<f64>() / errs.len() as f64;
            let got = &per_band[&band];
            assert_eq!(got.count, errs.len());
            assert!((got.mae - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gender_ratio_undefined_when_single_sided() {
        let stats = stats_of(&[(10, true), (20, true)], 12);
        let report = bias_report(&stats, &[], 24);
        assert_eq!(report.gender_ratio, None);
    }
}
