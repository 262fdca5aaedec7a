use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::ExperimentKind;
use crate::error::{Error, Result};
use crate::metrics::wilcoxon_signed_rank;

/// Significance level of the report's signed-rank marks.
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub image_id: String,
    pub dsc: f64,
    pub f1: f64,
}

/// Per-image scores of any number of experiments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub experiment: String,
    pub images: usize,
    pub mean_dsc: f64,
    pub median_dsc: f64,
    pub mean_f1: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

impl ResultTable {
    /// Experiment ids in order of first appearance.
    pub fn experiments(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.experiment) {
                out.push(r.experiment.clone());
            }
        }
        out
    }

    pub fn rows_of<'a>(&'a self, experiment: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.experiment == experiment)
    }

    pub fn dsc_of(&self, experiment: &str) -> Vec<f64> {
        self.rows_of(experiment).map(|r| r.dsc).collect()
    }

    pub fn aggregate(&self, experiment: &str) -> Option<Aggregate> {
        let dscs = self.dsc_of(experiment);
        if dscs.is_empty() {
            return None;
        }
        let f1s: Vec<f64> = self.rows_of(experiment).map(|r| r.f1).collect();
        Some(Aggregate {
            experiment: experiment.to_string(),
            images: dscs.len(),
            mean_dsc: mean(&dscs),
            median_dsc: median(&dscs),
            mean_f1: mean(&f1s),
        })
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        self.experiments().iter().filter_map(|e| self.aggregate(e)).collect()
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.rows)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let rows =
            reader.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>().map_err(|e| csv_error(path, e))?;
        Ok(Self { rows })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Decode { path: path.to_path_buf(), reason: e.to_string() }
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Encode { path: path.to_path_buf(), reason: e.to_string() })?;
    for r in rows {
        writer.serialize(r).map_err(|e| Error::Encode { path: path.to_path_buf(), reason: e.to_string() })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub images: usize,
    pub mean_dsc: f64,
    pub median_dsc: f64,
    pub mean_f1: f64,
    /// Signed-rank p-value of per-image Dice against the baseline; absent
    /// with fewer than five paired images.
    pub p_value: Option<f64>,
    pub significant: bool,
}

/// One point of the ensemble-size curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub n: usize,
    pub strategy: String,
    pub mean_dsc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub baseline: String,
    pub rows: Vec<ReportRow>,
    pub plot: Vec<PlotPoint>,
}

/// Summarize every experiment and test its per-image Dice against
/// `baseline`.
pub fn report(table: &ResultTable, baseline: &str) -> Result<Report> {
    let base = table
        .aggregate(baseline)
        .ok_or_else(|| Error::MissingArtifact(format!("baseline experiment {baseline:?} has no rows")))?;
    let base_rows: Vec<&ResultRow> = table.rows_of(baseline).collect();
    let mut rows = Vec::new();
    let mut plot = Vec::new();
    for agg in table.aggregates() {
        let p_value = if agg.experiment == base.experiment {
            Some(1.0)
        } else {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for r in table.rows_of(&agg.experiment) {
                if let Some(br) = base_rows.iter().find(|br| br.image_id == r.image_id) {
                    a.push(r.dsc);
                    b.push(br.dsc);
                }
            }
            if a.len() < 5 {
                None
            } else {
                Some(wilcoxon_signed_rank(&a, &b)?.p_value)
            }
        };
        if let Some((n, strategy)) = agg.experiment.parse::<ExperimentKind>().ok().and_then(|k| k.ensemble()) {
            plot.push(PlotPoint { n, strategy: strategy.name().to_string(), mean_dsc: agg.mean_dsc });
        }
        rows.push(ReportRow {
            experiment: agg.experiment,
            images: agg.images,
            mean_dsc: agg.mean_dsc,
            median_dsc: agg.median_dsc,
            mean_f1: agg.mean_f1,
            p_value,
            significant: p_value.is_some_and(|p| p < SIGNIFICANCE),
        });
    }
    plot.sort_by(|a, b| a.strategy.cmp(&b.strategy).then(a.n.cmp(&b.n)));
    Ok(Report { baseline: baseline.to_string(), rows, plot })
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    experiment: &'a str,
    images: usize,
    mean_dsc: String,
    median_dsc: String,
    mean_f1: String,
    p_value: String,
    significance: &'a str,
}

impl Report {
    pub fn row(&self, experiment: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.experiment == experiment)
    }

    /// Summary CSV: one line per experiment, significance against the
    /// baseline marked `*` or `N.S.`.
    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let lines: Vec<SummaryLine> = self
            .rows
            .iter()
            .map(|r| SummaryLine {
                experiment: &r.experiment,
                images: r.images,
                mean_dsc: format!("{:.4}", r.mean_dsc),
                median_dsc: format!("{:.4}", r.median_dsc),
                mean_f1: format!("{:.4}", r.mean_f1),
                p_value: r.p_value.map_or_else(|| "n/a".to_string(), |p| format!("{p:.4e}")),
                significance: match r.p_value {
                    None => "n/a",
                    Some(_) if r.significant => "*",
                    Some(_) => "N.S.",
                },
            })
            .collect();
        write_rows(path.as_ref(), &lines)
    }

    /// Plot data: `n, strategy, mean_dsc` for every ensemble experiment.
    pub fn write_plot_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.plot)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| experiment | mean DSC | median DSC | mean F1 | p vs {} |\n|---|---|---|---|---|\n",
            self.baseline
        );
        for r in &self.rows {
            let p = match r.p_value {
                None => "n/a".to_string(),
                Some(p) => format!("{p:.3e}{}", if r.significant { " *" } else { " N.S." }),
            };
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {p} |\n",
                r.experiment, r.mean_dsc, r.median_dsc, r.mean_f1
            ));
        }
        s
    }
}
