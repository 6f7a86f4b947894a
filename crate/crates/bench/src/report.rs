//! Plot data: accuracy curves aggregated over seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::results::{read_csv, ResultRow, ResultsError};

/// What the x column of a plot holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum XAxis {
    Magnitude,
    FinetuneFraction,
}

/// One point of one curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotPoint {
    pub series: String,
    pub model: String,
    pub regime: String,
    pub finetune: String,
    pub x: f64,
    pub mean: f64,
    pub std: f64,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub experiment_id: String,
    pub x_axis: XAxis,
    pub points: Vec<PlotPoint>,
}

impl Plot {
    pub fn series_count(&self) -> usize {
        let mut s: Vec<&str> = self.points.iter().map(|p| p.series.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// An experiment whose fine-tuned rows share one magnitude but span several
/// fractions is plotted against the fraction (with the un-tuned rows at 0).
fn x_axis_of(rows: &[&ResultRow]) -> XAxis {
    let mut mags: Vec<u64> = rows.iter().map(|r| r.magnitude.to_bits()).collect();
    mags.sort_unstable();
    mags.dedup();
    let mut fracs: Vec<u64> = rows.iter().filter(|r| r.is_finetuned()).map(|r| r.finetune_fraction.to_bits()).collect();
    fracs.sort_unstable();
    fracs.dedup();
    if mags.len() == 1 && fracs.len() > 1 {
        XAxis::FinetuneFraction
    } else {
        XAxis::Magnitude
    }
}

fn finetune_label(r: &ResultRow, axis: XAxis) -> String {
    match axis {
        XAxis::FinetuneFraction if r.model != "dnn" => "ft-sweep".into(),
        _ if r.is_finetuned() => format!("ft{}", r.finetune_fraction),
        _ => "none".into(),
    }
}

/// Aggregates rows into one plot per experiment id.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Plot> {
    let mut by_experiment: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_experiment.entry(&r.experiment_id).or_default().push(r);
    }
    let mut plots = Vec::new();
    for (id, rows) in by_experiment {
        let axis = x_axis_of(&rows);
        // (model, regime, finetune) -> x bits -> (manipulated, clean) per row
        type Cell = (Vec<f64>, Vec<f64>);
        let mut cells: BTreeMap<(String, String, String), BTreeMap<u64, Cell>> = BTreeMap::new();
        for r in rows {
            let x = match axis {
                XAxis::Magnitude => r.magnitude,
                XAxis::FinetuneFraction => r.finetune_fraction,
            };
            let key = (r.model.clone(), r.regime.clone(), finetune_label(r, axis));
            let cell = cells.entry(key).or_default().entry(x.to_bits()).or_default();
            cell.0.push(r.manipulated_accuracy);
            cell.1.push(r.clean_accuracy);
        }
        let mut points = Vec::new();
        for ((model, regime, finetune), xs) in cells {
            let mut xs: Vec<(f64, Cell)> = xs.into_iter().map(|(b, c)| (f64::from_bits(b), c)).collect();
            xs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (x, (manip, clean)) in xs {
                let (mean, std) = mean_std(&manip);
                let (clean_mean, clean_std) = mean_std(&clean);
                points.push(PlotPoint {
                    series: format!("{model}|{regime}|{finetune}"),
                    model: model.clone(),
                    regime: regime.clone(),
                    finetune: finetune.clone(),
                    x,
                    mean,
                    std,
                    clean_mean,
                    clean_std,
                    n_seeds: manip.len(),
                });
            }
        }
        plots.push(Plot {
            experiment_id: id.to_string(),
            x_axis: axis,
            points,
        });
    }
    plots
}

/// Reads result CSVs (which must share the schema) and writes one
/// `<experiment_id>.plot.csv` per experiment into `out_dir`.
pub fn report(csv_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, ResultsError> {
    if csv_paths.is_empty() {
        return Err(ResultsError::Invalid("no result files given".into()));
    }
    let mut rows = Vec::new();
    for p in csv_paths {
        rows.extend(read_csv(p)?);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for plot in aggregate(&rows) {
        let path = out_dir.join(format!("{}.plot.csv", plot.experiment_id));
        let mut w = csv::Writer::from_path(&path)?;
        for p in &plot.points {
            w.serialize(p)?;
        }
        w.flush()?;
        let axis_path = out_dir.join(format!("{}.plot.json", plot.experiment_id));
        let meta = serde_json::json!({
            "experiment_id": plot.experiment_id,
            "x": plot.x_axis,
            "y": "manipulated_accuracy",
            "series": plot.series_count(),
        });
        std::fs::write(&axis_path, serde_json::to_string_pretty(&meta).expect("json"))?;
        written.push(path);
    }
    Ok(written)
}
