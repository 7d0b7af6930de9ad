//! Dataset schema checks and content census.

use std::path::Path;

use serde_json::{json, Value};

use seqid::io::{read_tank_series_path, TANK_SAMPLING_PERIOD};
use seqid::models::dengue::{read_reports_path, reports_to_dataset};
use seqid::Dataset;

use crate::Failure;

fn stats(values: &[f64]) -> Value {
    if values.is_empty() {
        return Value::Null;
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    json!({ "mean": seqid::stats::mean(values), "min": min, "max": max })
}

fn census(data: &Dataset) -> Value {
    json!({
        "length": data.len(),
        "observed": data.n_observed(),
        "missing": data.len() - data.n_observed(),
        "input_dim": data.inputs().first().map_or(0, Vec::len),
    })
}

pub fn validate(model: &str, path: &Path) -> Result<Value, Failure> {
    let file = path.display().to_string();
    match model {
        "watertank" => {
            let data = read_tank_series_path(path).map_err(|e| Failure::config(format!("{file}: {e}")))?;
            let u: Vec<f64> = (0..data.len()).map(|t| data.input(t)[0]).collect();
            Ok(json!({
                "model": model,
                "path": file,
                "census": census(&data),
                "sampling_period_s": TANK_SAMPLING_PERIOD,
                "u": stats(&u),
                "y": stats(&data.observed_values()),
            }))
        }
        "dengue" => {
            let reports = read_reports_path(path).map_err(|e| Failure::config(format!("{file}: {e}")))?;
            let data = reports_to_dataset(&reports).map_err(|e| Failure::config(format!("{file}: {e}")))?;
            let cases: Vec<f64> = reports.iter().map(|r| r.cases as f64).collect();
            Ok(json!({
                "model": model,
                "path": file,
                "observations": reports.len(),
                "total_cases": reports.iter().map(|r| r.cases).sum::<u64>(),
                "first_date": reports.first().map(|r| r.date.to_string()),
                "last_date": reports.last().map(|r| r.date.to_string()),
                "census": census(&data),
                "cases": stats(&cases),
            }))
        }
        "lgss" | "lgss-demo" => {
            let data = Dataset::read_csv_path(path).map_err(|e| Failure::config(format!("{file}: {e}")))?;
            if data.is_empty() {
                return Err(Failure::config(format!("{file}: no data rows")));
            }
            Ok(json!({
                "model": model,
                "path": file,
                "census": census(&data),
                "y": stats(&data.observed_values()),
            }))
        }
        other => Err(Failure::config(format!(
            "unknown model {other:?}; expected lgss, lgss-demo, watertank or dengue"
        ))),
    }
}
