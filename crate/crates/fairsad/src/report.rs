//! Report emission: machine-readable JSON, a human-readable table, per-seed
//! loss curves, and model snapshots. No timestamps, so identical runs emit
//! identical bytes.

use std::fs;
use std::path::Path;

use crate::error::FairsadError;
use crate::metrics::MetricsReport;
use crate::model::ModelParams;
use crate::train::ExperimentResult;

fn write(path: &Path, contents: &str) -> Result<(), FairsadError> {
    fs::write(path, contents).map_err(|e| FairsadError::io(path.display().to_string(), e))
}

/// Rows: metric, per-seed values, mean, std.
pub fn report_json(result: &ExperimentResult) -> String {
    let rows: Vec<serde_json::Value> = [
        ("auc", &result.report.auc),
        ("f1", &result.report.f1),
        ("delta_dp", &result.report.delta_dp),
        ("delta_eo", &result.report.delta_eo),
    ]
    .iter()
    .map(|(name, summary)| {
        serde_json::json!({
            "metric": name,
            "per_seed": summary.per_seed,
            "mean": summary.mean,
            "std": summary.std,
        })
    })
    .collect();
    let doc = serde_json::json!({
        "seeds": result.runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
        "rows": rows,
    });
    serde_json::to_string_pretty(&doc).expect("serializable") + "\n"
}

pub fn report_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>10} {:>10}\n", "metric", "mean", "std"));
    for (name, s) in [
        ("AUC", &report.auc),
        ("F1", &report.f1),
        ("dDP", &report.delta_dp),
        ("dEO", &report.delta_eo),
    ] {
        out.push_str(&format!("{:<10} {:>10.2} {:>10.2}\n", name, s.mean, s.std));
    }
    out
}

/// Delimited loss curves: epoch, L_c, L_dc, L_d, L_m, total, val_auc.
pub fn curves_csv(result: &ExperimentResult, run_index: usize) -> String {
    let mut out = String::from("epoch,l_c,l_dc,l_d,l_m,total,val_auc\n");
    for (epoch, rec) in result.runs[run_index].history.epochs.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            epoch, rec.loss.l_c, rec.loss.l_dc, rec.loss.l_d, rec.loss.l_m, rec.loss.total,
            rec.val_auc
        ));
    }
    out
}

/// Writes report.json, report.txt, per-seed curves, and per-seed model
/// snapshots under `dir`.
pub fn write_artifacts(result: &ExperimentResult, dir: &Path) -> Result<(), FairsadError> {
    fs::create_dir_all(dir).map_err(|e| FairsadError::io(dir.display().to_string(), e))?;
    write(&dir.join("report.json"), &report_json(result))?;
    write(&dir.join("report.txt"), &report_table(&result.report))?;
    for (i, run) in result.runs.iter().enumerate() {
        write(&dir.join(format!("curves_seed{}.csv", run.seed)), &curves_csv(result, i))?;
        save_model(&run.model, &dir.join(format!("model_seed{}.json", run.seed)))?;
    }
    Ok(())
}

pub fn save_model(model: &ModelParams, path: &Path) -> Result<(), FairsadError> {
    let text = serde_json::to_string(model)
        .map_err(|e| FairsadError::Config(format!("model serialization: {e}")))?;
    write(path, &text)
}

pub fn load_model(path: &Path) -> Result<ModelParams, FairsadError> {
    let text =
        fs::read_to_string(path).map_err(|e| FairsadError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| FairsadError::Config(format!("{}: {e}", path.display())))
}
