//! Output emission: per-stage metric JSON records plus flat CSV summaries
//! and plot-ready tables. Metric records contain only deterministic values;
//! wall times go to a separate timings file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::trainer::{ExperimentResult, StageRecord, TimingRecord};

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

fn record_path(dir: &Path, record: &StageRecord) -> PathBuf {
    dir.join(&record.method)
        .join(format!("seed{}", record.seed_index))
        .join(format!("stage{}.json", record.stage))
}

/// Write every stage record as pretty JSON under
/// `dir/<method>/seed<k>/stage<t>.json`.
pub fn write_stage_records(dir: &Path, records: &[StageRecord]) -> Result<()> {
    for record in records {
        let path = record_path(dir, record);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(record)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json + "\n")?;
    }
    Ok(())
}

/// Recursively collect stage records back from a run directory, in sorted
/// path order.
pub fn load_stage_records(dir: &Path) -> Result<Vec<StageRecord>> {
    let mut paths = Vec::new();
    collect_json(dir, &mut paths)?;
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path)?;
        let record: StageRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        records.push(record);
    }
    Ok(records)
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("stage") && n.ends_with(".json"))
        {
            out.push(path);
        }
    }
    Ok(())
}

pub fn write_timings(dir: &Path, timings: &[TimingRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(timings).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("timings.json"), json + "\n")?;
    Ok(())
}

/// One row per (method, seed, stage).
pub fn write_summary_csv(dir: &Path, records: &[StageRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("summary.csv"))?;
    writeln!(
        f,
        "method,seed,stage,num_classes,miou_base,miou_new,miou,hiou,replay_bytes,warnings"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.seed_index,
            r.stage,
            r.num_classes,
            fmt_opt(r.metrics.miou_base),
            fmt_opt(r.metrics.miou_new),
            fmt_opt(r.metrics.miou),
            fmt_opt(r.metrics.hiou),
            r.replay_bytes,
            r.warnings
        )?;
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn grouped<'a>(records: &'a [StageRecord]) -> Vec<(String, usize, Vec<&'a StageRecord>)> {
    let mut groups: Vec<(String, usize, Vec<&StageRecord>)> = Vec::new();
    for r in records {
        match groups
            .iter_mut()
            .find(|(m, s, _)| *m == r.method && *s == r.stage)
        {
            Some((_, _, rows)) => rows.push(r),
            None => groups.push((r.method.clone(), r.stage, vec![r])),
        }
    }
    groups
}

/// Mean and standard deviation over seeds, one row per (method, stage).
pub fn write_aggregate_csv(dir: &Path, records: &[StageRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("aggregate.csv"))?;
    writeln!(
        f,
        "method,stage,runs,miou_base_mean,miou_base_std,miou_new_mean,miou_new_std,miou_mean,miou_std,hiou_mean,hiou_std,replay_bytes"
    )?;
    for (method, stage, rows) in grouped(records) {
        let pick = |get: fn(&StageRecord) -> Option<f64>| -> String {
            let vals: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
            if vals.len() != rows.len() {
                "n/a,n/a".into()
            } else {
                let (m, s) = mean_std(&vals);
                format!("{m:.4},{s:.4}")
            }
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            method,
            stage,
            rows.len(),
            pick(|r| r.metrics.miou_base),
            pick(|r| r.metrics.miou_new),
            pick(|r| r.metrics.miou),
            pick(|r| r.metrics.hiou),
            rows[0].replay_bytes
        )?;
    }
    Ok(())
}

/// Plot-ready table: final-stage mean hIoU against replay memory bytes.
pub fn write_hiou_vs_memory_csv(dir: &Path, records: &[StageRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let last_stage = records.iter().map(|r| r.stage).max().unwrap_or(1);
    let mut f = fs::File::create(dir.join("hiou_vs_memory.csv"))?;
    writeln!(f, "method,hiou_mean,replay_bytes")?;
    for (method, stage, rows) in grouped(records) {
        if stage != last_stage {
            continue;
        }
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.metrics.hiou).collect();
        let hiou = if vals.is_empty() {
            "n/a".to_string()
        } else {
            format!("{:.4}", mean_std(&vals).0)
        };
        writeln!(f, "{},{},{}", method, hiou, rows[0].replay_bytes)?;
    }
    Ok(())
}

/// Per-category IoU bars: one row per (method, seed, stage, category).
pub fn write_per_category_csv(dir: &Path, records: &[StageRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("per_category_iou.csv"))?;
    writeln!(f, "method,seed,stage,category,iou")?;
    for r in records {
        for (c, iou) in r.metrics.per_class.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.method,
                r.seed_index,
                r.stage,
                c,
                fmt_opt(*iou)
            )?;
        }
    }
    Ok(())
}

/// Write the full output tree for one experiment run.
pub fn write_all(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_stage_records(dir, &result.records)?;
    write_timings(dir, &result.timings)?;
    write_summary_csv(dir, &result.records)?;
    write_aggregate_csv(dir, &result.records)?;
    write_hiou_vs_memory_csv(dir, &result.records)?;
    write_per_category_csv(dir, &result.records)?;
    Ok(())
}
