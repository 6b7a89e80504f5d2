use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Metric;
use crate::error::CliError;
use crate::run::{Report, Row, VoxelScores};

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PERVOXEL_FILE: &str = "pervoxel_r.csv";
pub const CURVES_FILE: &str = "layer_curves.csv";
pub const CONTRASTS_FILE: &str = "contrasts.csv";
pub const OLS_FILE: &str = "ols.csv";

const CURVE_METRICS: [Metric; 5] = [
    Metric::BrainScore,
    Metric::MeanR,
    Metric::BrainScorePca,
    Metric::Cka,
    Metric::GwLoss,
];

fn out_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| out_err(path, e))?;
    w.write_record(header).map_err(|e| out_err(path, e))?;
    for r in records {
        w.write_record(&r).map_err(|e| out_err(path, e))?;
    }
    w.flush().map_err(|e| out_err(path, e))
}

/// Rows ordered by model, unit, relative position, condition and subject.
fn sorted_rows(rows: &[Row]) -> Vec<&Row> {
    let mut sorted: Vec<&Row> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.model_id, &a.unit, a.unit_index, &a.condition, &a.subject).cmp(&(
            &b.model_id,
            &b.unit,
            b.unit_index,
            &b.condition,
            &b.subject,
        ))
    });
    sorted
}

fn summary_records(rows: &[Row]) -> Vec<Vec<String>> {
    sorted_rows(rows)
        .into_iter()
        .map(|r| {
            vec![
                r.model_id.clone(),
                r.unit.clone(),
                r.unit_index.to_string(),
                r.rel_pos.to_string(),
                r.condition.clone(),
                r.subject.clone(),
                opt(r.brain_score),
                opt(r.mean_r),
                opt(r.median_fold_p),
                opt(r.brain_score_pca),
                opt(r.cka),
                opt(r.gw_loss),
                opt(r.gw_converged),
            ]
        })
        .collect()
}

/// Subject-averaged metric per (model, unit, condition) series and layer.
fn curve_records(rows: &[Row]) -> Vec<Vec<String>> {
    let mut acc: BTreeMap<(String, &str, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let series = format!("{}.{}.{}", r.model_id, r.unit, r.condition);
        for m in CURVE_METRICS {
            if let Some(v) = r.metric(m) {
                let slot = acc.entry((series.clone(), m.as_str(), r.unit_index)).or_insert((r.rel_pos, 0.0, 0));
                slot.1 += v;
                slot.2 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|((series, metric, _), (x, sum, count))| {
            vec![series, metric.to_string(), x.to_string(), (sum / count as f64).to_string(), count.to_string()]
        })
        .collect()
}

pub fn write_all(dir: &Path, report: &Report, voxel_scores: &[VoxelScores]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();

    let path = dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(report).map_err(|e| out_err(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| out_err(&path, e))?;
    files.push(path);

    let path = dir.join(SUMMARY_FILE);
    write_csv(
        &path,
        &[
            "model_id",
            "unit",
            "unit_index",
            "rel_pos",
            "condition",
            "subject",
            "brain_score",
            "mean_r",
            "median_fold_p",
            "brain_score_pca",
            "cka",
            "gw_loss",
            "gw_converged",
        ],
        summary_records(&report.rows),
    )?;
    files.push(path);

    let path = dir.join(CURVES_FILE);
    write_csv(&path, &["series", "metric", "rel_pos", "mean", "n_subjects"], curve_records(&report.rows))?;
    files.push(path);

    let stale = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| out_err(&p, e))
        } else {
            Ok(())
        }
    };

    if voxel_scores.is_empty() {
        stale(PERVOXEL_FILE)?;
    } else {
        let path = dir.join(PERVOXEL_FILE);
        let records = voxel_scores.iter().flat_map(|vs| {
            let row = &report.rows[vs.row];
            vs.r.iter().map(move |(voxel, r)| {
                vec![
                    row.entry.clone(),
                    row.condition.clone(),
                    row.subject.clone(),
                    voxel.to_string(),
                    r.to_string(),
                ]
            })
        });
        write_csv(&path, &["entry", "condition", "subject", "voxel", "r"], records)?;
        files.push(path);
    }

    let contrasts = report.stats.as_ref().map(|s| &s.contrasts).filter(|c| !c.is_empty());
    match contrasts {
        None => stale(CONTRASTS_FILE)?,
        Some(contrasts) => {
            let path = dir.join(CONTRASTS_FILE);
            let records = contrasts.iter().map(|c| {
                vec![
                    c.contrast.metric.as_str().to_string(),
                    c.contrast.baseline.clone(),
                    c.contrast.treatment.clone(),
                    c.n_pairs.to_string(),
                    c.mean_baseline.to_string(),
                    c.mean_treatment.to_string(),
                    opt(c.test.as_ref().map(|t| t.statistic)),
                    opt(c.test.as_ref().map(|t| t.p)),
                    opt(c.p_bonferroni),
                ]
            });
            write_csv(
                &path,
                &["metric", "baseline", "treatment", "n_pairs", "mean_baseline", "mean_treatment", "statistic", "p", "p_bonferroni"],
                records,
            )?;
            files.push(path);
        }
    }

    let ols = report.stats.as_ref().and_then(|s| s.ols.as_ref()).and_then(|o| o.fit.as_ref().map(|f| (o, f)));
    match ols {
        None => stale(OLS_FILE)?,
        Some((o, fit)) => {
            let path = dir.join(OLS_FILE);
            let mut records: Vec<Vec<String>> = o
                .terms
                .iter()
                .enumerate()
                .map(|(i, term)| {
                    vec![
                        term.clone(),
                        fit.coefs[i].to_string(),
                        fit.std_errs[i].to_string(),
                        fit.t_stats[i].to_string(),
                        fit.p_values[i].to_string(),
                    ]
                })
                .collect();
            let blank = || String::new();
            records.push(vec!["r2".into(), fit.r2.to_string(), blank(), blank(), blank()]);
            records.push(vec!["adjusted_r2".into(), fit.adjusted_r2.to_string(), blank(), blank(), blank()]);
            records.push(vec!["n".into(), fit.n.to_string(), blank(), blank(), blank()]);
            write_csv(&path, &["term", "coef", "std_err", "t", "p"], records)?;
            files.push(path);
        }
    }
    Ok(files)
}
