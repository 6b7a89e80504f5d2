use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use repalign_core::encode::{brain_score, make_folds, noise_ceiling_per_subject, reliability_select, FoldSpec};
use repalign_core::reduce::{pca_fit, pca_transform};
use repalign_core::repgeo::{build_rdm, cka_unbiased, default_rdm_pca_dims, gw_distance, MassVector, Rdm};
use repalign_core::stats::{bonferroni, ols_fit, wilcoxon_signed_rank_with, OlsResult, TestResult};
use repalign_core::synth::gen_layer_sweep;
use repalign_core::tensorio::{load_matrix, resolve_manifest_path, ActivationTensor, Manifest, ResponseMatrix};

use crate::config::{Contrast, Inputs, Metric, RunConfig, Stage};
use crate::error::CliError;
use crate::output;

#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub run: u64,
    pub folds: u64,
    pub gw: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedInputs {
    pub manifest: String,
    pub n_stimuli: usize,
    pub activations: Vec<String>,
    pub responses: Vec<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub halves: BTreeMap<String, (String, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CeilingInfo {
    pub value: f64,
    /// `override` or `leave_one_subject_out`.
    pub source: &'static str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_subject: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReliabilityInfo {
    pub subject: String,
    pub fraction: f64,
    pub n_voxels: usize,
    pub selected: Vec<usize>,
    pub mean_selected_reliability: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PcaInfo {
    pub subject: String,
    pub components: usize,
    pub explained_variance: f64,
}

/// One (activation entry × subject) cell.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub entry: String,
    pub model_id: String,
    pub unit: String,
    pub unit_index: usize,
    pub rel_pos: f64,
    pub condition: String,
    pub subject: String,
    pub n_stimuli: usize,
    pub n_features: usize,
    pub n_voxels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brain_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_fold_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brain_score_pca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cka: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gw_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gw_converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gw_iterations: Option<usize>,
}

impl Row {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::BrainScore => self.brain_score,
            Metric::MeanR => self.mean_r,
            Metric::BrainScorePca => self.brain_score_pca,
            Metric::Cka => self.cka,
            Metric::GwLoss => self.gw_loss,
            Metric::RelPos => Some(self.rel_pos),
        }
    }

    fn pair_key(&self) -> (String, String, usize, String) {
        (self.model_id.clone(), self.unit.clone(), self.unit_index, self.subject.clone())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContrastResult {
    #[serde(flatten)]
    pub contrast: Contrast,
    pub n_pairs: usize,
    pub mean_baseline: f64,
    pub mean_treatment: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<TestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_bonferroni: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OlsReport {
    pub outcome: Metric,
    /// `intercept` followed by the predictors.
    pub terms: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<OlsResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub contrasts: Vec<ContrastResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ols: Option<OlsReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub tool: ToolInfo,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub timestamp: u64,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: ResolvedInputs,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<CeilingInfo>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reliability: Vec<ReliabilityInfo>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pca: Vec<PcaInfo>,
    pub rows: Vec<Row>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<StatsReport>,
    pub warnings: Vec<String>,
}

/// Mean fold correlation per voxel, for `pervoxel_r.csv`.
#[derive(Debug, Clone)]
pub struct VoxelScores {
    pub row: usize,
    /// Original voxel index (before reliability selection) and its r.
    pub r: Vec<(usize, f64)>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub voxel_scores: Vec<VoxelScores>,
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct Subject {
    response: ResponseMatrix,
    /// Original indices of the kept voxels.
    voxels: Vec<usize>,
    reduced: Option<ResponseMatrix>,
    rdm: Option<Rdm>,
}

struct CellOutput {
    row: Row,
    voxel_r: Option<Vec<f64>>,
    warnings: Vec<String>,
}

fn data_err(msg: String) -> CliError {
    CliError::Data(repalign_core::Error::InvalidArgument(msg))
}

fn rdm_for(x: &DMatrix<f64>, pca_dims: Option<usize>) -> repalign_core::Result<Rdm> {
    let (n, d) = x.shape();
    build_rdm(x, Some(pca_dims.unwrap_or_else(|| default_rdm_pca_dims(n, d))))
}

fn load_inputs(
    inputs: &Inputs,
    halves: &BTreeMap<String, (String, String)>,
) -> Result<(Vec<String>, Vec<ActivationTensor>, Vec<String>, Vec<ResponseMatrix>), CliError> {
    let path = resolve_manifest_path(&inputs.manifest);
    let manifest = Manifest::read(&path)?;
    let half_names: HashSet<&String> = halves.values().flat_map(|(a, b)| [a, b]).collect();
    let act_names = inputs.activations.clone().unwrap_or_else(|| {
        manifest
            .entries
            .iter()
            .filter(|e| e.meta.model_id.is_some() && e.meta.subject_id.is_none())
            .map(|e| e.name.clone())
            .collect()
    });
    let resp_names = inputs.responses.clone().unwrap_or_else(|| {
        manifest
            .entries
            .iter()
            .filter(|e| e.meta.subject_id.is_some() && !half_names.contains(&e.name))
            .map(|e| e.name.clone())
            .collect()
    });
    if act_names.is_empty() || resp_names.is_empty() {
        return Err(data_err(format!(
            "{} lists {} activation and {} response entries; need at least one of each",
            path.display(),
            act_names.len(),
            resp_names.len()
        )));
    }
    let acts = act_names
        .iter()
        .map(|n| load_matrix(&path, n)?.into_activation())
        .collect::<repalign_core::Result<Vec<_>>>()?;
    let resps = resp_names
        .iter()
        .map(|n| load_matrix(&path, n)?.into_response())
        .collect::<repalign_core::Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    for r in &resps {
        if !seen.insert(&r.subject_id) {
            return Err(data_err(format!("subject `{}` appears in more than one response entry", r.subject_id)));
        }
    }
    Ok((act_names, acts, resp_names, resps))
}

/// Relative position `unit_index / max_index` within each (model, unit) group.
fn assign_rel_pos(rows: &mut [Row]) {
    let mut max_index: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in rows.iter() {
        let slot = max_index.entry((r.model_id.clone(), r.unit.clone())).or_insert(0);
        *slot = (*slot).max(r.unit_index);
    }
    for r in rows.iter_mut() {
        let max = max_index[&(r.model_id.clone(), r.unit.clone())];
        r.rel_pos = if max == 0 { 0.0 } else { r.unit_index as f64 / max as f64 };
    }
}

fn default_contrasts(cfg: &RunConfig, rows: &[Row]) -> Vec<Contrast> {
    let conditions: HashSet<&str> = rows.iter().map(|r| r.condition.as_str()).collect();
    if !(conditions.contains("pos") && conditions.contains("nopos")) {
        return Vec::new();
    }
    [Metric::BrainScore, Metric::BrainScorePca, Metric::Cka, Metric::GwLoss]
        .into_iter()
        .filter(|m| m.stage().is_some_and(|s| cfg.has(s)))
        .map(|metric| Contrast {
            metric,
            baseline: "nopos".into(),
            treatment: "pos".into(),
        })
        .collect()
}

fn run_contrast(c: &Contrast, rows: &[Row], threshold: usize) -> ContrastResult {
    let collect = |cond: &str| -> BTreeMap<_, f64> {
        rows.iter()
            .filter(|r| r.condition == cond)
            .filter_map(|r| r.metric(c.metric).map(|v| (r.pair_key(), v)))
            .collect()
    };
    let (base, treat) = (collect(&c.baseline), collect(&c.treatment));
    let (x, y): (Vec<f64>, Vec<f64>) = base
        .iter()
        .filter_map(|(k, b)| treat.get(k).map(|t| (*b, *t)))
        .unzip();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (test, error) = match wilcoxon_signed_rank_with(&x, &y, threshold) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    ContrastResult {
        contrast: c.clone(),
        n_pairs: x.len(),
        mean_baseline: mean(&x),
        mean_treatment: mean(&y),
        test,
        p_bonferroni: None,
        error,
    }
}

fn run_stats(cfg: &RunConfig, rows: &[Row], warnings: &mut Vec<String>) -> StatsReport {
    let contrasts = cfg.stats.contrasts.clone().unwrap_or_else(|| default_contrasts(cfg, rows));
    let mut results: Vec<ContrastResult> = contrasts
        .iter()
        .map(|c| run_contrast(c, rows, cfg.stats.wilcoxon_exact_threshold))
        .collect();
    let tested: Vec<usize> = (0..results.len()).filter(|&i| results[i].test.is_some()).collect();
    let raw: Vec<f64> = tested.iter().map(|&i| results[i].test.as_ref().unwrap().p).collect();
    if let Ok(adjusted) = bonferroni(&raw) {
        for (i, p) in tested.into_iter().zip(adjusted) {
            results[i].p_bonferroni = Some(p);
        }
    }
    for r in &results {
        if let Some(e) = &r.error {
            warnings.push(format!(
                "contrast {} {} vs {}: {e}",
                r.contrast.metric.as_str(),
                r.contrast.baseline,
                r.contrast.treatment
            ));
        }
    }

    let ols = cfg.stats.ols.as_ref().map(|spec| {
        let usable: Vec<&Row> = rows
            .iter()
            .filter(|r| spec.predictors.iter().chain([&spec.outcome]).all(|m| r.metric(*m).is_some()))
            .collect();
        let x = DMatrix::from_fn(usable.len(), spec.predictors.len(), |i, j| {
            usable[i].metric(spec.predictors[j]).unwrap()
        });
        let y: Vec<f64> = usable.iter().map(|r| r.metric(spec.outcome).unwrap()).collect();
        let terms = std::iter::once("intercept".to_string())
            .chain(spec.predictors.iter().map(|m| m.as_str().to_string()))
            .collect();
        match ols_fit(&x, &y) {
            Ok(fit) => OlsReport {
                outcome: spec.outcome,
                terms,
                fit: Some(fit),
                error: None,
            },
            Err(e) => {
                warnings.push(format!("ols: {e}"));
                OlsReport {
                    outcome: spec.outcome,
                    terms,
                    fit: None,
                    error: Some(e.to_string()),
                }
            }
        }
    });
    StatsReport { contrasts: results, ols }
}

#[allow(clippy::too_many_arguments)]
fn compute_cell(
    cfg: &RunConfig,
    entry: &str,
    act: &ActivationTensor,
    act_rdm: Option<&Rdm>,
    subject: &Subject,
    folds: Option<&FoldSpec>,
    ceiling: Option<f64>,
    masses: Option<&MassVector>,
) -> Result<CellOutput, CliError> {
    let y = &subject.response;
    let mut row = Row {
        entry: entry.to_string(),
        model_id: act.model_id.clone(),
        unit: act.unit.to_string(),
        unit_index: act.unit_index,
        rel_pos: 0.0,
        condition: act.condition.to_string(),
        subject: y.subject_id.clone(),
        n_stimuli: act.n_stimuli(),
        n_features: act.n_features(),
        n_voxels: y.n_voxels(),
        brain_score: None,
        mean_r: None,
        median_fold_p: None,
        lambda: None,
        brain_score_pca: None,
        cka: None,
        gw_loss: None,
        gw_converged: None,
        gw_iterations: None,
    };
    let mut warnings = Vec::new();
    let mut voxel_r = None;
    let cell = format!("{entry} × {}", y.subject_id);

    if cfg.has(Stage::Score) {
        let rep = brain_score(act, y, folds.unwrap(), &cfg.score.ridge, ceiling.unwrap())?;
        let k = rep.per_voxel_r.len() as f64;
        voxel_r = Some(
            (0..y.n_voxels())
                .map(|v| rep.per_voxel_r.iter().map(|f| f[v]).sum::<f64>() / k)
                .collect(),
        );
        warnings.extend(rep.notes.iter().map(|n| format!("{cell}: {n}")));
        row.brain_score = Some(rep.brain_score);
        row.mean_r = Some(rep.mean_r);
        row.median_fold_p = Some(rep.median_fold_p);
        row.lambda = Some(rep.lambda);
    }
    if let Some(reduced) = &subject.reduced {
        let rep = brain_score(act, reduced, folds.unwrap(), &cfg.score.ridge, ceiling.unwrap())?;
        row.brain_score_pca = Some(rep.brain_score);
    }
    if cfg.has(Stage::Cka) {
        row.cka = Some(cka_unbiased(&act.to_f64(), &y.to_f64())?);
    }
    if let (Some(c1), Some(c2)) = (act_rdm, &subject.rdm) {
        let n = c1.len();
        let uniform = MassVector::uniform(n);
        let p = masses.unwrap_or(&uniform);
        let res = gw_distance(c1, c2, p, p, &cfg.gw.solver)?;
        if !res.converged {
            warnings.push(format!("{cell}: GW solver did not converge in {} iterations", res.iterations));
        }
        row.gw_loss = Some(res.loss);
        row.gw_converged = Some(res.converged);
        row.gw_iterations = Some(res.iterations);
    }
    Ok(CellOutput { row, voxel_r, warnings })
}

/// Runs a resolved, validated config and writes the report files.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let out_dir = cfg.output_dir();
    fs::create_dir_all(&out_dir).map_err(|e| CliError::Output(format!("{}: {e}", out_dir.display())))?;
    let mut warnings = Vec::new();

    let mut halves = cfg.reliability.halves.clone();
    let inputs = if cfg.has(Stage::Synth) {
        let spec = cfg.synth.clone().unwrap_or_default();
        let sweep = gen_layer_sweep(&spec)?;
        let data_dir = out_dir.join("data");
        if data_dir.exists() {
            let res = if data_dir.is_dir() { fs::remove_dir_all(&data_dir) } else { fs::remove_file(&data_dir) };
            res.map_err(|e| CliError::Output(format!("{}: {e}", data_dir.display())))?;
        }
        fs::create_dir_all(&data_dir).map_err(|e| CliError::Output(format!("{}: {e}", data_dir.display())))?;
        let entries = sweep.write(&data_dir)?;
        for (r, pair) in sweep.responses.iter().zip(entries.halves) {
            halves.insert(r.subject_id.clone(), pair);
        }
        info!("synthetic sweep written to {}", data_dir.display());
        Inputs {
            manifest: data_dir,
            activations: Some(entries.activations),
            responses: Some(entries.responses),
        }
    } else {
        cfg.inputs.clone().expect("validated config has inputs")
    };

    let (act_names, acts, resp_names, resps) = load_inputs(&inputs, &halves)?;
    let n = acts[0].n_stimuli();
    if let Some(bad) = acts.iter().map(|a| a.n_stimuli()).chain(resps.iter().map(|r| r.n_stimuli())).find(|&m| m != n) {
        return Err(CliError::Data(repalign_core::Error::DimensionMismatch(format!(
            "entries disagree on stimulus count ({n} vs {bad})"
        ))));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Output(format!("thread pool: {e}")))?;

    pool.install(|| {
        let manifest_path = resolve_manifest_path(&inputs.manifest);
        let mut reliability = Vec::new();
        let mut subjects = Vec::with_capacity(resps.len());
        for r in resps {
            let all: Vec<usize> = (0..r.n_voxels()).collect();
            if !cfg.has(Stage::Reliability) {
                subjects.push((r, all));
                continue;
            }
            let (a, b) = halves
                .get(&r.subject_id)
                .ok_or_else(|| CliError::Config(format!("no split halves configured for subject `{}`", r.subject_id)))?;
            let ha = load_matrix(&manifest_path, a)?.into_response()?;
            let hb = load_matrix(&manifest_path, b)?.into_response()?;
            let sel = reliability_select(&ha, &hb, cfg.reliability.fraction)?;
            let mean_rel = sel.selected.iter().map(|&v| sel.per_voxel_reliability[v]).sum::<f64>() / sel.selected.len() as f64;
            reliability.push(ReliabilityInfo {
                subject: r.subject_id.clone(),
                fraction: sel.fraction,
                n_voxels: r.n_voxels(),
                selected: sel.selected.clone(),
                mean_selected_reliability: mean_rel,
            });
            subjects.push((r.select_voxels(&sel.selected)?, sel.selected));
        }

        let needs_ceiling = cfg.has(Stage::Score) || cfg.has(Stage::Pca);
        let ceiling = if !needs_ceiling {
            None
        } else if let Some(value) = cfg.score.ceiling {
            Some(CeilingInfo {
                value,
                source: "override",
                per_subject: Vec::new(),
            })
        } else {
            let responses: Vec<ResponseMatrix> = subjects.iter().map(|(r, _)| r.clone()).collect();
            if responses.len() < 3 {
                return Err(data_err(format!(
                    "noise ceiling estimation needs at least 3 subjects, found {}; set score.ceiling",
                    responses.len()
                )));
            }
            let per_subject = noise_ceiling_per_subject(&responses)?;
            let mean = per_subject.iter().sum::<f64>() / per_subject.len() as f64;
            Some(CeilingInfo {
                value: mean.clamp(1e-6, 1.0),
                source: "leave_one_subject_out",
                per_subject,
            })
        };

        let mut pca_info = Vec::new();
        let subjects: Vec<Subject> = subjects
            .into_iter()
            .map(|(response, voxels)| {
                let y = response.to_f64();
                let reduced = if cfg.has(Stage::Pca) {
                    let k = cfg.pca.components.min(n - 1).min(response.n_voxels());
                    if k < cfg.pca.components {
                        warnings.push(format!(
                            "subject {}: PCA limited to {k} components by data shape",
                            response.subject_id
                        ));
                    }
                    let model = pca_fit(&y, k)?;
                    pca_info.push(PcaInfo {
                        subject: response.subject_id.clone(),
                        components: k,
                        explained_variance: model.explained_variance_ratio.iter().sum(),
                    });
                    let z = pca_transform(&model, &y)?;
                    Some(ResponseMatrix::new(z.map(|v| v as f32), response.subject_id.clone(), None)?)
                } else {
                    None
                };
                let rdm = if cfg.has(Stage::Gw) { Some(rdm_for(&y, cfg.gw.pca_dims)?) } else { None };
                Ok(Subject {
                    response,
                    voxels,
                    reduced,
                    rdm,
                })
            })
            .collect::<Result<_, CliError>>()?;

        let act_rdms: Vec<Option<Rdm>> = if cfg.has(Stage::Gw) {
            acts.par_iter()
                .map(|a| rdm_for(&a.to_f64(), cfg.gw.pca_dims).map(Some))
                .collect::<repalign_core::Result<_>>()?
        } else {
            vec![None; acts.len()]
        };
        let masses = match &cfg.gw.masses {
            Some(m) if m.len() != n => {
                return Err(data_err(format!("gw.masses has {} entries for {n} stimuli", m.len())));
            }
            Some(m) => Some(MassVector::normalized(m.clone())?),
            None => None,
        };
        let folds = if needs_ceiling {
            Some(make_folds(n, cfg.score.folds, cfg.seed)?)
        } else {
            None
        };

        let cells: Vec<(usize, usize)> = (0..acts.len())
            .flat_map(|a| (0..subjects.len()).map(move |s| (a, s)))
            .collect();
        let outputs = cells
            .par_iter()
            .map(|&(a, s)| {
                compute_cell(
                    cfg,
                    &act_names[a],
                    &acts[a],
                    act_rdms[a].as_ref(),
                    &subjects[s],
                    folds.as_ref(),
                    ceiling.as_ref().map(|c| c.value),
                    masses.as_ref(),
                )
            })
            .collect::<Result<Vec<_>, CliError>>()?;

        let mut rows = Vec::with_capacity(outputs.len());
        let mut voxel_scores = Vec::new();
        for ((_, s), out) in cells.iter().zip(outputs) {
            if let Some(r) = out.voxel_r {
                voxel_scores.push(VoxelScores {
                    row: rows.len(),
                    r: subjects[*s].voxels.iter().copied().zip(r).collect(),
                });
            }
            warnings.extend(out.warnings);
            rows.push(out.row);
        }
        assign_rel_pos(&mut rows);

        let stats = cfg.has(Stage::Stats).then(|| run_stats(cfg, &rows, &mut warnings));
        for w in &warnings {
            warn!("{w}");
        }

        let report = Report {
            tool: ToolInfo {
                name: "repalign",
                version: env!("CARGO_PKG_VERSION"),
            },
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config: cfg.clone(),
            seeds: Seeds {
                run: cfg.seed,
                folds: cfg.seed,
                gw: cfg.gw.solver.seed,
                synth: cfg.synth.as_ref().filter(|_| cfg.has(Stage::Synth)).map(|s| s.seed),
            },
            inputs: ResolvedInputs {
                manifest: manifest_path.display().to_string(),
                n_stimuli: n,
                activations: act_names.clone(),
                responses: resp_names.clone(),
                halves: if cfg.has(Stage::Reliability) { halves.clone() } else { BTreeMap::new() },
            },
            ceiling,
            reliability,
            pca: pca_info,
            rows,
            stats,
            warnings,
        };
        let files = output::write_all(&out_dir, &report, &voxel_scores)?;
        Ok(RunOutcome {
            report,
            voxel_scores,
            output_dir: out_dir.clone(),
            files,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, idx: usize, cond: &str, subject: &str, score: f64) -> Row {
        Row {
            entry: format!("{model}.{idx}.{cond}"),
            model_id: model.into(),
            unit: "layer".into(),
            unit_index: idx,
            rel_pos: 0.0,
            condition: cond.into(),
            subject: subject.into(),
            n_stimuli: 10,
            n_features: 3,
            n_voxels: 2,
            brain_score: Some(score),
            mean_r: None,
            median_fold_p: None,
            lambda: None,
            brain_score_pca: None,
            cka: None,
            gw_loss: None,
            gw_converged: None,
            gw_iterations: None,
        }
    }

    #[test]
    fn rel_pos_spans_each_model() {
        let mut rows = vec![row("a", 0, "pos", "s", 0.0), row("a", 2, "pos", "s", 0.0), row("a", 1, "pos", "s", 0.0), row("b", 0, "pos", "s", 0.0)];
        assign_rel_pos(&mut rows);
        let pos: Vec<f64> = rows.iter().map(|r| r.rel_pos).collect();
        assert_eq!(pos, vec![0.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn contrast_pairs_on_cell_key() {
        let mut rows = Vec::new();
        for i in 0..6 {
            rows.push(row("m", i, "pos", "s1", 1.0 + i as f64));
            rows.push(row("m", i, "nopos", "s1", 0.1 * i as f64));
        }
        rows.push(row("m", 9, "pos", "s1", 5.0));
        let c = Contrast {
            metric: Metric::BrainScore,
            baseline: "nopos".into(),
            treatment: "pos".into(),
        };
        let res = run_contrast(&c, &rows, 25);
        assert_eq!(res.n_pairs, 6);
        let t = res.test.unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!((t.p - 2.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_pairs_is_reported_not_fatal() {
        let rows = vec![row("m", 0, "pos", "s", 1.0), row("m", 0, "nopos", "s", 0.0)];
        let c = Contrast {
            metric: Metric::BrainScore,
            baseline: "nopos".into(),
            treatment: "pos".into(),
        };
        let res = run_contrast(&c, &rows, 25);
        assert!(res.test.is_none() && res.error.is_some());
    }
}
