use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use repalign_core::encode::RidgeConfig;
use repalign_core::repgeo::GwSolverConfig;
use repalign_core::synth::SweepSpec;
use repalign_core::tensorio::{resolve_manifest_path, Manifest};

use crate::error::CliError;

pub const SEED_ENV: &str = "REPALIGN_SEED";
pub const DEFAULT_OUTPUT_DIR: &str = "repalign_out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Reliability,
    Score,
    Pca,
    Cka,
    Gw,
    Stats,
}

/// Per-cell quantities that contrasts and regressions can refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BrainScore,
    MeanR,
    BrainScorePca,
    Cka,
    GwLoss,
    RelPos,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::BrainScore => "brain_score",
            Metric::MeanR => "mean_r",
            Metric::BrainScorePca => "brain_score_pca",
            Metric::Cka => "cka",
            Metric::GwLoss => "gw_loss",
            Metric::RelPos => "rel_pos",
        }
    }

    /// Stage that produces the metric, if any.
    pub fn stage(self) -> Option<Stage> {
        match self {
            Metric::BrainScore | Metric::MeanR => Some(Stage::Score),
            Metric::BrainScorePca => Some(Stage::Pca),
            Metric::Cka => Some(Stage::Cka),
            Metric::GwLoss => Some(Stage::Gw),
            Metric::RelPos => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    /// Manifest file or the directory holding `manifest.json`.
    pub manifest: PathBuf,
    /// Activation entry names; all activation entries when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<String>>,
    /// Response entry names; all response entries not used as split halves
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSettings {
    pub folds: usize,
    pub ridge: RidgeConfig,
    /// Fixed ceiling; estimated leave-one-subject-out when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<f64>,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        Self {
            folds: 5,
            ridge: RidgeConfig::default(),
            ceiling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GwSettings {
    pub solver: GwSolverConfig,
    /// PCA components for RDM construction; `min(50, n − 1, d)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca_dims: Option<usize>,
    /// Stimulus masses shared by both spaces (normalized); uniform when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilitySettings {
    pub fraction: f64,
    /// Subject id → split-half entry names. Filled in by the synth stage.
    pub halves: BTreeMap<String, (String, String)>,
}

impl Default for ReliabilitySettings {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            halves: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSettings {
    pub components: usize,
}

impl Default for PcaSettings {
    fn default() -> Self {
        Self { components: 50 }
    }
}

/// Paired comparison of one metric between two conditions; cells are paired
/// on model, unit, unit index and subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub metric: Metric,
    pub baseline: String,
    pub treatment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OlsSpec {
    pub outcome: Metric,
    pub predictors: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSettings {
    /// `nopos` vs `pos` for every computed metric when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrasts: Option<Vec<Contrast>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ols: Option<OlsSpec>,
    pub wilcoxon_exact_threshold: usize,
}

impl Default for StatsSettings {
    fn default() -> Self {
        Self {
            contrasts: None,
            ols: None,
            wilcoxon_exact_threshold: repalign_core::stats::DEFAULT_EXACT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub pipelines: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Inputs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SweepSpec>,
    #[serde(default)]
    pub score: ScoreSettings,
    #[serde(default)]
    pub gw: GwSettings,
    #[serde(default)]
    pub reliability: ReliabilitySettings,
    #[serde(default)]
    pub pca: PcaSettings,
    #[serde(default)]
    pub stats: StatsSettings,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Value of the seed environment variable, if set.
    pub seed: Option<String>,
}

impl Overrides {
    pub fn from_env(workers: Option<usize>, output_dir: Option<PathBuf>) -> Self {
        Self {
            workers,
            output_dir,
            seed: std::env::var(SEED_ENV).ok(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        // Relative input paths are taken relative to the config file.
        if let (Some(inputs), Some(dir)) = (cfg.inputs.as_mut(), path.parent()) {
            if inputs.manifest.is_relative() {
                inputs.manifest = dir.join(&inputs.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.pipelines.contains(&stage)
    }

    /// Applies overrides and propagates the run seed into every seeded
    /// component, so the embedded config alone reproduces the run.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self, CliError> {
        if let Some(raw) = &overrides.seed {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{raw}` is not a non-negative integer")))?;
        }
        if overrides.workers.is_some() {
            self.workers = overrides.workers;
        }
        if overrides.output_dir.is_some() {
            self.output_dir = overrides.output_dir.clone();
        }
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from(DEFAULT_OUTPUT_DIR));
        }
        self.pipelines.sort();
        self.pipelines.dedup();
        if self.has(Stage::Synth) {
            let spec = self.synth.get_or_insert_with(SweepSpec::default);
            spec.seed = self.seed;
        }
        self.gw.solver.seed = self.seed;
        Ok(self)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    /// Checks everything that can be checked without loading matrices.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.pipelines.is_empty() {
            return bad("`pipelines` is empty".into());
        }
        if self.workers == Some(0) {
            return bad("`workers` must be >= 1".into());
        }
        let metric_stages = [Stage::Score, Stage::Pca, Stage::Cka, Stage::Gw];
        if !metric_stages.iter().any(|s| self.has(*s)) {
            return bad("select at least one of score, pca, cka, gw".into());
        }
        if self.has(Stage::Synth) {
            if self.inputs.is_some() {
                return bad("`inputs` and the synth stage are mutually exclusive".into());
            }
            if let Some(spec) = &self.synth {
                spec.validate().map_err(|e| CliError::Config(format!("synth: {e}")))?;
            }
        } else {
            let Some(inputs) = &self.inputs else {
                return bad("`inputs` is required unless the synth stage is selected".into());
            };
            self.check_manifest(inputs)?;
        }

        if self.score.folds < 2 {
            return bad(format!("score.folds = {} must be >= 2", self.score.folds));
        }
        self.score.ridge.validate().map_err(|e| CliError::Config(format!("score.ridge: {e}")))?;
        if let Some(c) = self.score.ceiling {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("score.ceiling = {c} must be > 0"));
            }
        }
        self.gw.solver.validate().map_err(|e| CliError::Config(format!("gw.solver: {e}")))?;
        if self.gw.pca_dims == Some(0) {
            return bad("gw.pca_dims must be >= 1".into());
        }
        if let Some(m) = &self.gw.masses {
            if m.is_empty() || m.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("gw.masses must be positive".into());
            }
        }
        let f = self.reliability.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("reliability.fraction = {f} outside (0, 1]"));
        }
        if self.has(Stage::Reliability) && !self.has(Stage::Synth) && self.reliability.halves.is_empty() {
            return bad("reliability stage needs `reliability.halves`".into());
        }
        if self.pca.components == 0 {
            return bad("pca.components must be >= 1".into());
        }
        let produced = |m: Metric| m.stage().is_none_or(|s| self.has(s));
        if let Some(contrasts) = &self.stats.contrasts {
            for c in contrasts {
                if !produced(c.metric) {
                    return bad(format!("contrast metric `{}` is not computed by the selected stages", c.metric.as_str()));
                }
                if c.baseline == c.treatment {
                    return bad(format!("contrast on `{}` compares `{}` with itself", c.metric.as_str(), c.baseline));
                }
            }
        }
        if let Some(ols) = &self.stats.ols {
            if ols.predictors.is_empty() {
                return bad("stats.ols.predictors is empty".into());
            }
            for m in ols.predictors.iter().chain(std::iter::once(&ols.outcome)) {
                if !produced(*m) {
                    return bad(format!("ols metric `{}` is not computed by the selected stages", m.as_str()));
                }
            }
        }
        Ok(())
    }

    fn check_manifest(&self, inputs: &Inputs) -> Result<(), CliError> {
        let path = resolve_manifest_path(&inputs.manifest);
        if !path.is_file() {
            return Err(CliError::Config(format!("manifest not found: {}", path.display())));
        }
        let manifest = Manifest::read(&path).map_err(CliError::Data)?;
        let half_names = self.reliability.halves.values().flat_map(|(a, b)| [a, b]);
        let named = inputs
            .activations
            .iter()
            .flatten()
            .chain(inputs.responses.iter().flatten())
            .chain(half_names);
        for name in named {
            if manifest.entry(name).is_none() {
                return Err(CliError::Config(format!("entry `{name}` not found in {}", path.display())));
            }
        }
        Ok(())
    }
}
