//! Experiment configuration, runs, the architecture × method grid, and replay.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::{self, history_jsonl, Algorithm, FederationConfig, FederationOutcome, RoundRecord};
use crate::metrics::{report_csv, ReportEntry, RegionMetrics};
use crate::nets::{checkpoint_bytes, Architecture, NetConfig};
use crate::objectives::DiceObjective;
use crate::optim::AdamWHyper;
use crate::synthdata::{
    build_manifest, generate_cohort, preprocess_site, CohortSpec, DatasetManifest, Modality, Preprocessing,
    Sample, SiteDataset,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Training regime of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name")]
pub enum Method {
    #[serde(rename = "centralized")]
    Centralized,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx { mu: f64 },
}

impl Method {
    pub fn algorithm(&self) -> Option<Algorithm> {
        match *self {
            Method::Centralized => None,
            Method::FedAvg => Some(Algorithm::FedAvg),
            Method::FedProx { mu } => Some(Algorithm::FedProx { mu }),
        }
    }

    /// Row label in the style of the results tables.
    pub fn label(&self, arch: Architecture) -> String {
        match self {
            Method::Centralized => arch.display_name().to_string(),
            Method::FedAvg => format!("{}+FedAvg", arch.display_name()),
            Method::FedProx { mu } => format!("{}+FedProx(mu={mu})", arch.display_name()),
        }
    }

    /// Table order: centralized, FedAvg, then FedProx by ascending μ.
    fn sort_key(&self) -> (u8, f64) {
        match *self {
            Method::Centralized => (0, 0.0),
            Method::FedAvg => (1, 0.0),
            Method::FedProx { mu } => (2, mu),
        }
    }
}

/// Master seed of the frozen benchmark.
pub const BENCHMARK_SEED: u64 = 2024;

/// Default FedProx μ sweep.
pub const MU_SWEEP: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Communication rounds; for centralized runs, epochs.
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWHyper,
    pub objective: DiceObjective,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let f = FederationConfig::default();
        TrainingConfig {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            optimizer: f.optimizer,
            objective: f.objective,
        }
    }
}

/// Everything that determines a run. `out_dir` and `threads` only affect
/// where results go and how fast they arrive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub method: Method,
    pub net: NetConfig,
    pub training: TrainingConfig,
    pub sites: CohortSpec,
    pub preprocess: Preprocessing,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            method: Method::FedAvg,
            net: NetConfig::default(),
            training: TrainingConfig::default(),
            sites: CohortSpec::default(),
            preprocess: Preprocessing::default(),
            out_dir: None,
            threads: 1,
        }
    }
}

impl ExperimentConfig {
    /// The frozen benchmark: seven sites of 60 samples on average, 32×32
    /// phantoms, 50 rounds of one local epoch, seed [`BENCHMARK_SEED`].
    pub fn benchmark(method: Method, heterogeneity: f64) -> Self {
        ExperimentConfig {
            seed: BENCHMARK_SEED,
            method,
            sites: CohortSpec {
                heterogeneity,
                ..CohortSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    /// K=2, 32×32, 20 samples per site, 3 rounds.
    pub fn smoke() -> Self {
        ExperimentConfig {
            training: TrainingConfig {
                rounds: 3,
                ..TrainingConfig::default()
            },
            sites: CohortSpec {
                sites: 2,
                samples_per_site: 20,
                imbalance_alpha: None,
                image_size: 32,
                ..CohortSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version: {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if let Err(Error::InvalidConfig(p)) = self.net.validate() {
            out.extend(p.into_iter().map(|m| format!("net.{m}")));
        }
        if self.sites.image_size % self.net.spatial_multiple() != 0 {
            out.push(format!(
                "sites.image_size: {} is not divisible by 2^depth = {}",
                self.sites.image_size,
                self.net.spatial_multiple()
            ));
        }
        if self.net.in_channels != 1 {
            out.push("net.in_channels: phantoms have a single channel".into());
        }
        if self.net.num_classes != crate::objectives::NUM_REGIONS {
            out.push(format!("net.num_classes: must be {}", crate::objectives::NUM_REGIONS));
        }
        let fed = self.federation_config();
        out.extend(fed.problems().into_iter().map(|m| m.replace("federation.", "training.")));
        out.extend(self.sites.validate());
        out.extend(self.preprocess.validate());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            init_seed: self.seed,
            ..self.net.clone()
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            algorithm: self.method.algorithm().unwrap_or(Algorithm::FedAvg),
            rounds: self.training.rounds,
            local_epochs: self.training.local_epochs,
            batch_size: self.training.batch_size,
            optimizer: self.training.optimizer,
            objective: self.training.objective.clone(),
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn method_label(&self) -> String {
        self.method.label(self.net.architecture)
    }

    /// SHA-256 over the canonical JSON of every semantic field.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
            m.remove("threads");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub round_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub method: String,
    pub history: Vec<RoundRecord>,
    pub best_round: usize,
    pub best_val_dice: f64,
    /// Best-model test reports for T1, T2 and all modalities pooled.
    pub reports: Vec<ReportEntry>,
    pub timings: Timings,
}

impl RunRecord {
    pub fn report(&self, modality: &str) -> Option<&ReportEntry> {
        self.reports.iter().find(|r| r.modality == modality)
    }

    /// Mean foreground test Dice over all test images.
    pub fn test_dice(&self) -> f64 {
        self.report(ALL_MODALITIES).map_or(f64::NAN, |r| r.report.average.dice)
    }

    pub fn csv(&self) -> String {
        report_csv(&self.reports)
    }

    /// Optimizer steps summed over all clients and rounds.
    pub fn gradient_steps(&self) -> usize {
        let b = self.config.training.batch_size;
        let epochs = match self.config.method {
            Method::Centralized => 1,
            _ => self.config.training.local_epochs,
        };
        self.history
            .iter()
            .map(|r| epochs * r.client_losses.iter().map(|c| c.samples.div_ceil(b)).sum::<usize>())
            .sum()
    }

    pub fn val_dice_series(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.val_dice).collect()
    }
}

/// Sample variance of the changes `v[t] − v[t−1]` between consecutive rounds.
/// Zero for fewer than three values.
pub fn round_to_round_variance(series: &[f64]) -> f64 {
    let d: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    if d.len() < 2 {
        return 0.0;
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (d.len() - 1) as f64
}

pub const ALL_MODALITIES: &str = "all";

/// Sites after generation and per-site preprocessing, plus the manifest of the raw data.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Vec<SiteDataset>, DatasetManifest)> {
    let mut sites = generate_cohort(&config.sites, config.seed)?;
    let manifest = build_manifest(&sites, &config.sites, config.seed);
    for s in &mut sites {
        preprocess_site(s, &config.preprocess)?;
    }
    Ok((sites, manifest))
}

fn reports_by_modality(label: &str, outcome: &FederationOutcome, test: &[Sample]) -> Result<Vec<ReportEntry>> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        let subset: Vec<Sample> = test.iter().filter(|s| s.modality == m).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        out.push(ReportEntry {
            method: label.to_string(),
            modality: m.name().to_string(),
            report: federation::evaluate_model(&outcome.best_model, &subset)?,
        });
    }
    out.push(ReportEntry {
        method: label.to_string(),
        modality: ALL_MODALITIES.to_string(),
        report: outcome.report.clone(),
    });
    Ok(out)
}

/// A finished run with the artifacts that get written to disk.
pub struct RunArtifacts {
    pub record: RunRecord,
    pub checkpoint: Vec<u8>,
    pub manifest: DatasetManifest,
}

/// Generates data, trains, evaluates the best model, and writes artifacts if
/// the config names an output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    let art = run_experiment_artifacts(config)?;
    if let Some(dir) = &config.out_dir {
        write_artifacts(dir, &art)?;
    }
    Ok(art.record)
}

pub fn run_experiment_artifacts(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let t0 = Instant::now();
    let (sites, manifest) = prepare_data(config)?;
    let data_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let fed = config.federation_config();
    let net = config.net_config();
    let outcome = match config.method {
        Method::Centralized => federation::run_centralized(&fed, &net, &SiteDataset::pool(&sites))?,
        _ => federation::run_federation(&fed, &net, &sites)?,
    };
    let train_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let test: Vec<Sample> = sites.iter().flat_map(|s| s.test.iter().cloned()).collect();
    let label = config.method_label();
    let reports = reports_by_modality(&label, &outcome, &test)?;
    let eval_seconds = t2.elapsed().as_secs_f64();

    let best = outcome.server.best.as_ref().expect("at least one round ran");
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        config_hash: config.config_hash(),
        method: label,
        history: outcome.server.history.clone(),
        best_round: best.round,
        best_val_dice: best.val_dice,
        reports,
        timings: Timings {
            data_seconds,
            train_seconds,
            eval_seconds,
            round_seconds: outcome.server.round_seconds.clone(),
        },
    };
    Ok(RunArtifacts {
        record,
        checkpoint: checkpoint_bytes(&outcome.best_model),
        manifest,
    })
}

pub const RECORD_FILE: &str = "record.json";
pub const REPORT_FILE: &str = "report.csv";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_FILES: [&str; 5] = [RECORD_FILE, REPORT_FILE, HISTORY_FILE, CHECKPOINT_FILE, MANIFEST_FILE];

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| Error::Serde(e.to_string()))
}

pub fn write_artifacts(dir: &Path, art: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(RECORD_FILE), &to_json(&art.record)?)?;
    write(&dir.join(REPORT_FILE), art.record.csv().as_bytes())?;
    write(&dir.join(HISTORY_FILE), history_jsonl(&art.record.history)?.as_bytes())?;
    write(&dir.join(CHECKPOINT_FILE), &art.checkpoint)?;
    write(&dir.join(MANIFEST_FILE), &to_json(&art.manifest)?)
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Outcome of re-running a stored record.
#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub mismatches: Vec<String>,
}

impl Verdict {
    pub fn is_identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_identical() {
            return write!(f, "identical");
        }
        writeln!(f, "differs in {} field(s):", self.mismatches.len())?;
        for m in &self.mismatches {
            writeln!(f, "  {m}")?;
        }
        Ok(())
    }
}

/// Metric comparisons allow this much slack so records from another
/// implementation can be checked too.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= REPLAY_TOLERANCE
}

fn compare_opt(out: &mut Vec<String>, name: &str, a: Option<f64>, b: Option<f64>) {
    match (a, b) {
        (Some(x), Some(y)) if close(x, y) => {}
        (None, None) => {}
        _ => out.push(format!("{name}: stored {a:?}, replayed {b:?}")),
    }
}

fn compare_region(out: &mut Vec<String>, prefix: &str, a: &RegionMetrics, b: &RegionMetrics) {
    for (name, x, y) in [
        ("dice", a.dice, b.dice),
        ("miou", a.iou, b.iou),
        ("precision", a.precision, b.precision),
        ("recall", a.recall, b.recall),
    ] {
        if !close(x, y) {
            out.push(format!("{prefix}.{name}: stored {x}, replayed {y}"));
        }
    }
    compare_opt(out, &format!("{prefix}.assd"), a.assd, b.assd);
    compare_opt(out, &format!("{prefix}.hd95"), a.hd95, b.hd95);
    if a.undefined != b.undefined {
        out.push(format!("{prefix}.undefined: stored {}, replayed {}", a.undefined, b.undefined));
    }
}

/// Lists every field where `replayed` disagrees with `stored`.
pub fn compare_records(stored: &RunRecord, replayed: &RunRecord) -> Vec<String> {
    let mut out = Vec::new();
    if stored.config_hash != stored.config.config_hash() {
        out.push("config_hash: does not match the stored config".into());
    }
    if stored.config_hash != replayed.config_hash {
        out.push(format!(
            "config_hash: stored {}, replayed {}",
            stored.config_hash, replayed.config_hash
        ));
    }
    if stored.best_round != replayed.best_round {
        out.push(format!("best_round: stored {}, replayed {}", stored.best_round, replayed.best_round));
    }
    if !close(stored.best_val_dice, replayed.best_val_dice) {
        out.push(format!(
            "best_val_dice: stored {}, replayed {}",
            stored.best_val_dice, replayed.best_val_dice
        ));
    }
    if stored.history.len() != replayed.history.len() {
        out.push(format!(
            "history: stored {} rounds, replayed {}",
            stored.history.len(),
            replayed.history.len()
        ));
    }
    for (a, b) in stored.history.iter().zip(&replayed.history) {
        if !close(a.val_dice, b.val_dice) {
            out.push(format!("history[{}].val_dice: stored {}, replayed {}", a.round, a.val_dice, b.val_dice));
        }
        let la: Vec<f64> = a.client_losses.iter().map(|c| c.loss).collect();
        let lb: Vec<f64> = b.client_losses.iter().map(|c| c.loss).collect();
        if la.len() != lb.len() || la.iter().zip(&lb).any(|(x, y)| !close(*x, *y)) {
            out.push(format!("history[{}].client_losses differ", a.round));
        }
    }
    for a in &stored.reports {
        let Some(b) = replayed.report(&a.modality) else {
            out.push(format!("reports.{}: missing from replay", a.modality));
            continue;
        };
        for (i, (ra, rb)) in a.report.regions.iter().zip(&b.report.regions).enumerate() {
            let region = crate::objectives::Region::FOREGROUND[i].name();
            compare_region(&mut out, &format!("{}.{region}", a.modality), ra, rb);
        }
        compare_region(&mut out, &format!("{}.average", a.modality), &a.report.average, &b.report.average);
    }
    out
}

/// Re-runs a stored run directory and compares everything except timings.
pub fn replay(dir: &Path) -> Result<Verdict> {
    let missing: Vec<String> = RUN_FILES
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let stored = read_record(&dir.join(RECORD_FILE))?;
    let config = ExperimentConfig {
        out_dir: None,
        ..stored.config.clone()
    };
    let art = run_experiment_artifacts(&config)?;
    let mut mismatches = compare_records(&stored, &art.record);

    let stored_manifest = crate::synthdata::read_manifest(&dir.join(MANIFEST_FILE))?;
    if stored_manifest != art.manifest {
        mismatches.push("manifest: dataset lineage or checksums differ".into());
    }
    let csv = std::fs::read(dir.join(REPORT_FILE)).map_err(|e| Error::io(dir.join(REPORT_FILE), e))?;
    if csv != art.record.csv().as_bytes() {
        mismatches.push(format!("{REPORT_FILE}: bytes differ"));
    }
    let ckpt = std::fs::read(dir.join(CHECKPOINT_FILE)).map_err(|e| Error::io(dir.join(CHECKPOINT_FILE), e))?;
    if ckpt != art.checkpoint {
        mismatches.push(format!("{CHECKPOINT_FILE}: weights differ"));
    }
    Ok(Verdict { mismatches })
}

/// One cell of the benchmark grid.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub architecture: Architecture,
    pub method: Method,
    pub outcome: std::result::Result<RunRecord, String>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
}

impl GridResult {
    /// Reports of successful cells, grouped by modality and in table order.
    pub fn entries(&self) -> Vec<ReportEntry> {
        let mut out = Vec::new();
        let mut modalities: Vec<String> = Vec::new();
        for c in &self.cells {
            if let Ok(r) = &c.outcome {
                for e in &r.reports {
                    if !modalities.contains(&e.modality) {
                        modalities.push(e.modality.clone());
                    }
                }
            }
        }
        for m in &modalities {
            for c in &self.cells {
                if let Ok(r) = &c.outcome {
                    out.extend(r.reports.iter().filter(|e| &e.modality == m).cloned());
                }
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        report_csv(&self.entries())
    }

    pub fn failures(&self) -> Vec<(String, &str)> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().err().map(|e| (c.method.label(c.architecture), e.as_str())))
            .collect()
    }

    pub fn cell(&self, arch: Architecture, method: Method) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.architecture == arch && c.method == method)
    }
}

/// Default grid methods: centralized, FedAvg and the FedProx μ sweep.
pub fn default_methods() -> Vec<Method> {
    let mut m = vec![Method::Centralized, Method::FedAvg];
    m.extend(MU_SWEEP.iter().map(|&mu| Method::FedProx { mu }));
    m
}

/// Runs every (architecture, method) cell from `base`; a failing cell is
/// recorded and the rest still run. Cells come back in table order.
pub fn run_grid(base: &ExperimentConfig, architectures: &[Architecture], methods: &[Method]) -> Result<GridResult> {
    if architectures.is_empty() || methods.is_empty() {
        return Err(Error::Empty("the grid needs at least one architecture and one method".into()));
    }
    let mut specs: Vec<(Architecture, Method)> = architectures
        .iter()
        .flat_map(|&a| methods.iter().map(move |&m| (a, m)))
        .collect();
    specs.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.sort_key().0.cmp(&b.1.sort_key().0))
            .then(a.1.sort_key().1.total_cmp(&b.1.sort_key().1))
    });
    specs.dedup();
    let run_cell = |&(architecture, method): &(Architecture, Method)| {
        let config = ExperimentConfig {
            method,
            net: NetConfig {
                architecture,
                ..base.net.clone()
            },
            out_dir: base
                .out_dir
                .as_ref()
                .map(|d| d.join(cell_dir_name(architecture, method))),
            threads: 1,
            ..base.clone()
        };
        GridCell {
            architecture,
            method,
            outcome: run_experiment(&config).map_err(|e| e.to_string()),
        }
    };
    let cells: Vec<GridCell> = if base.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(base.threads)
            .build()
            .map_err(|e| Error::field("threads", e.to_string()))?;
        pool.install(|| specs.par_iter().map(run_cell).collect())
    } else {
        specs.iter().map(run_cell).collect()
    };
    let result = GridResult { cells };
    if let Some(dir) = &base.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("grid.csv"), result.csv().as_bytes())?;
        let status: Vec<serde_json::Value> = result
            .cells
            .iter()
            .map(|c| {
                serde_json::json!({
                    "method": c.method.label(c.architecture),
                    "status": if c.outcome.is_ok() { "ok" } else { "failed" },
                    "error": c.outcome.as_ref().err(),
                })
            })
            .collect();
        write(&dir.join("grid_status.json"), &to_json(&status)?)?;
    }
    Ok(result)
}

pub fn cell_dir_name(arch: Architecture, method: Method) -> String {
    match method {
        Method::Centralized => format!("{}_centralized", arch.name()),
        Method::FedAvg => format!("{}_fedavg", arch.name()),
        Method::FedProx { mu } => format!("{}_fedprox_mu{mu}", arch.name()),
    }
}
