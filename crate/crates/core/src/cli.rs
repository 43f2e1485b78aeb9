//! Pipeline orchestration behind the `valsynth` binary: configuration,
//! per-stage seeds, report writing and the run manifest.
//!
//! Every artifact is written with deterministic ordering and formatting and
//! never embeds the output path, so two runs of the same configuration
//! produce byte-identical trees wherever they are written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{
    audit_requests, select_candidates, AuditReport, AuditedQuery, CandidateSelection, DataDistribution,
    ShadowConfig,
};
use crate::cohort::{
    generate_ground_truth, load_cohort, save_cohort, Cohort, CohortFormat, GroundTruthConfig,
};
use crate::dp::{gdp_of_budget, DpSummary, PrivacyBudget};
use crate::error::{Error, Result};
use crate::metrics::{ajs, eprec_aggregate, write_ajs_csv, AjsRow, BinningSpec, EprecRecord, EprecSummary};
use crate::seed;
use crate::synth::{run_cycle, FeedbackNote, GeneratorSpec, SynthConfig};
use crate::validate::{
    discrepancy_report, run_request, DatasetTag, ProvenanceLog, QueryOutput, SdcPolicy, ValidationRequest,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)] // read once from config
pub enum DataSource {
    /// Cohorts drawn from the ground-truth generator, one per cycle.
    GroundTruth {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_first_year")]
        first_year: u32,
        #[serde(default)]
        generator: GroundTruthConfig,
    },
    /// Cohort files, one per cycle, relative to the config file.
    Files { cohorts: Vec<PathBuf>, format: CohortFormat },
}

fn default_n() -> usize {
    120
}

fn default_first_year() -> u32 {
    2022
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::GroundTruth {
            n: default_n(),
            first_year: default_first_year(),
            generator: GroundTruthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { epsilon: 1.0, delta: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub per_label_pool: usize,
    pub final_sample: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self { per_label_pool: d.per_label_pool, final_sample: d.final_sample }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditSettings {
    pub num_in: usize,
    pub num_out: usize,
    pub candidates: CandidateSelection,
}

impl Default for AuditSettings {
    fn default() -> Self {
        let d = ShadowConfig::default();
        Self { num_in: d.num_in, num_out: d.num_out, candidates: CandidateSelection::default() }
    }
}

/// The whole run, read from TOML. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub requests: Option<PathBuf>,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub synth: SynthSettings,
    #[serde(default = "default_generators")]
    pub generators: Vec<GeneratorSpec>,
    #[serde(default)]
    pub sdc: SdcPolicy,
    #[serde(default)]
    pub audit: AuditSettings,
    #[serde(default)]
    pub metrics: BinningSpec,
    /// Excluded from the config hash so the output location never changes
    /// artifact contents.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_cycles() -> usize {
    1
}

fn default_generators() -> Vec<GeneratorSpec> {
    vec![GeneratorSpec::default()]
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::InvalidParameter("cycles must be at least 1".into()));
        }
        self.budget()?;
        self.sdc.validate()?;
        self.metrics.validate()?;
        self.shadow_config(0).validate()?;
        self.synth_config(0).validate(self.generators.len())?;
        match &self.data {
            DataSource::GroundTruth { n, generator, .. } => {
                generator.validate()?;
                if *n < 3 {
                    return Err(Error::InvalidParameter(format!("cohort size {n} is below 3")));
                }
            }
            DataSource::Files { cohorts, .. } => {
                if cohorts.len() < self.cycles {
                    return Err(Error::InvalidParameter(format!(
                        "{} cohort files for {} cycles",
                        cohorts.len(),
                        self.cycles
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.budget.epsilon, self.budget.delta)
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    fn cycle_seed(&self, stage: &str, cycle: usize) -> u64 {
        seed::derive(self.seed, &format!("{stage}/{cycle}"))
    }

    pub fn synth_config(&self, cycle: usize) -> SynthConfig {
        SynthConfig {
            per_label_pool: self.synth.per_label_pool,
            final_sample: self.synth.final_sample,
            seed: self.cycle_seed("synth", cycle),
        }
    }

    pub fn shadow_config(&self, cycle: usize) -> ShadowConfig {
        ShadowConfig {
            num_in: self.audit.num_in,
            num_out: self.audit.num_out,
            seed: self.cycle_seed("audit", cycle),
        }
    }

    /// External generator scripts resolved against the config directory.
    pub fn generator_specs(&self) -> Vec<GeneratorSpec> {
        self.generators
            .iter()
            .map(|g| match g {
                GeneratorSpec::External(ext) => {
                    let mut ext = ext.clone();
                    ext.script = self.resolve(&ext.script);
                    GeneratorSpec::External(ext)
                }
                other => other.clone(),
            })
            .collect()
    }

    /// The real cohort of cycle `cycle` (0-based).
    pub fn real_cohort(&self, cycle: usize) -> Result<Cohort> {
        match &self.data {
            DataSource::GroundTruth { n, first_year, generator } => generate_ground_truth(
                generator,
                *n,
                self.cycle_seed("ground-truth", cycle),
                &(*first_year as usize + cycle).to_string(),
            ),
            DataSource::Files { cohorts, format } => {
                let path = cohorts.get(cycle).ok_or_else(|| {
                    Error::InvalidParameter(format!("no cohort file for cycle {}", cycle + 1))
                })?;
                load_cohort(&self.resolve(path), *format)
            }
        }
    }

    pub fn load_requests(&self, override_path: Option<&Path>) -> Result<Vec<ValidationRequest>> {
        let path = match (override_path, &self.requests) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => return Ok(Vec::new()),
        };
        load_requests(&path)
    }

    fn seeds(&self, cycles: usize) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::new();
        for c in 0..cycles {
            for stage in ["ground-truth", "synth", "audit"] {
                seeds.insert(format!("{stage}/{c}"), self.cycle_seed(stage, c));
            }
        }
        seeds
    }
}

pub fn load_requests(path: &Path) -> Result<Vec<ValidationRequest>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let requests: Vec<ValidationRequest> = serde_json::from_str(&text)?;
    for r in &requests {
        r.query.validate()?;
    }
    Ok(requests)
}

/// A report body together with the run identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub master_seed: u64,
    pub report: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    /// Relative path to SHA-256 of every file written by the run.
    pub files: BTreeMap<String, String>,
}

/// Writes files under one output root and records their digests.
struct RunWriter {
    root: PathBuf,
    config_hash: String,
    master_seed: u64,
    files: BTreeMap<String, String>,
}

impl RunWriter {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.out_dir();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root, config_hash: cfg.hash()?, master_seed: cfg.seed, files: BTreeMap::new() })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let p = self.root.join(rel);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.record(rel)
    }

    fn json<T: Serialize>(&mut self, rel: &str, report: &T) -> Result<()> {
        let stamped =
            Stamped { config_hash: self.config_hash.clone(), master_seed: self.master_seed, report };
        let mut text = serde_json::to_string_pretty(&stamped)?;
        text.push('\n');
        self.bytes(rel, text.as_bytes())
    }

    fn cohort(&mut self, stem: &str, cohort: &Cohort) -> Result<()> {
        let csv = format!("{stem}.csv");
        save_cohort(cohort, &self.path(&csv)?, CohortFormat::LongCsv)?;
        self.record(&csv)?;
        self.record(&format!("{stem}.labels.csv"))?;
        let json = format!("{stem}.json");
        save_cohort(cohort, &self.path(&json)?, CohortFormat::TensorJson)?;
        self.record(&json)
    }

    fn finish(
        mut self,
        command: &str,
        seeds: BTreeMap<String, u64>,
        warnings: Vec<String>,
    ) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            master_seed: self.master_seed,
            seeds,
            warnings,
            files: std::mem::take(&mut self.files),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let p = self.root.join("manifest.json");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }
}

fn budget_warnings(budget: &PrivacyBudget, n: usize) -> Vec<String> {
    let mut out = Vec::new();
    if budget.delta() >= 1.0 / n as f64 {
        let msg = format!(
            "delta {} is at least 1/n = {:.6}; a mechanism could release one record in the clear",
            budget.delta(),
            1.0 / n as f64
        );
        log::warn!("{msg}");
        out.push(msg);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub real: Vec<QueryOutput>,
    pub synthetic: Option<Vec<QueryOutput>>,
}

fn run_all(
    requests: &[ValidationRequest],
    cohort: &Cohort,
    tag: DatasetTag,
    policy: &SdcPolicy,
    log: &ProvenanceLog,
) -> Result<Vec<QueryOutput>> {
    requests.iter().map(|r| run_request(r, cohort, tag, policy, Some(log))).collect()
}

/// Discrepancies of every request released on both sides.
pub fn feedback_from(real: &[QueryOutput], synthetic: &[QueryOutput], cycle: usize) -> Result<FeedbackNote> {
    let notes = real
        .iter()
        .zip(synthetic)
        .filter(|(r, s)| r.values.is_some() && s.values.is_some())
        .map(|(r, s)| discrepancy_report(s, r, cycle))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeedbackNote::merge(cycle, notes))
}

fn audit_report(
    cfg: &RunConfig,
    real: &Cohort,
    requests: &[ValidationRequest],
    cycle: usize,
) -> Result<AuditReport> {
    let budget = cfg.budget()?;
    let shadows = cfg.shadow_config(cycle);
    let targets = select_candidates(real, &cfg.audit.candidates, shadows.seed);
    let queries: Vec<AuditedQuery> = requests.iter().cloned().map(AuditedQuery::Validation).collect();
    audit_requests(
        &queries,
        &DataDistribution::BootstrapOfCohort { cohort: real.clone() },
        real.n(),
        &targets,
        gdp_of_budget(&budget).mu,
        &shadows,
        &cfg.sdc,
    )
}

/// Synthetic cohort, DP summary and manifest for the first cycle.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Manifest> {
    let budget = cfg.budget()?;
    let real = cfg.real_cohort(0)?;
    let warnings = budget_warnings(&budget, real.n());
    let out = run_cycle(&real, &cfg.generator_specs(), &cfg.synth_config(0), &budget, None)?;
    let mut w = RunWriter::new(cfg)?;
    w.cohort("synthetic", &out.synthetic)?;
    w.json("dp_summary.json", &out.summary)?;
    w.finish("synth", cfg.seeds(1), warnings)
}

/// Runs the requests on the real cohort and, when given, a synthetic one.
pub fn cmd_validate(cfg: &RunConfig, requests: Option<&Path>, synthetic: Option<&Path>) -> Result<Manifest> {
    let requests = cfg.load_requests(requests)?;
    let real = cfg.real_cohort(0)?;
    let log = ProvenanceLog::new();
    let real_out = run_all(&requests, &real, DatasetTag::Real, &cfg.sdc, &log)?;
    let mut w = RunWriter::new(cfg)?;
    let synthetic_out = match synthetic {
        Some(path) => {
            let syn = load_cohort(path, format_of(path))?;
            let outs = run_all(&requests, &syn, DatasetTag::Synthetic, &cfg.sdc, &log)?;
            w.json("feedback.json", &feedback_from(&real_out, &outs, 1)?)?;
            Some(outs)
        }
        None => None,
    };
    w.json("outputs.json", &ValidationReport { real: real_out, synthetic: synthetic_out })?;
    w.bytes("provenance.jsonl", log.to_jsonl()?.as_bytes())?;
    w.finish("validate", cfg.seeds(1), Vec::new())
}

pub fn cmd_audit(cfg: &RunConfig, requests: Option<&Path>) -> Result<Manifest> {
    let requests = cfg.load_requests(requests)?;
    let real = cfg.real_cohort(0)?;
    let report = audit_report(cfg, &real, &requests, 0)?;
    let mut w = RunWriter::new(cfg)?;
    w.json("audit.json", &report)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    w.bytes("audit.csv", &csv)?;
    w.finish("audit", cfg.seeds(1), Vec::new())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ajs: Vec<AjsRow>,
    pub eprec: Option<EprecSummary>,
}

/// AJS of a synthetic cohort against the first real cohort, plus EPrec
/// aggregation when a records file is given.
pub fn cmd_metrics(
    cfg: &RunConfig,
    synthetic: &Path,
    method: &str,
    eprec: Option<&Path>,
) -> Result<Manifest> {
    let real = cfg.real_cohort(0)?;
    let syn = load_cohort(synthetic, format_of(synthetic))?;
    let rows = vec![AjsRow {
        dataset: real.year().to_string(),
        method: method.to_string(),
        ajs: ajs(&real, &syn, &cfg.metrics)?,
    }];
    let eprec = match eprec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let records: Vec<EprecRecord> = serde_json::from_str(&text)?;
            Some(eprec_aggregate(&records)?)
        }
        None => None,
    };
    let mut w = RunWriter::new(cfg)?;
    let mut csv = Vec::new();
    write_ajs_csv(&rows, &mut csv)?;
    w.bytes("ajs.csv", &csv)?;
    w.json("metrics.json", &MetricsReport { ajs: rows, eprec })?;
    w.finish("metrics", cfg.seeds(1), Vec::new())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub year: String,
    pub ajs: f64,
    pub dp: DpSummary,
    pub total_mu: f64,
}

/// `cycles` rounds of synthesis, validation, feedback and auditing. Cycle
/// `t` writes into `cycle-t/`; from the second cycle on, `feedback.json`
/// holds the note the generators were adjusted with.
pub fn cmd_cycle(cfg: &RunConfig) -> Result<Manifest> {
    let budget = cfg.budget()?;
    let requests = cfg.load_requests(None)?;
    let mut specs = cfg.generator_specs();
    let mut feedback: Option<FeedbackNote> = None;
    let mut warnings = Vec::new();
    let mut ajs_rows = Vec::new();
    let mut summaries = Vec::new();
    let mut w = RunWriter::new(cfg)?;

    for t in 0..cfg.cycles {
        let dir = format!("cycle-{}", t + 1);
        let real = cfg.real_cohort(t)?;
        warnings
            .extend(budget_warnings(&budget, real.n()).into_iter().map(|m| format!("cycle {}: {m}", t + 1)));
        let out = run_cycle(&real, &specs, &cfg.synth_config(t), &budget, feedback.as_ref())?;
        if let Some(note) = &feedback {
            w.json(&format!("{dir}/feedback.json"), note)?;
        }
        w.cohort(&format!("{dir}/synthetic"), &out.synthetic)?;
        w.json(&format!("{dir}/dp_summary.json"), &out.summary)?;
        w.json(&format!("{dir}/generators.json"), &out.specs)?;

        let log = ProvenanceLog::new();
        let real_out = run_all(&requests, &real, DatasetTag::Real, &cfg.sdc, &log)?;
        let syn_out = run_all(&requests, &out.synthetic, DatasetTag::Synthetic, &cfg.sdc, &log)?;
        let note = feedback_from(&real_out, &syn_out, t + 1)?;
        w.json(
            &format!("{dir}/outputs.json"),
            &ValidationReport { real: real_out, synthetic: Some(syn_out) },
        )?;
        w.bytes(&format!("{dir}/provenance.jsonl"), log.to_jsonl()?.as_bytes())?;
        w.json(&format!("{dir}/discrepancy.json"), &note)?;

        let report = audit_report(cfg, &real, &requests, t)?;
        w.json(&format!("{dir}/audit.json"), &report)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        w.bytes(&format!("{dir}/audit.csv"), &csv)?;

        let score = ajs(&real, &out.synthetic, &cfg.metrics)?;
        ajs_rows.push(AjsRow {
            dataset: real.year().to_string(),
            method: "statistical".to_string(),
            ajs: score,
        });
        summaries.push(CycleSummary {
            cycle: t + 1,
            year: real.year().to_string(),
            ajs: score,
            dp: out.summary.clone(),
            total_mu: report.total_mu(),
        });
        specs = out.specs;
        feedback = Some(note);
    }
    let mut csv = Vec::new();
    write_ajs_csv(&ajs_rows, &mut csv)?;
    w.bytes("ajs.csv", &csv)?;
    w.json("cycles.json", &summaries)?;
    w.finish("cycle", cfg.seeds(cfg.cycles), warnings)
}

/// `.json` files are tensor-json; anything else is long-csv.
pub fn format_of(path: &Path) -> CohortFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => CohortFormat::TensorJson,
        _ => CohortFormat::LongCsv,
    }
}
