//! Stage-1 synthesis. Generators only ever see the [`DpSummary`], never the
//! real cohort, so everything produced here is post-processing of the DP
//! release.
//!
//! Two generator kinds exist: a zero-inflated gamma model driven by the DP
//! zero proportions, and an adapter for external scripts following the
//! `--save_path/--num_samples/--seed` contract. A panel of several specs is
//! pooled per label and subsampled.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{
    draw_series, AchievementLabel, Cohort, MinuteGrid, StudentRecord, TensorJson, Window, N_WINDOWS, WEEKS,
};
use crate::dp::{release_summary, DpSummary, PrivacyBudget};
use crate::error::{Error, Result};
use crate::seed;

/// Largest relative change one feedback step may apply to a parameter.
pub const MAX_FEEDBACK_STEP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    /// Multiplies the DP zero proportion of the window.
    pub zero_factor: f64,
    pub shape: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatisticalParams {
    /// `windows[label][window]`.
    pub windows: [[WindowParams; N_WINDOWS]; 3],
    /// Shape of the mean-one per-student activity multiplier.
    pub student_shape: f64,
}

impl Default for StatisticalParams {
    fn default() -> Self {
        let p = |shape, scale| WindowParams { zero_factor: 1.0, shape, scale };
        // heavier evening and morning study for higher achievers
        Self {
            windows: [
                [p(1.2, 20.0), p(1.5, 26.0), p(1.5, 24.0), p(1.8, 32.0)],
                [p(1.2, 22.0), p(1.5, 34.0), p(1.5, 26.0), p(1.8, 44.0)],
                [p(1.3, 24.0), p(1.6, 42.0), p(1.6, 28.0), p(2.0, 56.0)],
            ],
            student_shape: 2.5,
        }
    }
}

impl StatisticalParams {
    pub fn validate(&self) -> Result<()> {
        for row in &self.windows {
            for w in row {
                if !(w.zero_factor >= 0.0 && w.zero_factor.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "zero factor {} must be a finite nonnegative number",
                        w.zero_factor
                    )));
                }
                if !(w.shape > 0.0 && w.shape.is_finite()) {
                    return Err(Error::InvalidParameter(format!("nonpositive shape {}", w.shape)));
                }
                if !(w.scale > 0.0 && w.scale.is_finite()) {
                    return Err(Error::InvalidParameter(format!("nonpositive scale {}", w.scale)));
                }
            }
        }
        if !(self.student_shape > 0.0 && self.student_shape.is_finite()) {
            return Err(Error::InvalidParameter(format!("nonpositive student shape {}", self.student_shape)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalGenerator {
    pub script: PathBuf,
    /// Program used to run the script; `python3` for `.py` files when unset.
    #[serde(default)]
    pub interpreter: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Suggestion lines from the previous cycle, exported as `SYNTH_FEEDBACK`.
    #[serde(default)]
    pub feedback: Vec<String>,
}

fn default_timeout() -> u64 {
    120
}

impl ExternalGenerator {
    pub fn new(script: impl Into<PathBuf>) -> Self {
        Self {
            script: script.into(),
            interpreter: None,
            timeout_secs: default_timeout(),
            feedback: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)] // a handful per run
pub enum GeneratorSpec {
    Statistical(StatisticalParams),
    External(ExternalGenerator),
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::Statistical(StatisticalParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Records generated per label by each generator.
    pub per_label_pool: usize,
    /// Records kept after pooling.
    pub final_sample: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { per_label_pool: 1000, final_sample: 120, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self, generators: usize) -> Result<()> {
        if self.per_label_pool == 0 || self.final_sample == 0 {
            return Err(Error::InvalidParameter("pool and sample sizes must be positive".into()));
        }
        if self.final_sample > 3 * self.per_label_pool * generators.max(1) {
            return Err(Error::InvalidParameter(format!(
                "final sample {} exceeds the pooled {} records",
                self.final_sample,
                3 * self.per_label_pool * generators.max(1)
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Feedback

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackStatistic {
    Mean,
    Max,
    ZeroFraction,
    Correlation,
    OlsCoefficient,
    Intercept,
    Value,
}

impl FeedbackStatistic {
    fn name(self) -> &'static str {
        match self {
            FeedbackStatistic::Mean => "mean minutes",
            FeedbackStatistic::Max => "maximum minutes",
            FeedbackStatistic::ZeroFraction => "zero fraction",
            FeedbackStatistic::Correlation => "total-minutes/label correlation",
            FeedbackStatistic::OlsCoefficient => "regression coefficient",
            FeedbackStatistic::Intercept => "regression intercept",
            FeedbackStatistic::Value => "value",
        }
    }
}

/// One output dimension's synthetic-vs-real discrepancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDelta {
    pub request_id: String,
    pub dimension: usize,
    pub label: Option<AchievementLabel>,
    pub window: Option<Window>,
    pub statistic: FeedbackStatistic,
    pub real: f64,
    pub synthetic: f64,
    /// Signed relative difference, synthetic minus real.
    pub delta: f64,
}

pub type FeedbackKey = (Option<AchievementLabel>, Option<Window>, FeedbackStatistic);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackNote {
    pub cycle: usize,
    pub deltas: Vec<FeatureDelta>,
    pub rendered_text: Vec<String>,
}

impl FeedbackNote {
    pub fn new(cycle: usize, deltas: Vec<FeatureDelta>) -> Self {
        let rendered_text = render(&deltas);
        Self { cycle, deltas, rendered_text }
    }

    pub fn merge(cycle: usize, notes: impl IntoIterator<Item = FeedbackNote>) -> Self {
        Self::new(cycle, notes.into_iter().flat_map(|n| n.deltas).collect())
    }

    /// Mean delta per (label, window, statistic).
    pub fn per_feature_deltas(&self) -> BTreeMap<FeedbackKey, f64> {
        let mut acc: BTreeMap<FeedbackKey, (f64, usize)> = BTreeMap::new();
        for d in &self.deltas {
            let e = acc.entry((d.label, d.window, d.statistic)).or_insert((0.0, 0));
            e.0 += d.delta;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
    }
}

fn render(deltas: &[FeatureDelta]) -> Vec<String> {
    let mut ranked: Vec<&FeatureDelta> = deltas.iter().filter(|d| d.delta != 0.0).collect();
    ranked.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()));
    ranked
        .into_iter()
        .take(3)
        .map(|d| {
            let who = d.label.map_or("all students".to_string(), |l| format!("{l} achievers"));
            let window = d.window.map_or("overall".to_string(), |w| w.to_string());
            let direction = if d.delta > 0.0 { "higher" } else { "lower" };
            format!(
                "{who}, {window} {}: synthetic is {:.1}% {direction} than real ({}[{}]); move synthetic {} toward real",
                d.statistic.name(),
                d.delta.abs() * 100.0,
                d.request_id,
                d.dimension,
                if d.delta > 0.0 { "down" } else { "up" },
            )
        })
        .collect()
}

fn step_factor(delta: f64) -> f64 {
    let (lo, hi) = (1.0 - MAX_FEEDBACK_STEP, 1.0 + MAX_FEEDBACK_STEP);
    if delta == 0.0 {
        1.0
    } else if 1.0 + delta <= 0.0 {
        hi
    } else {
        (1.0 / (1.0 + delta)).clamp(lo, hi)
    }
}

/// Moves generator parameters a bounded step against the reported deltas.
///
/// Mean deltas rescale the gamma scale, zero-fraction deltas rescale the
/// zero factor; every other statistic is informational. External
/// generators receive the rendered text unchanged.
pub fn apply_feedback(note: &FeedbackNote, spec: &GeneratorSpec) -> GeneratorSpec {
    match spec {
        GeneratorSpec::External(ext) => {
            let mut ext = ext.clone();
            ext.feedback = note.rendered_text.clone();
            GeneratorSpec::External(ext)
        }
        GeneratorSpec::Statistical(params) => {
            let mut scale = [[1.0f64; N_WINDOWS]; 3];
            let mut zero = [[1.0f64; N_WINDOWS]; 3];
            for ((label, window, stat), delta) in note.per_feature_deltas() {
                let target = match stat {
                    FeedbackStatistic::Mean => &mut scale,
                    FeedbackStatistic::ZeroFraction => &mut zero,
                    _ => continue,
                };
                let f = step_factor(delta);
                for l in AchievementLabel::ALL {
                    if label.is_some_and(|x| x != l) {
                        continue;
                    }
                    for w in Window::ALL {
                        if window.is_some_and(|x| x != w) {
                            continue;
                        }
                        target[l.index()][w.index()] *= f;
                    }
                }
            }
            let bound = |f: f64| f.clamp(1.0 - MAX_FEEDBACK_STEP, 1.0 + MAX_FEEDBACK_STEP);
            let mut out = params.clone();
            for l in 0..3 {
                for w in 0..N_WINDOWS {
                    let p = &mut out.windows[l][w];
                    p.scale *= bound(scale[l][w]);
                    p.zero_factor *= bound(zero[l][w]);
                }
            }
            GeneratorSpec::Statistical(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Generation

fn generate_statistical(
    params: &StatisticalParams,
    label: AchievementLabel,
    summary: &DpSummary,
    count: usize,
    seed: u64,
) -> Result<Vec<MinuteGrid>> {
    params.validate()?;
    let mut rng = seed::rng(seed);
    let student =
        Gamma::new(params.student_shape, 1.0 / params.student_shape).expect("validated student shape");
    let grids = (0..count)
        .map(|_| {
            let multiplier = student.sample(&mut rng);
            let mut grid = [[0u32; WEEKS]; N_WINDOWS];
            for w in Window::ALL {
                let p = &params.windows[label.index()][w.index()];
                let zero_prob = (summary.zero_prop(w) * p.zero_factor).clamp(0.0, 1.0);
                grid[w.index()] = draw_series(&mut rng, zero_prob, p.shape, p.scale, multiplier, w.cap());
            }
            grid
        })
        .collect();
    Ok(grids)
}

/// Runs an external generator script and reads its `(N, 4, 17)` tensor.
///
/// The script is called as `<script> --save_path P --num_samples N --seed S`
/// and must write tensor-json to `P`. `env` is added to its environment.
pub fn run_external_generator(
    generator: &ExternalGenerator,
    num_samples: usize,
    seed: u64,
    save_path: &Path,
    env: &[(String, String)],
) -> Result<Vec<MinuteGrid>> {
    let script = &generator.script;
    if !script.exists() {
        return Err(Error::External(format!("script {} not found", script.display())));
    }
    let interpreter = generator.interpreter.clone().or_else(|| {
        (script.extension().and_then(|e| e.to_str()) == Some("py")).then(|| "python3".to_string())
    });
    let mut cmd = match &interpreter {
        Some(prog) => {
            let mut c = Command::new(prog);
            c.arg(script);
            c
        }
        None => Command::new(script),
    };
    let stderr_path = save_path.with_extension("stderr");
    let stderr_file = std::fs::File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;
    let _ = std::fs::remove_file(save_path);
    cmd.arg("--save_path")
        .arg(save_path)
        .arg("--num_samples")
        .arg(num_samples.to_string())
        .arg("--seed")
        .arg(seed.to_string())
        .envs(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .env("SYNTH_FEEDBACK", generator.feedback.join("\n"))
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::from(stderr_file));

    let mut child =
        cmd.spawn().map_err(|e| Error::External(format!("cannot start {}: {e}", script.display())))?;
    let deadline = Instant::now() + Duration::from_secs(generator.timeout_secs);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::External(format!(
                    "{} timed out after {} s",
                    script.display(),
                    generator.timeout_secs
                )));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(Error::External(format!("waiting on script: {e}"))),
        }
    };
    let stderr = std::fs::read_to_string(&stderr_path).unwrap_or_default();
    let _ = std::fs::remove_file(&stderr_path);
    if !status.success() {
        return Err(Error::External(format!("{} exited with {status}: {}", script.display(), stderr.trim())));
    }
    let tensor = TensorJson::read(save_path)?;
    if tensor.shape.first() != Some(&num_samples) {
        return Err(Error::ShapeMismatch {
            expected: vec![num_samples, N_WINDOWS, WEEKS],
            actual: tensor.shape.clone(),
        });
    }
    tensor.grids()
}

fn external_env(label: AchievementLabel, summary: &DpSummary) -> Vec<(String, String)> {
    let props = summary.zero_props.iter().map(|p| format!("{p:.6}")).collect::<Vec<_>>().join(",");
    vec![("SYNTH_LABEL".to_string(), label.name().to_string()), ("SYNTH_ZERO_PROPS".to_string(), props)]
}

/// Scratch directory for external generator outputs.
fn scratch_path(seed: u64, label: AchievementLabel) -> PathBuf {
    std::env::temp_dir().join(format!("valsynth-{}-{seed:016x}-{label}.json", std::process::id()))
}

/// `count` records of one label. Ids are `<label>-<index>`.
pub fn generate_label_pool(
    spec: &GeneratorSpec,
    label: AchievementLabel,
    summary: &DpSummary,
    count: usize,
    seed: u64,
) -> Result<Vec<StudentRecord>> {
    if count == 0 {
        return Err(Error::InvalidParameter("pool size must be at least 1".into()));
    }
    let grids = match spec {
        GeneratorSpec::Statistical(params) => generate_statistical(params, label, summary, count, seed)?,
        GeneratorSpec::External(ext) => {
            let path = scratch_path(seed, label);
            let grids = run_external_generator(ext, count, seed, &path, &external_env(label, summary));
            let _ = std::fs::remove_file(&path);
            grids?
        }
    };
    grids
        .into_iter()
        .enumerate()
        .map(|(i, g)| StudentRecord::new(format!("{label}-{i:05}"), g, label))
        .collect()
}

/// One pool per (generator, label), generated concurrently; each pool's RNG
/// is keyed by its generator and label index.
pub fn generate_pools(
    specs: &[GeneratorSpec],
    summary: &DpSummary,
    config: &SynthConfig,
) -> Result<Vec<Vec<StudentRecord>>> {
    if specs.is_empty() {
        return Err(Error::InvalidParameter("at least one generator is required".into()));
    }
    let jobs: Vec<(usize, AchievementLabel)> =
        (0..specs.len()).flat_map(|g| AchievementLabel::ALL.into_iter().map(move |l| (g, l))).collect();
    jobs.par_iter()
        .map(|&(g, label)| {
            let seed = seed::derive(config.seed, &format!("pool/{g}/{}", label.index()));
            let pool = generate_label_pool(&specs[g], label, summary, config.per_label_pool, seed)?;
            Ok(pool
                .into_iter()
                .map(|r| {
                    let id = format!("g{g}-{}", r.id());
                    r.with_id(id)
                })
                .collect())
        })
        .collect()
}

/// Uniform sample of `k` records without replacement from the concatenated pools.
pub fn pool_and_sample(pools: &[Vec<StudentRecord>], k: usize, seed: u64, year: &str) -> Result<Cohort> {
    let all: Vec<&StudentRecord> = pools.iter().flatten().collect();
    if k > all.len() {
        return Err(Error::InsufficientPool { requested: k, available: all.len() });
    }
    let mut rng = seed::rng(seed);
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), k).into_vec();
    picked.sort_unstable();
    Cohort::new(year, picked.into_iter().map(|i| all[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleOutput {
    pub synthetic: Cohort,
    pub summary: DpSummary,
    /// Generator specs after applying prior feedback; the next cycle starts here.
    pub specs: Vec<GeneratorSpec>,
}

/// One stage-1 cycle: DP summary, feedback-adjusted generators, pooling.
pub fn run_cycle(
    real: &Cohort,
    specs: &[GeneratorSpec],
    config: &SynthConfig,
    budget: &PrivacyBudget,
    prior_feedback: Option<&FeedbackNote>,
) -> Result<CycleOutput> {
    config.validate(specs.len())?;
    let summary = release_summary(real, budget, seed::derive(config.seed, "dp-summary"))?;
    let specs: Vec<GeneratorSpec> = match prior_feedback {
        Some(note) => specs.iter().map(|s| apply_feedback(note, s)).collect(),
        None => specs.to_vec(),
    };
    let pools = generate_pools(&specs, &summary, config)?;
    let synthetic = pool_and_sample(
        &pools,
        config.final_sample,
        seed::derive(config.seed, "pool-sample"),
        &format!("{}-synthetic", real.year()),
    )?;
    Ok(CycleOutput { synthetic, summary, specs })
}
