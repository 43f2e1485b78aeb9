//! Cohort data model: weekly study minutes per time window, achievement
//! labels, file formats, and the 24-value per-student feature summary.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const WEEKS: usize = 17;
pub const N_WINDOWS: usize = 4;
pub const N_STATISTICS: usize = 6;
pub const N_FEATURES: usize = N_WINDOWS * N_STATISTICS;

/// Minutes per (window, week); outer index is the window.
pub type MinuteGrid = [[u32; WEEKS]; N_WINDOWS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Overnight,
    Morning,
    Afternoon,
    Evening,
}

impl Window {
    pub const ALL: [Window; N_WINDOWS] =
        [Window::Overnight, Window::Morning, Window::Afternoon, Window::Evening];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Maximum weekly minutes.
    pub fn cap(self) -> u32 {
        match self {
            Window::Overnight => 300,
            Window::Morning => 420,
            Window::Afternoon => 300,
            Window::Evening => 420,
        }
    }

    /// Clock hours covered, as `[start, end)`.
    pub fn hours(self) -> (u8, u8) {
        match self {
            Window::Overnight => (0, 5),
            Window::Morning => (5, 12),
            Window::Afternoon => (12, 17),
            Window::Evening => (17, 24),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Overnight => "overnight",
            Window::Morning => "morning",
            Window::Afternoon => "afternoon",
            Window::Evening => "evening",
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Window::ALL
            .into_iter()
            .find(|w| w.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown window {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AchievementLabel {
    Low,
    Average,
    High,
}

impl AchievementLabel {
    pub const ALL: [AchievementLabel; 3] =
        [AchievementLabel::Low, AchievementLabel::Average, AchievementLabel::High];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Ordinal outcome code used by correlation and regression queries.
    pub fn code(self) -> f64 {
        (self.index() + 1) as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            AchievementLabel::Low => "low",
            AchievementLabel::Average => "average",
            AchievementLabel::High => "high",
        }
    }
}

impl fmt::Display for AchievementLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AchievementLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AchievementLabel::ALL
            .into_iter()
            .find(|l| l.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRecord {
    id: String,
    minutes: MinuteGrid,
    label: AchievementLabel,
}

impl StudentRecord {
    pub fn new(id: impl Into<String>, minutes: MinuteGrid, label: AchievementLabel) -> Result<Self> {
        let id = id.into();
        for window in Window::ALL {
            for (week, &m) in minutes[window.index()].iter().enumerate() {
                if m > window.cap() {
                    return Err(Error::CapViolation {
                        student: id,
                        window: window.name(),
                        week: week + 1,
                        minutes: m as i64,
                        cap: window.cap(),
                    });
                }
            }
        }
        Ok(Self { id, minutes, label })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn minutes(&self) -> &MinuteGrid {
        &self.minutes
    }

    pub fn label(&self) -> AchievementLabel {
        self.label
    }

    pub fn series(&self, window: Window) -> &[u32; WEEKS] {
        &self.minutes[window.index()]
    }

    pub fn window_total(&self, window: Window) -> u64 {
        self.series(window).iter().map(|&m| m as u64).sum()
    }

    pub fn total(&self) -> u64 {
        Window::ALL.iter().map(|&w| self.window_total(w)).sum()
    }

    /// Same minutes and label under a different id.
    pub fn with_id(&self, id: impl Into<String>) -> Self {
        Self { id: id.into(), minutes: self.minutes, label: self.label }
    }
}

/// Checks a flat `4 × 17` row-major slice of raw values and converts it into a grid.
pub fn grid_from_values(student: &str, values: &[f64]) -> Result<MinuteGrid> {
    if values.len() != N_WINDOWS * WEEKS {
        return Err(Error::ShapeMismatch { expected: vec![N_WINDOWS, WEEKS], actual: vec![values.len()] });
    }
    let mut grid = [[0u32; WEEKS]; N_WINDOWS];
    for window in Window::ALL {
        for week in 0..WEEKS {
            let v = values[window.index() * WEEKS + week];
            if !v.is_finite() || v.fract() != 0.0 {
                return Err(Error::Schema(format!(
                    "student {student}, {window} week {}: non-integer minutes {v}",
                    week + 1
                )));
            }
            if v < 0.0 {
                return Err(Error::Schema(format!(
                    "student {student}, {window} week {}: negative minutes {v}",
                    week + 1
                )));
            }
            if v > window.cap() as f64 {
                return Err(Error::CapViolation {
                    student: student.to_string(),
                    window: window.name(),
                    week: week + 1,
                    minutes: v as i64,
                    cap: window.cap(),
                });
            }
            grid[window.index()][week] = v as u32;
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    year: String,
    records: Vec<StudentRecord>,
}

impl Cohort {
    pub fn new(year: impl Into<String>, records: Vec<StudentRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("cohort has no records"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Schema(format!("duplicate student id {}", r.id)));
            }
        }
        Ok(Self { year: year.into(), records })
    }

    pub fn year(&self) -> &str {
        &self.year
    }

    pub fn records(&self) -> &[StudentRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn with_label(&self, label: AchievementLabel) -> impl Iterator<Item = &StudentRecord> {
        self.records.iter().filter(move |r| r.label == label)
    }

    pub fn label_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }

    pub fn find(&self, id: &str) -> Option<&StudentRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Median,
    Mean,
    Std,
    Var,
    Max,
    Rms,
}

impl Statistic {
    pub const ALL: [Statistic; N_STATISTICS] =
        [Statistic::Median, Statistic::Mean, Statistic::Std, Statistic::Var, Statistic::Max, Statistic::Rms];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Median => "median",
            Statistic::Mean => "mean",
            Statistic::Std => "std",
            Statistic::Var => "var",
            Statistic::Max => "max",
            Statistic::Rms => "rms",
        }
    }
}

/// Six statistics per window, window-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; N_FEATURES],
}

impl FeatureVector {
    pub fn get(&self, window: Window, statistic: Statistic) -> f64 {
        self.values[window.index() * N_STATISTICS + statistic as usize]
    }

    /// (window, statistic) of feature index `d`.
    pub fn coordinate(d: usize) -> (Window, Statistic) {
        (Window::ALL[d / N_STATISTICS], Statistic::ALL[d % N_STATISTICS])
    }
}

pub fn feature_vector(record: &StudentRecord) -> FeatureVector {
    let mut values = [0.0; N_FEATURES];
    for window in Window::ALL {
        let series = record.series(window);
        let mut sorted = *series;
        sorted.sort_unstable();
        let n = WEEKS as f64;
        let mean = series.iter().map(|&m| m as f64).sum::<f64>() / n;
        let var = series
            .iter()
            .map(|&m| {
                let d = m as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let rms = (series.iter().map(|&m| (m as f64) * (m as f64)).sum::<f64>() / n).sqrt();
        let stats = [sorted[WEEKS / 2] as f64, mean, var.sqrt(), var, sorted[WEEKS - 1] as f64, rms];
        let base = window.index() * N_STATISTICS;
        values[base..base + N_STATISTICS].copy_from_slice(&stats);
    }
    FeatureVector { values }
}

/// Tertile binning by rank. Ties keep input order, so the class sizes
/// always differ by at most one.
pub fn bin_scores(scores: &[f64]) -> Result<Vec<AchievementLabel>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to bin"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite score {bad}")));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut labels = vec![AchievementLabel::Low; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = AchievementLabel::ALL[rank * 3 / n];
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CohortFormat {
    LongCsv,
    TensorJson,
}

impl FromStr for CohortFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long-csv" => Ok(CohortFormat::LongCsv),
            "tensor-json" => Ok(CohortFormat::TensorJson),
            other => Err(Error::Parse(format!("unknown cohort format {other:?}"))),
        }
    }
}

/// Sidecar label file next to a long-csv minutes file: `x.csv` -> `x.labels.csv`.
pub fn labels_sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.labels.csv"))
}

/// The `(N, 4, 17)` row-major tensor exchanged with external generator scripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<AchievementLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<String>,
}

impl TensorJson {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Validated minute grids, one per leading index.
    pub fn grids(&self) -> Result<Vec<MinuteGrid>> {
        let n = match self.shape.as_slice() {
            [n, w, k] if *w == N_WINDOWS && *k == WEEKS => *n,
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![self.shape.first().copied().unwrap_or(0), N_WINDOWS, WEEKS],
                    actual: self.shape.clone(),
                })
            }
        };
        let stride = N_WINDOWS * WEEKS;
        if self.data.len() != n * stride {
            return Err(Error::ShapeMismatch { expected: vec![n * stride], actual: vec![self.data.len()] });
        }
        self.data
            .chunks(stride)
            .enumerate()
            .map(|(i, chunk)| {
                let id = self
                    .ids
                    .as_ref()
                    .and_then(|ids| ids.get(i).cloned())
                    .unwrap_or_else(|| format!("row {i}"));
                grid_from_values(&id, chunk)
            })
            .collect()
    }

    fn from_cohort(cohort: &Cohort) -> Self {
        let data =
            cohort.records.iter().flat_map(|r| r.minutes.iter().flatten().map(|&m| m as f64)).collect();
        Self {
            shape: vec![cohort.n(), N_WINDOWS, WEEKS],
            data,
            labels: Some(cohort.records.iter().map(|r| r.label).collect()),
            ids: Some(cohort.records.iter().map(|r| r.id.clone()).collect()),
            year: Some(cohort.year.clone()),
        }
    }

    fn into_cohort(self, default_year: &str) -> Result<Cohort> {
        let grids = self.grids()?;
        let labels = self.labels.ok_or_else(|| Error::Schema("tensor-json has no labels".into()))?;
        if labels.len() != grids.len() {
            return Err(Error::Schema(format!("{} labels for {} students", labels.len(), grids.len())));
        }
        let ids = match self.ids {
            Some(ids) if ids.len() == grids.len() => ids,
            Some(ids) => {
                return Err(Error::Schema(format!("{} ids for {} students", ids.len(), grids.len())))
            }
            None => (0..grids.len()).map(|i| format!("s{i:04}")).collect(),
        };
        let records = ids
            .into_iter()
            .zip(grids)
            .zip(labels)
            .map(|((id, grid), label)| StudentRecord::new(id, grid, label))
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(self.year.unwrap_or_else(|| default_year.to_string()), records)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LongRow {
    student_id: String,
    window: String,
    week: usize,
    minutes: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    student_id: String,
    label: String,
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads a cohort. For long-csv the labels come from [`labels_sidecar`] and
/// the cohort year is the file stem.
pub fn load_cohort(path: &Path, format: CohortFormat) -> Result<Cohort> {
    match format {
        CohortFormat::TensorJson => TensorJson::read(path)?.into_cohort(&file_stem(path)),
        CohortFormat::LongCsv => load_long_csv(path, &labels_sidecar(path)),
    }
}

/// Cells seen so far for one student, and how many.
type PartialGrid = ([[Option<f64>; WEEKS]; N_WINDOWS], usize);

pub fn load_long_csv(minutes_path: &Path, labels_path: &Path) -> Result<Cohort> {
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, PartialGrid> = BTreeMap::new();

    let mut reader = csv::Reader::from_path(minutes_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(minutes_path, io),
        other => Error::Parse(format!("{other:?}")),
    })?;
    for row in reader.deserialize::<LongRow>() {
        let row = row?;
        let window: Window = row.window.parse()?;
        if !(1..=WEEKS).contains(&row.week) {
            return Err(Error::Schema(format!(
                "student {}: week {} outside 1..={WEEKS}",
                row.student_id, row.week
            )));
        }
        let entry = cells.entry(row.student_id.clone()).or_insert_with(|| {
            order.push(row.student_id.clone());
            ([[None; WEEKS]; N_WINDOWS], 0)
        });
        let slot = &mut entry.0[window.index()][row.week - 1];
        if slot.is_some() {
            return Err(Error::Schema(format!(
                "student {}: duplicate cell {window} week {}",
                row.student_id, row.week
            )));
        }
        *slot = Some(row.minutes as f64);
        entry.1 += 1;
    }

    let mut labels: BTreeMap<String, AchievementLabel> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(labels_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(labels_path, io),
        other => Error::Parse(format!("{other:?}")),
    })?;
    for row in reader.deserialize::<LabelRow>() {
        let row = row?;
        if !cells.contains_key(&row.student_id) {
            return Err(Error::Schema(format!("label for unknown student {}", row.student_id)));
        }
        if labels.insert(row.student_id.clone(), row.label.parse()?).is_some() {
            return Err(Error::Schema(format!("duplicate id {} in labels", row.student_id)));
        }
    }

    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let (grid, filled) = &cells[&id];
        if *filled != N_WINDOWS * WEEKS {
            return Err(Error::Schema(format!(
                "student {id}: {filled} of {} cells present",
                N_WINDOWS * WEEKS
            )));
        }
        let flat: Vec<f64> = grid.iter().flatten().map(|c| c.unwrap_or(0.0)).collect();
        let grid = grid_from_values(&id, &flat)?;
        let label = *labels.get(&id).ok_or_else(|| Error::Schema(format!("student {id} has no label")))?;
        records.push(StudentRecord::new(id, grid, label)?);
    }
    Cohort::new(file_stem(minutes_path), records)
}

pub fn save_cohort(cohort: &Cohort, path: &Path, format: CohortFormat) -> Result<()> {
    match format {
        CohortFormat::TensorJson => {
            let tensor = TensorJson::from_cohort(cohort);
            let text = serde_json::to_string(&tensor)?;
            std::fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        CohortFormat::LongCsv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in &cohort.records {
                for window in Window::ALL {
                    for (week, &m) in r.series(window).iter().enumerate() {
                        w.serialize(LongRow {
                            student_id: r.id.clone(),
                            window: window.name().to_string(),
                            week: week + 1,
                            minutes: m as i64,
                        })?;
                    }
                }
            }
            w.flush().map_err(|e| Error::io(path, e))?;
            let labels_path = labels_sidecar(path);
            let mut w = csv::Writer::from_path(&labels_path)?;
            for r in &cohort.records {
                w.serialize(LabelRow { student_id: r.id.clone(), label: r.label.name().to_string() })?;
            }
            w.flush().map_err(|e| Error::io(&labels_path, e))
        }
    }
}

// ---------------------------------------------------------------------------
// Ground-truth generator

/// Zero-inflated gamma cell model: zero with probability `zero_prob`,
/// otherwise a rounded gamma draw clamped to `[1, cap]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellModel {
    pub zero_prob: f64,
    pub shape: f64,
    pub scale: f64,
}

impl CellModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zero_prob) {
            return Err(Error::InvalidParameter(format!(
                "zero probability {} outside [0, 1]",
                self.zero_prob
            )));
        }
        if !(self.shape > 0.0 && self.shape.is_finite()) {
            return Err(Error::InvalidParameter(format!("nonpositive shape {}", self.shape)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("nonpositive scale {}", self.scale)));
        }
        Ok(())
    }
}

/// Draws one zero-inflated series. `multiplier` scales the gamma part and
/// carries per-student heterogeneity.
pub(crate) fn draw_series<R: Rng + ?Sized>(
    rng: &mut R,
    zero_prob: f64,
    shape: f64,
    scale: f64,
    multiplier: f64,
    cap: u32,
) -> [u32; WEEKS] {
    let gamma = Gamma::new(shape, 1.0).expect("validated shape");
    let mut series = [0u32; WEEKS];
    for cell in series.iter_mut() {
        let zero = rng.random::<f64>() < zero_prob;
        let draw = gamma.sample(rng) * scale * multiplier;
        if !zero {
            *cell = draw.round().clamp(1.0, cap as f64) as u32;
        }
    }
    series
}

/// Per-label, per-window parameters of the desk-scale stand-in for real data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthConfig {
    /// `cells[label][window]`.
    pub cells: [[CellModel; N_WINDOWS]; 3],
    /// Shape of the mean-one gamma activity multiplier drawn once per student.
    pub student_shape: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        let m = |zero_prob, shape, scale| CellModel { zero_prob, shape, scale };
        Self {
            cells: [
                // low
                [m(0.90, 1.2, 18.0), m(0.65, 1.4, 22.0), m(0.70, 1.5, 20.0), m(0.55, 1.6, 30.0)],
                // average
                [m(0.86, 1.2, 22.0), m(0.55, 1.5, 28.0), m(0.62, 1.5, 24.0), m(0.42, 1.8, 38.0)],
                // high
                [m(0.82, 1.3, 25.0), m(0.45, 1.6, 36.0), m(0.55, 1.6, 26.0), m(0.30, 2.0, 48.0)],
            ],
            student_shape: 3.0,
        }
    }
}

impl GroundTruthConfig {
    pub fn validate(&self) -> Result<()> {
        for row in &self.cells {
            for cell in row {
                cell.validate()?;
            }
        }
        if !(self.student_shape > 0.0 && self.student_shape.is_finite()) {
            return Err(Error::InvalidParameter(format!("nonpositive student shape {}", self.student_shape)));
        }
        Ok(())
    }

    /// Every gamma scale multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for row in out.cells.iter_mut() {
            for cell in row.iter_mut() {
                cell.scale *= factor;
            }
        }
        out
    }

    pub fn sample_record<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        id: impl Into<String>,
        label: AchievementLabel,
    ) -> StudentRecord {
        let student =
            Gamma::new(self.student_shape, 1.0 / self.student_shape).expect("validated student shape");
        let multiplier = student.sample(rng);
        let mut grid = [[0u32; WEEKS]; N_WINDOWS];
        for window in Window::ALL {
            let cell = &self.cells[label.index()][window.index()];
            grid[window.index()] =
                draw_series(rng, cell.zero_prob, cell.shape, cell.scale, multiplier, window.cap());
        }
        StudentRecord::new(id, grid, label).expect("draws are clamped to caps")
    }
}

/// Label for slot `i` of `n` under an even three-way split.
pub fn even_label(i: usize, n: usize) -> AchievementLabel {
    AchievementLabel::ALL[i * 3 / n]
}

pub fn generate_ground_truth(config: &GroundTruthConfig, n: usize, seed: u64, year: &str) -> Result<Cohort> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("cohort size must be at least 1".into()));
    }
    let mut rng = seed::rng(seed);
    let records =
        (0..n).map(|i| config.sample_record(&mut rng, format!("s{i:04}"), even_label(i, n))).collect();
    Cohort::new(year, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn record_with(window: Window, series: [u32; WEEKS]) -> StudentRecord {
        let mut grid = [[0u32; WEEKS]; N_WINDOWS];
        grid[window.index()] = series;
        StudentRecord::new("x", grid, AchievementLabel::Average).unwrap()
    }

    #[test]
    fn windows_partition_the_day() {
        let mut covered = [false; 24];
        for w in Window::ALL {
            let (a, b) = w.hours();
            for h in a..b {
                assert!(!covered[h as usize]);
                covered[h as usize] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        let caps: Vec<u32> = Window::ALL.iter().map(|w| w.cap()).collect();
        assert_eq!(caps, vec![300, 420, 300, 420]);
    }

    #[test]
    fn record_rejects_cap_violation() {
        let mut grid = [[0u32; WEEKS]; N_WINDOWS];
        grid[Window::Overnight.index()][3] = 500;
        let err = StudentRecord::new("a", grid, AchievementLabel::Low).unwrap_err();
        assert!(matches!(err, Error::CapViolation { cap: 300, week: 4, .. }));
    }

    #[test]
    fn cohort_rejects_duplicates_and_empty() {
        let r = record_with(Window::Evening, [1; WEEKS]);
        assert!(Cohort::new("y", vec![r.clone(), r]).is_err());
        assert!(Cohort::new("y", vec![]).is_err());
    }

    #[test]
    fn bin_scores_examples() {
        use AchievementLabel::*;
        assert_eq!(bin_scores(&[10.0, 20.0, 30.0]).unwrap(), vec![Low, Average, High]);
        assert_eq!(bin_scores(&[5.0, 5.0, 5.0]).unwrap(), vec![Low, Average, High]);
        assert_eq!(bin_scores(&[30.0, 10.0, 20.0]).unwrap(), vec![High, Low, Average]);
        assert!(bin_scores(&[]).is_err());
        assert!(bin_scores(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn bin_scores_120_distinct_matches_rank_partition() {
        // brute force: label of a score is determined by how many scores are below it
        let scores: Vec<f64> = (0..120).map(|i| ((i * 37) % 120) as f64 * 1.5 - 7.0).collect();
        let labels = bin_scores(&scores).unwrap();
        let mut counts = [0usize; 3];
        for (i, l) in labels.iter().enumerate() {
            counts[l.index()] += 1;
            let below = scores.iter().filter(|&&s| s < scores[i]).count();
            assert_eq!(l.index(), below / 40);
        }
        assert_eq!(counts, [40, 40, 40]);
    }

    #[test]
    fn feature_vector_zero_and_constant() {
        let zero = record_with(Window::Morning, [0; WEEKS]);
        assert!(feature_vector(&zero).values.iter().all(|&v| v == 0.0));

        let c = 37;
        let fv = feature_vector(&record_with(Window::Afternoon, [c; WEEKS]));
        let c = c as f64;
        let base = Window::Afternoon.index() * N_STATISTICS;
        assert_eq!(&fv.values[base..base + 6], &[c, c, 0.0, 0.0, c, c]);
        let others: f64 = fv
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| !(base..base + 6).contains(i))
            .map(|(_, v)| v.abs())
            .sum();
        assert_eq!(others, 0.0);
    }

    #[test]
    fn feature_vector_one_to_seventeen() {
        let mut series = [0u32; WEEKS];
        for (i, s) in series.iter_mut().enumerate() {
            *s = (i + 1) as u32;
        }
        // shuffle order so median/max do not rely on input order
        series.reverse();
        let fv = feature_vector(&record_with(Window::Evening, series));
        let w = Window::Evening;
        assert_abs_diff_eq!(fv.get(w, Statistic::Mean), 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fv.get(w, Statistic::Median), 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fv.get(w, Statistic::Max), 17.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fv.get(w, Statistic::Var), 24.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fv.get(w, Statistic::Std), 24f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(fv.get(w, Statistic::Rms), 105f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn ground_truth_contracts() {
        let cfg = GroundTruthConfig::default();
        let a = generate_ground_truth(&cfg, 120, 9, "2022").unwrap();
        let b = generate_ground_truth(&cfg, 120, 9, "2022").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label_counts(), [40, 40, 40]);

        let mut all_zero = cfg.clone();
        for row in all_zero.cells.iter_mut() {
            for c in row.iter_mut() {
                c.zero_prob = 1.0;
            }
        }
        let z = generate_ground_truth(&all_zero, 30, 1, "z").unwrap();
        assert!(z.records().iter().all(|r| r.total() == 0));
    }

    #[test]
    fn ground_truth_rejects_bad_config() {
        let mut cfg = GroundTruthConfig::default();
        cfg.cells[0][0].zero_prob = 1.5;
        assert!(generate_ground_truth(&cfg, 10, 0, "x").is_err());
        let mut cfg = GroundTruthConfig::default();
        cfg.cells[2][3].scale = 0.0;
        assert!(generate_ground_truth(&cfg, 10, 0, "x").is_err());
    }

    #[test]
    fn tensor_shape_checked() {
        let t =
            TensorJson { shape: vec![1, 17, 4], data: vec![0.0; 68], labels: None, ids: None, year: None };
        assert!(matches!(t.grids(), Err(Error::ShapeMismatch { .. })));
    }
}
