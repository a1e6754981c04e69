//! Evaluation protocol, hyperparameter grids, best-cell selection and
//! reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_all, write_atomic};
use crate::critics::{QEnsemble, TargetCombiner, Which};
use crate::data::OfflineDataset;
use crate::envs::{batched_returns, ActionSelector, Environment};
use crate::error::{BracError, Result};
use crate::policies::TanhGaussianPolicy;
use crate::rng::{derive_seed, seeded, BracRng};
use crate::tensor::Tensor;
use crate::trainer::{argmax_rows, train_offline, Algo, RunRecord, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub tail_points: usize,
    /// Policy draws per state for max-Q action selection.
    pub action_samples: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            episodes: 20,
            tail_points: 10,
            action_samples: 10,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.tail_points == 0 || self.action_samples == 0 {
            return Err(BracError::Config(
                "episodes, tail points and action samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Score as reported: negative values count as 0.
pub fn clamp_score(raw: f64) -> f64 {
    raw.max(0.0)
}

/// Mean of the last `n` values (all of them if fewer).
pub fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Draws `samples` actions per state and keeps the one with the highest
/// minimum source Q; ties go to the earliest draw.
pub struct MaxQSelector<'a> {
    policy: &'a TanhGaussianPolicy,
    critic: &'a QEnsemble,
    samples: usize,
}

impl<'a> MaxQSelector<'a> {
    pub fn new(policy: &'a TanhGaussianPolicy, critic: &'a QEnsemble, samples: usize) -> Self {
        Self {
            policy,
            critic,
            samples: samples.max(1),
        }
    }

    pub fn choose(&self, states: &Tensor, rng: &mut BracRng) -> Result<Tensor> {
        let n = self.samples;
        let cand = self.policy.sample(states, n, rng)?.actions;
        let q = self.critic.q_values(&states.repeat_rows(n), &cand, Which::Source)?;
        let qmin = TargetCombiner::min().combine(&q)?;
        let idx: Vec<usize> = argmax_rows(qmin.data(), n)
            .into_iter()
            .enumerate()
            .map(|(i, j)| i * n + j)
            .collect();
        Ok(cand.select_rows(&idx))
    }
}

impl ActionSelector for MaxQSelector<'_> {
    fn select(&self, states: &Tensor, rng: &mut BracRng) -> Tensor {
        self.choose(states, rng).expect("policy and critic match the environment")
    }
}

/// Raw mean return over `protocol.episodes` episodes. Episode starts and
/// action noise are both derived from `seed`.
pub fn evaluate(
    env: &dyn Environment,
    selector: &dyn ActionSelector,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<f64> {
    protocol.validate()?;
    let seeds: Vec<u64> = (0..protocol.episodes as u64).map(|i| derive_seed(seed, &[i])).collect();
    let mut rng = seeded(derive_seed(seed, &[u64::MAX]));
    let returns = batched_returns(env, selector, &seeds, &mut rng);
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

/// The evaluation of a saved policy and critic.
pub fn evaluate_policy(
    policy: &TanhGaussianPolicy,
    critic: &QEnsemble,
    env: &dyn Environment,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<f64> {
    if policy.state_dim() != env.state_dim() || policy.action_dim() != env.action_dim() {
        return Err(BracError::Config("policy does not match the environment".into()));
    }
    if critic.input_dim() != env.state_dim() + env.action_dim() {
        return Err(BracError::Config("critic does not match the environment".into()));
    }
    evaluate(env, &MaxQSelector::new(policy, critic, protocol.action_samples), protocol, seed)
}

pub const GRID_LEARNING_RATES: [f64; 6] = [3e-6, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub strengths: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
}

impl GridSpec {
    /// Six learning rates, the algorithm's five strengths, five seeds.
    pub fn standard(algo: Algo) -> Self {
        Self {
            learning_rates: GRID_LEARNING_RATES.to_vec(),
            strengths: algo.strength_grid(),
            seeds: 5,
            base_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.strengths.is_empty() || self.seeds == 0 {
            return Err(BracError::Config("grid value lists must be nonempty".into()));
        }
        if self.learning_rates.iter().any(|&v| !(v > 0.0)) || self.strengths.iter().any(|&v| !(v >= 0.0)) {
            return Err(BracError::Config("grid values must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_seed(&self, cell: CellIndex) -> u64 {
        derive_seed(
            self.base_seed,
            &[cell.lr as u64, cell.strength as u64, cell.dataset as u64, cell.seed as u64],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub lr: usize,
    pub strength: usize,
    pub dataset: usize,
    pub seed: usize,
}

impl CellIndex {
    fn file_name(&self) -> String {
        format!("cell-{}-{}-{}-{}.json", self.lr, self.strength, self.dataset, self.seed)
    }
}

/// One grid run with its coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: CellIndex,
    pub policy_lr: f64,
    pub strength: f64,
    pub dataset: String,
    pub record: RunRecord,
}

impl CellRecord {
    pub fn algo(&self) -> Algo {
        self.record.config.algo
    }
}

/// A dataset with the behavior policy cloned from it.
pub struct GridDataset {
    pub tag: String,
    pub data: OfflineDataset,
    pub behavior: TanhGaussianPolicy,
}

pub struct GridOutcome {
    pub records: Vec<CellRecord>,
    /// Cells trained by this call, as opposed to loaded from `out_dir`.
    pub executed: usize,
}

fn cell_config(base: &TrainerConfig, grid: &GridSpec, cell: CellIndex) -> TrainerConfig {
    let mut cfg = base.clone();
    cfg.policy_lr = grid.learning_rates[cell.lr];
    cfg.set_strength(grid.strengths[cell.strength]);
    cfg.seed = grid.cell_seed(cell);
    cfg
}

fn load_cell(path: &Path, expect: &TrainerConfig) -> Option<CellRecord> {
    let bytes = read_all(path).ok()?;
    let rec: CellRecord = serde_json::from_slice(&bytes).ok()?;
    (rec.record.config == *expect).then_some(rec)
}

/// Runs every (lr, strength, dataset, seed) cell. With `out_dir`, each
/// finished cell is written as it completes and cells already on disk with
/// a matching configuration are loaded instead of retrained.
pub fn run_grid(
    grid: &GridSpec,
    base: &TrainerConfig,
    datasets: &[GridDataset],
    env: &dyn Environment,
    parallel: usize,
    out_dir: Option<&Path>,
) -> Result<GridOutcome> {
    grid.validate()?;
    base.validate()?;
    if datasets.is_empty() {
        return Err(BracError::Config("grid needs at least one dataset".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut cells = Vec::new();
    for lr in 0..grid.learning_rates.len() {
        for strength in 0..grid.strengths.len() {
            for dataset in 0..datasets.len() {
                for seed in 0..grid.seeds {
                    cells.push(CellIndex {
                        lr,
                        strength,
                        dataset,
                        seed,
                    });
                }
            }
        }
    }
    let run_cell = |cell: CellIndex| -> Result<(CellRecord, bool)> {
        let cfg = cell_config(base, grid, cell);
        let path = out_dir.map(|d| d.join(cell.file_name()));
        if let Some(found) = path.as_deref().and_then(|p| load_cell(p, &cfg)) {
            return Ok((found, false));
        }
        let ds = &datasets[cell.dataset];
        let record = train_offline(cfg, &ds.data, &ds.behavior, env)?.record;
        let rec = CellRecord {
            cell,
            policy_lr: grid.learning_rates[cell.lr],
            strength: grid.strengths[cell.strength],
            dataset: ds.tag.clone(),
            record,
        };
        if let Some(p) = &path {
            write_atomic(p, &serde_json::to_vec_pretty(&rec)?)?;
        }
        log::info!("grid cell {:?} -> {}", cell, rec.record.final_score);
        Ok((rec, true))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| BracError::Config(format!("thread pool: {e}")))?;
    let results: Vec<(CellRecord, bool)> =
        pool.install(|| cells.par_iter().map(|&c| run_cell(c)).collect::<Result<Vec<_>>>())?;
    let executed = results.iter().filter(|(_, fresh)| *fresh).count();
    Ok(GridOutcome {
        records: results.into_iter().map(|(r, _)| r).collect(),
        executed,
    })
}

/// Every cell record in `dir`, in cell order.
pub fn load_records(dir: &Path) -> Result<Vec<CellRecord>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let bytes = read_all(&path)?;
            let rec: CellRecord = serde_json::from_slice(&bytes)
                .map_err(|e| BracError::format(&path, e.to_string()))?;
            out.push(rec);
        }
    }
    out.sort_by_key(|r| r.cell);
    Ok(out)
}

/// Raw final scores grouped by `(lr, strength)`, keyed by value bits.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub policy_lr: f64,
    pub strength: f64,
    pub scores: Vec<f64>,
}

impl CellSummary {
    pub fn mean(&self) -> f64 {
        mean(&self.scores)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

type Key = (u64, u64);

fn key(lr: f64, strength: f64) -> Key {
    (lr.to_bits(), strength.to_bits())
}

/// Checks that every (lr, strength, dataset, seed) combination seen in
/// `records` is present exactly once, then groups scores by cell.
pub fn summarize(records: &[CellRecord]) -> Result<Vec<CellSummary>> {
    let lrs: BTreeSet<u64> = records.iter().map(|r| r.policy_lr.to_bits()).collect();
    let strengths: BTreeSet<u64> = records.iter().map(|r| r.strength.to_bits()).collect();
    let datasets: BTreeSet<&str> = records.iter().map(|r| r.dataset.as_str()).collect();
    let seeds: BTreeSet<usize> = records.iter().map(|r| r.cell.seed).collect();
    let mut seen: BTreeMap<(u64, u64, &str, usize), usize> = BTreeMap::new();
    for r in records {
        *seen
            .entry((r.policy_lr.to_bits(), r.strength.to_bits(), r.dataset.as_str(), r.cell.seed))
            .or_default() += 1;
    }
    let mut missing = Vec::new();
    for &l in &lrs {
        for &s in &strengths {
            for &d in &datasets {
                for &k in &seeds {
                    match seen.get(&(l, s, d, k)) {
                        Some(1) => {}
                        Some(n) => missing.push(format!(
                            "lr={} strength={} dataset={d} seed={k} (duplicated {n}x)",
                            f64::from_bits(l),
                            f64::from_bits(s)
                        )),
                        None => missing.push(format!(
                            "lr={} strength={} dataset={d} seed={k}",
                            f64::from_bits(l),
                            f64::from_bits(s)
                        )),
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(BracError::IncompleteGrid(missing));
    }
    let mut groups: BTreeMap<Key, Vec<(&CellRecord, f64)>> = BTreeMap::new();
    for r in records {
        groups
            .entry(key(r.policy_lr, r.strength))
            .or_default()
            .push((r, r.record.final_score));
    }
    let mut out: Vec<CellSummary> = groups
        .into_values()
        .map(|mut v| {
            // Order scores canonically so the summary ignores record order.
            v.sort_by(|a, b| (a.0.dataset.as_str(), a.0.cell.seed).cmp(&(b.0.dataset.as_str(), b.0.cell.seed)));
            CellSummary {
                policy_lr: v[0].0.policy_lr,
                strength: v[0].0.strength,
                scores: v.iter().map(|x| x.1).collect(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.strength.total_cmp(&b.strength).then(a.policy_lr.total_cmp(&b.policy_lr)));
    Ok(out)
}

/// `(policy_lr, strength)` with the highest mean raw final score across
/// datasets and seeds; ties go to the smaller strength, then smaller lr.
pub fn select_best(records: &[CellRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(BracError::IncompleteGrid(vec!["no records".into()]));
    }
    let cells = summarize(records)?;
    // `cells` is sorted by (strength, lr); keep the first strict maximum.
    let mut best = &cells[0];
    for c in &cells[1..] {
        if c.mean() > best.mean() {
            best = c;
        }
    }
    Ok((best.policy_lr, best.strength))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side has no spread.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    pub env: String,
    pub algo: Algo,
    pub dataset: String,
    /// `(mean learned Q over the last batches, raw final score)`.
    pub points: Vec<(f64, f64)>,
    pub spearman: Option<f64>,
}

/// Learned Q against final score, per (env, algorithm, dataset). Records
/// without a Q trace are skipped.
pub fn correlation_report(records: &[CellRecord]) -> Vec<CorrelationGroup> {
    let mut groups: BTreeMap<(String, Algo, String), Vec<&CellRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.record.mean_q_last.is_some()) {
        groups
            .entry((r.record.env.clone(), r.algo(), r.dataset.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((env, algo, dataset), mut rs)| {
            rs.sort_by(|a, b| {
                a.policy_lr
                    .total_cmp(&b.policy_lr)
                    .then(a.strength.total_cmp(&b.strength))
                    .then(a.cell.seed.cmp(&b.cell.seed))
            });
            let points: Vec<(f64, f64)> = rs
                .iter()
                .map(|r| (r.record.mean_q_last.unwrap_or_default(), r.record.final_score))
                .collect();
            let (q, s): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
            CorrelationGroup {
                env,
                algo,
                dataset,
                spearman: spearman(&q, &s),
                points,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub env: String,
    pub algo: Algo,
    pub policy_lr: f64,
    pub strength: f64,
    pub runs: usize,
    pub mean_raw: f64,
    pub mean_reported: f64,
    pub std_reported: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub env: String,
    pub algo: Algo,
    pub dataset: String,
    pub policy_lr: f64,
    pub strength: f64,
    pub seeds: usize,
    pub mean_reported: f64,
    pub std_reported: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub env: String,
    pub algo: Algo,
    pub dataset: String,
    pub seed: usize,
    pub steps: Vec<u64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub grid: Vec<GridRow>,
    pub best: Vec<BestRow>,
    pub correlation: Vec<CorrelationGroup>,
    pub curves: Vec<Curve>,
}

/// Grid surface, best-cell table, correlation data and learning curves.
pub fn build_report(records: &[CellRecord]) -> Result<Report> {
    let mut by_variant: BTreeMap<(String, Algo), Vec<CellRecord>> = BTreeMap::new();
    for r in records {
        by_variant
            .entry((r.record.env.clone(), r.algo()))
            .or_default()
            .push(r.clone());
    }
    let mut report = Report {
        grid: Vec::new(),
        best: Vec::new(),
        correlation: correlation_report(records),
        curves: Vec::new(),
    };
    for ((env, algo), recs) in by_variant {
        let (best_lr, best_strength) = select_best(&recs)?;
        for c in summarize(&recs)? {
            let reported: Vec<f64> = c.scores.iter().map(|&s| clamp_score(s)).collect();
            report.grid.push(GridRow {
                env: env.clone(),
                algo,
                policy_lr: c.policy_lr,
                strength: c.strength,
                runs: c.scores.len(),
                mean_raw: c.mean(),
                mean_reported: mean(&reported),
                std_reported: std_dev(&reported),
                best: key(c.policy_lr, c.strength) == key(best_lr, best_strength),
            });
        }
        let mut at_best: BTreeMap<&str, Vec<&CellRecord>> = BTreeMap::new();
        for r in &recs {
            if key(r.policy_lr, r.strength) == key(best_lr, best_strength) {
                at_best.entry(r.dataset.as_str()).or_default().push(r);
            }
        }
        for (dataset, mut rs) in at_best {
            rs.sort_by_key(|r| r.cell.seed);
            let scores: Vec<f64> = rs.iter().map(|r| clamp_score(r.record.final_score)).collect();
            report.best.push(BestRow {
                env: env.clone(),
                algo,
                dataset: dataset.to_string(),
                policy_lr: best_lr,
                strength: best_strength,
                seeds: scores.len(),
                mean_reported: mean(&scores),
                std_reported: std_dev(&scores),
            });
            for r in rs {
                report.curves.push(Curve {
                    env: env.clone(),
                    algo,
                    dataset: dataset.to_string(),
                    seed: r.cell.seed,
                    steps: r.record.eval_trace.iter().map(|p| p.step).collect(),
                    returns: r.record.eval_trace.iter().map(|p| p.mean_return).collect(),
                });
            }
        }
    }
    Ok(report)
}

pub const GRID_CSV_HEADER: &str =
    "env,algo,policy_lr,strength,runs,mean_raw,mean_reported,std_reported,best";

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.env,
            r.algo,
            r.policy_lr,
            r.strength,
            r.runs,
            r.mean_raw,
            r.mean_reported,
            r.std_reported,
            r.best
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = BracError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(BracError::Config(format!("unknown report format {s:?}"))),
        }
    }
}

/// Writes `grid.csv` (or `grid.json`) and `summary.json` into `dir`.
pub fn emit_report(records: &[CellRecord], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let report = build_report(records)?;
    let grid_path = match format {
        ReportFormat::Csv => {
            let p = dir.join("grid.csv");
            write_atomic(&p, grid_csv(&report.grid).as_bytes())?;
            p
        }
        ReportFormat::Json => {
            let p = dir.join("grid.json");
            write_atomic(&p, &serde_json::to_vec_pretty(&report.grid)?)?;
            p
        }
    };
    let summary = dir.join("summary.json");
    write_atomic(&summary, &serde_json::to_vec_pretty(&report)?)?;
    Ok(vec![grid_path, summary])
}
