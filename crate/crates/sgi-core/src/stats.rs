//! Evaluation statistics: human-normalized scores, aggregate metrics
//! (median, mean, interquartile mean), percentile-bootstrap confidence
//! intervals with per-game stratification, super-human counts, and the
//! representation-collapse metric.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::{self, stream};

/// Per-game scores across seeds plus the normalization references.
#[derive(Debug, Clone, PartialEq)]
pub struct GameScores {
    pub name: String,
    pub scores: Vec<f64>,
    pub random_ref: f64,
    pub human_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub games: Vec<GameScores>,
}

impl ScoreTable {
    pub fn validate(&self) -> Result<()> {
        if self.games.is_empty() {
            return Err(CoreError::argument("empty score table"));
        }
        for g in &self.games {
            if g.scores.is_empty() {
                return Err(CoreError::argument(format!("game {} has no seeds", g.name)));
            }
            if g.human_ref == g.random_ref {
                return Err(CoreError::argument(format!(
                    "game {}: human and random references are equal",
                    g.name
                )));
            }
        }
        Ok(())
    }
}

/// Human-normalized score `(score - random) / (human - random)`.
pub fn hns(score: f64, random_ref: f64, human_ref: f64) -> Result<f64> {
    let denom = human_ref - random_ref;
    if denom == 0.0 {
        return Err(CoreError::argument("hns: human_ref equals random_ref"));
    }
    Ok((score - random_ref) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Median,
    Mean,
    Iqm,
}

/// Aggregate a sample. IQM drops the lowest and highest floor(n/4) values
/// and averages the rest.
pub fn aggregate(values: &[f64], metric: Metric) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::argument("aggregate of empty input"));
    }
    match metric {
        Metric::Mean => Ok(values.iter().sum::<f64>() / values.len() as f64),
        Metric::Median => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            Ok(if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            })
        }
        Metric::Iqm => {
            let mut v = values.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let trim = n / 4;
            let kept = &v[trim..n - trim];
            Ok(kept.iter().sum::<f64>() / kept.len() as f64)
        }
    }
}

/// Percentile-bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapResult {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: u32,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between order statistics
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Bootstrap a statistic of an i.i.d. sample: resample with replacement
/// `n_resamples` times and report the (1-level)/2 and (1+level)/2
/// percentiles. Deterministic for a given seed. The interval is widened to
/// include the point estimate in the rare case a percentile excludes it.
pub fn bootstrap_ci<F>(
    values: &[f64],
    statistic: F,
    n_resamples: u32,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult>
where
    F: Fn(&[f64]) -> f64,
{
    if values.len() < 2 {
        return Err(CoreError::argument("bootstrap needs >= 2 values"));
    }
    if n_resamples == 0 {
        return Err(CoreError::argument("resample count must be >= 1"));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(CoreError::argument("confidence level must be in (0,1)"));
    }
    let point = statistic(values);
    let mut rng = rng::stream_rng(seed, stream::BOOTSTRAP);
    let mut stats = Vec::with_capacity(n_resamples as usize);
    let mut scratch = alloc::vec![0.0; values.len()];
    for _ in 0..n_resamples {
        for slot in scratch.iter_mut() {
            *slot = values[rng.gen_range(0..values.len())];
        }
        stats.push(statistic(&scratch));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lower = percentile(&stats, alpha).min(point);
    let upper = percentile(&stats, 1.0 - alpha).max(point);
    Ok(BootstrapResult {
        point,
        lower,
        upper,
        level,
        resamples: n_resamples,
    })
}

fn per_game_mean_hns(table: &ScoreTable) -> Result<Vec<f64>> {
    table
        .games
        .iter()
        .map(|g| {
            let mean = g.scores.iter().sum::<f64>() / g.scores.len() as f64;
            hns(mean, g.random_ref, g.human_ref)
        })
        .collect()
}

fn pooled_run_hns(table: &ScoreTable) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for g in &table.games {
        for &s in &g.scores {
            out.push(hns(s, g.random_ref, g.human_ref)?);
        }
    }
    Ok(out)
}

fn table_statistic(table: &ScoreTable, metric: Metric) -> Result<f64> {
    match metric {
        // median/mean aggregate per-game mean HNS over games
        Metric::Median | Metric::Mean => aggregate(&per_game_mean_hns(table)?, metric),
        // IQM is calculated over runs rather than tasks
        Metric::Iqm => aggregate(&pooled_run_hns(table)?, Metric::Iqm),
    }
}

/// Stratified bootstrap over a score table: seeds are resampled with
/// replacement within each game, then the aggregate is recomputed.
pub fn bootstrap_table(
    table: &ScoreTable,
    metric: Metric,
    n_resamples: u32,
    level: f64,
    seed: u64,
) -> Result<BootstrapResult> {
    table.validate()?;
    if n_resamples == 0 {
        return Err(CoreError::argument("resample count must be >= 1"));
    }
    let point = table_statistic(table, metric)?;
    let mut rng = rng::stream_rng(seed, stream::BOOTSTRAP);
    let mut stats = Vec::with_capacity(n_resamples as usize);
    let mut resampled = table.clone();
    for _ in 0..n_resamples {
        for (g, src) in resampled.games.iter_mut().zip(&table.games) {
            for slot in g.scores.iter_mut() {
                *slot = src.scores[rng.gen_range(0..src.scores.len())];
            }
        }
        stats.push(table_statistic(&resampled, metric)?);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapResult {
        point,
        lower: percentile(&stats, alpha).min(point),
        upper: percentile(&stats, 1.0 - alpha).max(point),
        level,
        resamples: n_resamples,
    })
}

/// Full evaluation report over a score table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub games: u32,
    pub runs: u32,
    pub median: BootstrapResult,
    pub mean: BootstrapResult,
    pub iqm: BootstrapResult,
    pub games_above_human: u32,
    pub games_above_random: u32,
    pub per_game_hns: Vec<(String, f64)>,
}

/// Mdn/Mn over per-game mean HNS, IQM over pooled runs, 95% stratified
/// bootstrap CIs, and strict super-human / above-random counts.
pub fn summarize(table: &ScoreTable, n_resamples: u32, seed: u64) -> Result<Report> {
    table.validate()?;
    let per_game = per_game_mean_hns(table)?;
    let names: Vec<(String, f64)> = table
        .games
        .iter()
        .zip(&per_game)
        .map(|(g, &h)| (g.name.clone(), h))
        .collect();
    Ok(Report {
        games: table.games.len() as u32,
        runs: table.games.iter().map(|g| g.scores.len() as u32).sum(),
        median: bootstrap_table(table, Metric::Median, n_resamples, 0.95, seed)?,
        mean: bootstrap_table(table, Metric::Mean, n_resamples, 0.95, seed)?,
        iqm: bootstrap_table(table, Metric::Iqm, n_resamples, 0.95, seed)?,
        games_above_human: per_game.iter().filter(|&&h| h > 1.0).count() as u32,
        games_above_random: per_game.iter().filter(|&&h| h > 0.0).count() as u32,
        per_game_hns: names,
    })
}

/// Mean pairwise cosine similarity over all unordered distinct pairs.
/// 1 means identical directions, 0 perfect dissimilarity. Inputs larger
/// than `max_vectors` are subsampled with a seeded draw.
pub fn collapse_metric(vectors: &[Vec<f64>], max_vectors: usize, seed: u64) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(CoreError::argument("collapse metric needs >= 2 vectors"));
    }
    let mut idx: Vec<usize> = (0..vectors.len()).collect();
    if vectors.len() > max_vectors {
        let mut rng = rng::stream_rng(seed, stream::COLLAPSE);
        for i in 0..max_vectors {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(max_vectors);
    }
    // precompute norms
    let mut norms = Vec::with_capacity(idx.len());
    for &i in &idx {
        let n = libm::sqrt(vectors[i].iter().map(|v| v * v).sum());
        if n == 0.0 {
            return Err(CoreError::zero_norm(format!("collapse metric vector {i}")));
        }
        norms.push(n);
    }
    let mut total = 0.0;
    let mut pairs = 0u64;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let va = &vectors[idx[a]];
            let vb = &vectors[idx[b]];
            let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
            total += dot / (norms[a] * norms[b]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
