//! Score-table CSV input and evaluation-report JSON output.
//!
//! CSV schema (header required): `game,seed,score,random_ref,human_ref`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sgi_core::stats::{summarize, BootstrapResult, GameScores, Report, ScoreTable};

use crate::{CliError, Result};

pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?
        .clone();
    let expected = ["game", "seed", "score", "random_ref", "human_ref"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(CliError::Format(format!(
            "{}: header {:?} does not match {:?}",
            path.display(),
            got,
            expected
        )));
    }

    // keyed by first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut games: BTreeMap<String, GameScores> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 2; // header is line 1
        let row = row.map_err(|e| CliError::Format(format!("{}: row {rownum}: {e}", path.display())))?;
        if row.len() != 5 {
            return Err(CliError::Format(format!(
                "{}: row {rownum}: expected 5 fields, got {}",
                path.display(),
                row.len()
            )));
        }
        let game = row[0].to_string();
        let parse = |field: usize, name: &str| -> Result<f64> {
            row[field].parse::<f64>().map_err(|e| {
                CliError::Format(format!(
                    "{}: row {rownum}: bad {name} '{}': {e}",
                    path.display(),
                    &row[field]
                ))
            })
        };
        let _seed: u64 = row[1].parse().map_err(|e| {
            CliError::Format(format!(
                "{}: row {rownum}: bad seed '{}': {e}",
                path.display(),
                &row[1]
            ))
        })?;
        let score = parse(2, "score")?;
        let random_ref = parse(3, "random_ref")?;
        let human_ref = parse(4, "human_ref")?;
        let entry = games.entry(game.clone()).or_insert_with(|| {
            order.push(game.clone());
            GameScores {
                name: game.clone(),
                scores: Vec::new(),
                random_ref,
                human_ref,
            }
        });
        if entry.random_ref != random_ref || entry.human_ref != human_ref {
            return Err(CliError::Format(format!(
                "{}: row {rownum}: inconsistent references for game {game}",
                path.display()
            )));
        }
        entry.scores.push(score);
    }
    let table = ScoreTable {
        games: order.into_iter().map(|g| games.remove(&g).unwrap()).collect(),
    };
    table.validate()?;
    Ok(table)
}

#[derive(Serialize)]
struct CiJson {
    point: f64,
    lower: f64,
    upper: f64,
    level: f64,
    resamples: u32,
}

impl From<&BootstrapResult> for CiJson {
    fn from(b: &BootstrapResult) -> Self {
        CiJson {
            point: b.point,
            lower: b.lower,
            upper: b.upper,
            level: b.level,
            resamples: b.resamples,
        }
    }
}

#[derive(Serialize)]
struct GameHns<'a> {
    game: &'a str,
    hns: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    config_hash: &'a str,
    tool_version: &'static str,
    games: u32,
    runs: u32,
    median: CiJson,
    mean: CiJson,
    iqm: CiJson,
    games_above_human: u32,
    games_above_random: u32,
    per_game_hns: Vec<GameHns<'a>>,
}

pub fn report_to_json(report: &Report, config_hash: &str) -> String {
    let json = ReportJson {
        config_hash,
        tool_version: crate::TOOL_VERSION,
        games: report.games,
        runs: report.runs,
        median: (&report.median).into(),
        mean: (&report.mean).into(),
        iqm: (&report.iqm).into(),
        games_above_human: report.games_above_human,
        games_above_random: report.games_above_random,
        per_game_hns: report
            .per_game_hns
            .iter()
            .map(|(g, h)| GameHns { game: g, hns: *h })
            .collect(),
    };
    serde_json::to_string_pretty(&json).expect("report serializes")
}

pub fn summarize_csv(path: &Path, resamples: u32, seed: u64) -> Result<(Report, String)> {
    let table = read_score_table(path)?;
    let report = summarize(&table, resamples, seed)?;
    Ok((report, String::new()))
}
