//! Command implementations behind the `sgi` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sgi_core::agent::{self, AgentCheckpoint};
use sgi_core::collect::{self, StartMode};
use sgi_core::replay::ReplayDataset;
use sgi_core::stats;

use crate::config::{parse_encoder, ExperimentConfig};
use crate::formats;
use crate::logs::LogWriter;
use crate::report;
use crate::{CliError, Result};

fn creation_time() -> u64 {
    // SOURCE_DATE_EPOCH opts into a real timestamp; the default of 0 keeps
    // identical runs byte-identical.
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn thread_cap() -> usize {
    std::env::var("SGI_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

// ── collect ─────────────────────────────────────────────────────────

pub fn cmd_collect(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.hash();
    let ds = cfg.dataset()?;
    let start_mode = if ds.vary_start {
        StartMode::Varied
    } else {
        StartMode::Fixed
    };

    let mut data: ReplayDataset = match ds.regime.as_str() {
        "random" => collect::collect_random(cfg.env.seed, ds.transitions, ds.seed, start_mode)?,
        "policy" => {
            let ckpt_path = ds.checkpoint.as_ref().ok_or_else(|| {
                CliError::Config("policy regime needs dataset.checkpoint".into())
            })?;
            let ckpt = formats::read_checkpoint(Path::new(ckpt_path))?;
            collect::collect_policy(
                &ckpt.nets,
                cfg.env.seed,
                ds.eps_schedule(),
                ds.transitions,
                ds.seed,
                start_mode,
            )?
        }
        "mixed" => {
            if ds.checkpoints.len() < 2 {
                return Err(CliError::Config(
                    "mixed regime needs >= 2 dataset.checkpoints".into(),
                ));
            }
            let loaded: Vec<AgentCheckpoint> = ds
                .checkpoints
                .iter()
                .map(|p| formats::read_checkpoint(Path::new(p)))
                .collect::<Result<_>>()?;
            let refs: Vec<&sgi_core::nets::AgentNets> = loaded.iter().map(|c| &c.nets).collect();
            let per = if ds.per_checkpoint > 0 {
                ds.per_checkpoint
            } else {
                ds.transitions / ds.checkpoints.len()
            };
            collect::build_mixed_dataset(&refs, per, ds.mixed_epsilon, cfg.env.seed, ds.seed)?
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown regime '{other}' (expected random, policy or mixed)"
            )))
        }
    };
    data.meta.created_unix = creation_time();

    formats::write_dataset(out, &data, &hash)?;
    let s = data.stats()?;
    println!(
        "wrote {}: {} transitions, {} episodes, avg_clipped_reward_per_episode={:.6}, actions={:?}, config_hash={}, file_sha256={}",
        out.display(),
        s.transitions,
        s.episodes,
        s.avg_clipped_reward_per_episode,
        s.action_histogram,
        hash,
        formats::file_sha256(out)?
    );
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────

pub fn cmd_pretrain(
    config_path: &Path,
    dataset_path: &Path,
    out: &Path,
    objectives: Option<&str>,
    log_path: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.hash();
    let (pcfg, spec) = cfg.pretrain()?.to_core(objectives)?;
    let (data, _data_hash) = formats::read_dataset(dataset_path)?;
    if data.meta.frame_shape != [spec.in_height, spec.in_width]
        || data.meta.frame_stack != spec.in_channels
    {
        return Err(CliError::Config(format!(
            "dataset observations {:?} x{} do not fit encoder input [{},{},{}]",
            data.meta.frame_shape,
            data.meta.frame_stack,
            spec.in_channels,
            spec.in_height,
            spec.in_width
        )));
    }

    let result = agent::pretrain_with_spec(&data, spec, &pcfg)?;
    let mut ckpt = result.checkpoint;
    ckpt.provenance.config_fingerprint = cfg.env_fingerprint();
    ckpt.provenance.dataset_id = format!(
        "{}:{}",
        data.meta.collector,
        formats::file_sha256(dataset_path)?
    );
    formats::write_checkpoint(out, &ckpt)?;

    let default_log = out.with_extension("jsonl");
    let log_file = log_path.unwrap_or(&default_log);
    let mut log = LogWriter::create(log_file, "pretrain", &hash)?;
    for rec in &result.log {
        log.pretrain_step(rec)?;
    }
    log.finish()?;

    let last = result.log.last();
    println!(
        "wrote {}: objectives={}, steps={}, final_total={}, final_collapse={}, config_hash={}, file_sha256={}",
        out.display(),
        ckpt.provenance.objectives,
        result.log.last().map(|l| l.step + 1).unwrap_or(0),
        last.map(|l| l.total).unwrap_or(f64::NAN),
        last.map(|l| l.collapse).unwrap_or(f64::NAN),
        hash,
        formats::file_sha256(out)?
    );
    Ok(())
}

// ── finetune ────────────────────────────────────────────────────────

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    mean_eval_return: f64,
    episodes: usize,
    checkpoint: String,
    returns_csv: String,
    log: String,
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    config_hash: &'a str,
    tool_version: &'static str,
    scheme: &'a str,
    pretrained: bool,
    seeds: Vec<SeedSummary>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_finetune(
    config_path: &Path,
    checkpoint: Option<&Path>,
    scratch: bool,
    out_dir: &Path,
    scheme: Option<&str>,
    seeds_override: Option<Vec<u64>>,
    force: bool,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.hash();
    let fsec = cfg.finetune()?;
    let seeds = seeds_override.unwrap_or_else(|| fsec.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::Config("no finetune seeds given".into()));
    }

    let start: Option<AgentCheckpoint> = if scratch {
        None
    } else {
        let p = checkpoint.ok_or_else(|| {
            CliError::Config("finetune needs --checkpoint <path> or --scratch".into())
        })?;
        let ckpt = formats::read_checkpoint(p)?;
        let fp = &ckpt.provenance.config_fingerprint;
        if !force && !fp.is_empty() && *fp != cfg.env_fingerprint() {
            return Err(CliError::Config(format!(
                "checkpoint fingerprint {fp} does not match this config's env section ({}); pass --force to override",
                cfg.env_fingerprint()
            )));
        }
        Some(ckpt)
    };
    let scratch_spec = parse_encoder(&fsec.encoder)?;

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir.display().to_string(), e))?;

    let scheme_name = scheme.unwrap_or(&fsec.scheme).to_string();
    let env_seed = cfg.env.seed;
    let cap = thread_cap().max(1);

    // one independent run per seed, fanned out across up to `cap` threads;
    // runs share nothing mutable, so results are identical at any cap
    let chunk_size = seeds.len().div_ceil(cap);
    let start_ref = start.as_ref();
    let outcomes: Vec<Result<Vec<SeedSummary>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk_size)
            .map(|chunk| {
                let fsec = &*fsec;
                let scheme_name = &scheme_name;
                let hash = &hash;
                let scratch_spec = &scratch_spec;
                scope.spawn(move || -> Result<Vec<SeedSummary>> {
                    chunk
                        .iter()
                        .map(|&seed| {
                            run_one_seed(
                                fsec,
                                scheme_name,
                                seed,
                                env_seed,
                                start_ref,
                                scratch_spec,
                                out_dir,
                                hash,
                            )
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("finetune worker panicked"))
            .collect()
    });
    let mut seed_summaries = Vec::with_capacity(seeds.len());
    for o in outcomes {
        seed_summaries.extend(o?);
    }

    for s in &seed_summaries {
        println!(
            "seed {}: mean_eval_return={:.4} ({} episodes) -> {}",
            s.seed, s.mean_eval_return, s.episodes, s.returns_csv
        );
    }
    let summary = FinetuneSummary {
        config_hash: &hash,
        tool_version: crate::TOOL_VERSION,
        scheme: &scheme_name,
        pretrained: start.is_some(),
        seeds: seed_summaries,
    };
    let summary_path = out_dir.join("summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| CliError::io(summary_path.display().to_string(), e))?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_one_seed(
    fsec: &crate::config::FinetuneSection,
    scheme: &str,
    seed: u64,
    env_seed: u64,
    start: Option<&AgentCheckpoint>,
    scratch_spec: &sgi_core::nets::EncoderSpec,
    out_dir: &Path,
    config_hash: &str,
) -> Result<SeedSummary> {
    let fcfg = fsec.to_core(Some(scheme), seed)?;
    let result = agent::finetune(env_seed, start, scratch_spec.clone(), &fcfg)?;

    let log_path = out_dir.join(format!("finetune_seed{seed}.jsonl"));
    let mut log = LogWriter::create(&log_path, "finetune", config_hash)?;
    for ep in &result.episodes {
        log.episode(ep)?;
    }
    for t in &result.train_log {
        log.train_step(t)?;
    }
    log.eval(result.eval.mean_return, &result.eval.returns)?;
    log.finish()?;

    let returns_path = out_dir.join(format!("returns_seed{seed}.csv"));
    let mut csv_text = String::from("episode,return\n");
    for (i, r) in result.eval.returns.iter().enumerate() {
        csv_text.push_str(&format!("{i},{r}\n"));
    }
    fs::write(&returns_path, csv_text)
        .map_err(|e| CliError::io(returns_path.display().to_string(), e))?;

    let ckpt_path = out_dir.join(format!("checkpoint_seed{seed}.sgic"));
    let mut trained = result.checkpoint;
    trained.provenance.config_fingerprint = config_hash.to_string();
    formats::write_checkpoint(&ckpt_path, &trained)?;

    Ok(SeedSummary {
        seed,
        mean_eval_return: result.eval.mean_return,
        episodes: result.eval.returns.len(),
        checkpoint: ckpt_path.display().to_string(),
        returns_csv: returns_path.display().to_string(),
        log: log_path.display().to_string(),
    })
}

// ── eval ────────────────────────────────────────────────────────────

pub fn cmd_eval(scores: &Path, out: Option<&Path>, resamples: u32, seed: u64) -> Result<()> {
    let table = report::read_score_table(scores)?;
    let rep = stats::summarize(&table, resamples, seed)?;
    let hash = crate::sha256_hex(
        &fs::read(scores).map_err(|e| CliError::io(scores.display().to_string(), e))?,
    );
    let json = report::report_to_json(&rep, &hash);
    println!("{json}");
    if let Some(path) = out {
        fs::write(path, &json).map_err(|e| CliError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Small helper for tests: path of each per-seed returns file.
pub fn returns_csv_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("returns_seed{seed}.csv"))
}
