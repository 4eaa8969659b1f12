//! Append-only line-delimited JSON run logs. Every log starts with a
//! `run_start` record carrying the config hash and tool version; field
//! order is fixed by the structs so identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sgi_core::agent::{EpisodeLog, FinetuneStepLog, PretrainLog};

use crate::{CliError, Result};

#[derive(Serialize)]
struct RunStart<'a> {
    event: &'static str,
    command: &'a str,
    config_hash: &'a str,
    tool_version: &'static str,
}

#[derive(Serialize)]
struct PretrainRecord {
    event: &'static str,
    step: u32,
    total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    spr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    goal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inverse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inverse_accuracy: Option<f64>,
    collapse: f64,
}

#[derive(Serialize)]
struct EpisodeRecord {
    event: &'static str,
    episode: u32,
    env_step: u32,
    r#return: f64,
    length: u32,
    epsilon: f64,
}

#[derive(Serialize)]
struct TrainRecord {
    event: &'static str,
    env_step: u32,
    dqn: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    aux_spr: Option<f64>,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    event: &'static str,
    episodes: usize,
    mean_return: f64,
    returns: &'a [f64],
}

pub struct LogWriter {
    out: BufWriter<File>,
    path: String,
}

impl LogWriter {
    pub fn create(path: &Path, command: &str, config_hash: &str) -> Result<LogWriter> {
        let file = File::create(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        let mut w = LogWriter {
            out: BufWriter::new(file),
            path: path.display().to_string(),
        };
        w.record(&RunStart {
            event: "run_start",
            command,
            config_hash,
            tool_version: crate::TOOL_VERSION,
        })?;
        Ok(w)
    }

    fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).expect("log record serializes");
        writeln!(self.out, "{line}").map_err(|e| CliError::io(self.path.clone(), e))
    }

    pub fn pretrain_step(&mut self, log: &PretrainLog) -> Result<()> {
        self.record(&PretrainRecord {
            event: "pretrain_step",
            step: log.step,
            total: log.total,
            spr: log.spr,
            goal: log.goal,
            inverse: log.inverse,
            bc: log.bc,
            inverse_accuracy: log.inverse_accuracy,
            collapse: log.collapse,
        })
    }

    pub fn episode(&mut self, log: &EpisodeLog) -> Result<()> {
        self.record(&EpisodeRecord {
            event: "episode",
            episode: log.episode,
            env_step: log.env_step,
            r#return: log.ret,
            length: log.length,
            epsilon: log.epsilon,
        })
    }

    pub fn train_step(&mut self, log: &FinetuneStepLog) -> Result<()> {
        self.record(&TrainRecord {
            event: "train_step",
            env_step: log.env_step,
            dqn: log.dqn,
            aux_spr: log.aux_spr,
        })
    }

    pub fn eval(&mut self, mean_return: f64, returns: &[f64]) -> Result<()> {
        self.record(&EvalRecord {
            event: "eval",
            episodes: returns.len(),
            mean_return,
            returns,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(self.path.clone(), e))
    }
}
