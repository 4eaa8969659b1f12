//! Offline dataset collection: random policy with geometric action
//! repeats, epsilon-greedy rollouts from a checkpointed Q-head, and the
//! mixed regime that concatenates data from several checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::agent;
use crate::env::{self, GridPixEnv};
use crate::error::{CoreError, Result};
use crate::nets::AgentNets;
use crate::replay::{DatasetMeta, EpisodeData, ReplayDataset, SegmentMeta};
use crate::rng::{self, stream, SgiRng};

/// Linear epsilon decay from `start` to `end` over `horizon` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl EpsSchedule {
    pub fn constant(eps: f64) -> EpsSchedule {
        EpsSchedule {
            start: eps,
            end: eps,
            horizon: 0,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if self.horizon == 0 || step >= self.horizon {
            return self.end;
        }
        let frac = step as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// How the collector picks the start cell of each episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    /// The layout's canonical start every episode.
    Fixed,
    /// Re-seeded start region per episode (the exploratory-data analogue).
    Varied,
}

struct EpisodeRecorder {
    episodes: Vec<EpisodeData>,
    collected: usize,
    target: usize,
}

impl EpisodeRecorder {
    fn new(target: usize) -> Self {
        EpisodeRecorder {
            episodes: Vec::new(),
            collected: 0,
            target,
        }
    }

    fn full(&self) -> bool {
        self.collected >= self.target
    }

    fn room(&self) -> usize {
        self.target - self.collected
    }
}

/// Run episodes until exactly `n` transitions are stored. The policy
/// closure returns (action, repeat_count).
fn collect_with<P>(
    env_seed: u64,
    n: usize,
    seed: u64,
    start_mode: StartMode,
    collector_id: &str,
    mut policy: P,
) -> Result<ReplayDataset>
where
    P: FnMut(&GridPixEnv, u64, &mut SgiRng) -> Result<(env::Action, u64)>,
{
    if n == 0 {
        return Err(CoreError::argument("n_transitions must be > 0"));
    }
    let mut rng = rng::stream_rng(seed, stream::COLLECT);
    let mut rec = EpisodeRecorder::new(n);
    let mut global_step: u64 = 0;
    let mut episode_index: u64 = 0;
    let mut truncated_final = false;

    while !rec.full() {
        let mut e = match start_mode {
            StartMode::Fixed => GridPixEnv::reset(env_seed),
            StartMode::Varied => {
                GridPixEnv::reset_with_start(env_seed, rng::derive(seed, 0x5A57 ^ episode_index))
            }
        };
        let mut ep = EpisodeData {
            frames: alloc::vec![e.last_frame().to_vec()],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
        };
        while !e.done() {
            let (action, repeats) = policy(&e, global_step, &mut rng)?;
            for _ in 0..repeats.max(1) {
                if e.done() || ep.actions.len() >= rec.room() {
                    break;
                }
                let t = e.step(action)?;
                ep.frames.push(e.last_frame().to_vec());
                ep.actions.push(t.action as u8);
                ep.rewards.push(t.reward);
                global_step += 1;
            }
            if ep.actions.len() >= rec.room() {
                break;
            }
        }
        ep.terminated = e.done();
        truncated_final = !ep.terminated;
        rec.collected += ep.actions.len();
        rec.episodes.push(ep);
        episode_index += 1;
    }

    let data = ReplayDataset {
        meta: DatasetMeta {
            collector: String::from(collector_id),
            env_seed,
            created_unix: 0,
            transitions: rec.collected as u64,
            frame_shape: [env::RES, env::RES],
            frame_stack: env::FRAME_STACK,
            num_actions: env::NUM_ACTIONS,
            final_episode_truncated: truncated_final,
            segments: Vec::new(),
        },
        episodes: rec.episodes,
    };
    data.validate()?;
    Ok(data)
}

/// Uniform-random policy; each chosen action repeats Geometric(1/3) times
/// (support {1, 2, ...}), pushing the walker away from its start.
pub fn collect_random(env_seed: u64, n: usize, seed: u64, start_mode: StartMode) -> Result<ReplayDataset> {
    collect_with(env_seed, n, seed, start_mode, "random", |_, _, rng| {
        let a = env::Action::from_index(rng.gen_range(0..env::NUM_ACTIONS))?;
        let k = rng::geometric(rng, 1.0 / 3.0);
        Ok((a, k))
    })
}

/// Epsilon-greedy rollouts from a task Q-head, with a linear epsilon decay
/// over collection steps.
pub fn collect_policy(
    nets: &AgentNets,
    env_seed: u64,
    schedule: EpsSchedule,
    n: usize,
    seed: u64,
    start_mode: StartMode,
) -> Result<ReplayDataset> {
    check_env_compatible(nets)?;
    collect_with(env_seed, n, seed, start_mode, "policy", |e, step, rng| {
        let a = agent::act(nets, &e.observation(), schedule.at(step), rng)?;
        Ok((env::Action::from_index(a)?, 1))
    })
}

/// Mixed regime: concatenate fixed-epsilon rollouts from several
/// checkpoints, recording per-segment provenance.
pub fn build_mixed_dataset(
    checkpoints: &[&AgentNets],
    per_checkpoint: usize,
    epsilon: f64,
    env_seed: u64,
    seed: u64,
) -> Result<ReplayDataset> {
    if checkpoints.len() < 2 {
        return Err(CoreError::argument(format!(
            "mixed dataset needs >= 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let mut episodes = Vec::new();
    let mut segments = Vec::new();
    let mut total = 0u64;
    let mut truncated_final = false;
    for (i, nets) in checkpoints.iter().enumerate() {
        let part = collect_policy(
            nets,
            env_seed,
            EpsSchedule::constant(epsilon),
            per_checkpoint,
            rng::derive(seed, i as u64),
            StartMode::Fixed,
        )?;
        let returns: Vec<f64> = part
            .episodes
            .iter()
            .map(|e| e.rewards.iter().sum::<f64>())
            .collect();
        segments.push(SegmentMeta {
            collector: format!("checkpoint{i}"),
            start_episode: episodes.len() as u64,
            episodes: part.episodes.len() as u64,
            transitions: part.meta.transitions,
            mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        });
        total += part.meta.transitions;
        truncated_final = part.meta.final_episode_truncated;
        episodes.extend(part.episodes);
    }
    let data = ReplayDataset {
        meta: DatasetMeta {
            collector: String::from("mixed"),
            env_seed,
            created_unix: 0,
            transitions: total,
            frame_shape: [env::RES, env::RES],
            frame_stack: env::FRAME_STACK,
            num_actions: env::NUM_ACTIONS,
            final_episode_truncated: truncated_final,
            segments,
        },
        episodes,
    };
    data.validate()?;
    Ok(data)
}

pub fn check_env_compatible(nets: &AgentNets) -> Result<()> {
    let s = &nets.spec;
    if s.in_channels != env::FRAME_STACK
        || s.in_height != env::RES
        || s.in_width != env::RES
        || s.num_actions != env::NUM_ACTIONS
    {
        return Err(CoreError::format(format!(
            "checkpoint expects [{},{},{}] x {} actions; env provides [{},{},{}] x {}",
            s.in_channels,
            s.in_height,
            s.in_width,
            s.num_actions,
            env::FRAME_STACK,
            env::RES,
            env::RES,
            env::NUM_ACTIONS,
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderSpec;

    #[test]
    fn schedule_interpolates_linearly() {
        let s = EpsSchedule {
            start: 1.0,
            end: 0.1,
            horizon: 10_000,
        };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(5_000) - 0.55).abs() < 1e-12);
        assert_eq!(s.at(10_000), 0.1);
        assert_eq!(s.at(50_000), 0.1);
    }

    #[test]
    fn random_collection_is_exact_and_deterministic() {
        let a = collect_random(0, 700, 9, StartMode::Fixed).unwrap();
        assert_eq!(a.transition_count(), 700);
        assert_eq!(a.meta.transitions, 700);
        let b = collect_random(0, 700, 9, StartMode::Fixed).unwrap();
        assert_eq!(a, b);
        let c = collect_random(0, 700, 10, StartMode::Fixed).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_collection_episodes_terminate_except_possibly_last() {
        let d = collect_random(1, 450, 3, StartMode::Fixed).unwrap();
        for ep in &d.episodes[..d.episodes.len() - 1] {
            assert!(ep.terminated);
        }
        assert_eq!(
            d.meta.final_episode_truncated,
            !d.episodes.last().unwrap().terminated
        );
    }

    #[test]
    fn random_action_marginal_is_uniform() {
        // chi^2 over 5 actions at alpha = 0.01 (4 dof): critical 13.2767.
        // Geometric(1/3) repeats cluster the samples, inflating the count
        // variance by the design effect
        //   (E[k^2] p - (E[k] p)^2) / (E[k] p (1-p)) = (3 - 0.36) / 0.48 = 5.5
        // so the statistic is corrected before comparing to the critical
        // value (a raw chi^2 assumes independent draws).
        let d = collect_random(2, 20_000, 4, StartMode::Fixed).unwrap();
        let hist = d.stats().unwrap().action_histogram;
        let expected = 20_000.0 / 5.0;
        let chi2: f64 = hist
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let corrected = chi2 / 5.5;
        assert!(corrected < 13.276704135987622, "chi2/deff {corrected}, hist {hist:?}");
    }

    #[test]
    fn policy_collection_at_eps_one_is_uniform() {
        let nets = AgentNets::init(EncoderSpec::small_pixel(), 0).unwrap();
        let d = collect_policy(
            &nets,
            0,
            EpsSchedule::constant(1.0),
            10_000,
            5,
            StartMode::Fixed,
        )
        .unwrap();
        let hist = d.stats().unwrap().action_histogram;
        let expected = 10_000.0 / 5.0;
        let chi2: f64 = hist
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        assert!(chi2 < 13.276704135987622, "chi2 {chi2}, hist {hist:?}");
    }

    #[test]
    fn incompatible_checkpoint_is_format_error() {
        let nets = AgentNets::init(EncoderSpec::micro(2, 7, 5), 0).unwrap();
        let r = collect_policy(&nets, 0, EpsSchedule::constant(0.5), 10, 0, StartMode::Fixed);
        assert!(matches!(r, Err(CoreError::Format(_))));
    }

    #[test]
    fn mixed_dataset_counts_and_segments() {
        let a = AgentNets::init(EncoderSpec::small_pixel(), 1).unwrap();
        let b = AgentNets::init(EncoderSpec::small_pixel(), 2).unwrap();
        let d = build_mixed_dataset(&[&a, &b], 500, 0.3, 0, 11).unwrap();
        assert_eq!(d.transition_count(), 1000);
        assert_eq!(d.meta.segments.len(), 2);
        assert_eq!(d.meta.segments[0].transitions, 500);
        assert_eq!(d.meta.segments[1].start_episode, d.meta.segments[0].episodes);
        // segment boundaries align with episode boundaries by construction:
        // episode counts add up
        let total_eps: u64 = d.meta.segments.iter().map(|s| s.episodes).sum();
        assert_eq!(total_eps, d.episodes.len() as u64);
        assert!(matches!(
            build_mixed_dataset(&[&a], 10, 0.3, 0, 1),
            Err(CoreError::Argument(_))
        ));
    }
}
