//! Offline datasets and the online replay buffer.
//!
//! Episodes store one u8 frame per step (plus the initial frame) and
//! reconstruct stacked observations on demand, so a 20k-transition pixel
//! dataset stays in the tens of megabytes. Observation values are exactly
//! `frame_byte / 255`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::env::Transition;
use crate::error::{CoreError, Result};
use crate::rng::SgiRng;
use crate::tensor::Tensor;

/// One episode: `steps + 1` frames, `steps` actions/rewards.
/// `terminated` is false only for an episode cut off by the collector.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeData {
    pub frames: Vec<Vec<u8>>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
}

impl EpisodeData {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Provenance for one slice of a mixed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMeta {
    pub collector: String,
    pub start_episode: u64,
    pub episodes: u64,
    pub transitions: u64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub collector: String,
    pub env_seed: u64,
    /// Unix seconds; 0 unless the caller injects a clock, so that identical
    /// runs produce identical bytes.
    pub created_unix: u64,
    pub transitions: u64,
    pub frame_shape: [usize; 2],
    pub frame_stack: usize,
    pub num_actions: usize,
    pub final_episode_truncated: bool,
    pub segments: Vec<SegmentMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<EpisodeData>,
}

/// Summary statistics used to characterize dataset quality. Rewards are
/// clipped to [-1, 1] before the per-episode sums are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub avg_clipped_reward_per_episode: f64,
    pub episodes: u64,
    pub transitions: u64,
    pub action_histogram: Vec<u64>,
}

impl ReplayDataset {
    /// Internal-consistency check: frame/action/reward counts line up and
    /// the advertised transition total matches the stored episodes.
    pub fn validate(&self) -> Result<()> {
        let mut total = 0u64;
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.frames.len() != ep.steps() + 1 || ep.rewards.len() != ep.steps() {
                return Err(CoreError::format(alloc::format!(
                    "episode {i}: {} frames, {} actions, {} rewards",
                    ep.frames.len(),
                    ep.actions.len(),
                    ep.rewards.len()
                )));
            }
            let frame_len = self.meta.frame_shape[0] * self.meta.frame_shape[1];
            if ep.frames.iter().any(|f| f.len() != frame_len) {
                return Err(CoreError::format(alloc::format!("episode {i}: bad frame size")));
            }
            if !ep.rewards.iter().all(|r| r.is_finite()) {
                return Err(CoreError::format(alloc::format!("episode {i}: non-finite reward")));
            }
            total += ep.steps() as u64;
        }
        if total != self.meta.transitions {
            return Err(CoreError::format(alloc::format!(
                "metadata says {} transitions, episodes hold {total}",
                self.meta.transitions
            )));
        }
        Ok(())
    }

    pub fn transition_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps()).sum()
    }

    /// Stacked observation at (episode, t): frames `t-S+1 ..= t`, clamped to
    /// the episode start (matching how the environment fills its stack on
    /// reset). Valid for `t <= steps` (t == steps is the terminal view).
    pub fn observation(&self, episode: usize, t: usize) -> Result<Tensor> {
        let ep = self
            .episodes
            .get(episode)
            .ok_or_else(|| CoreError::index(alloc::format!("episode {episode}")))?;
        if t >= ep.frames.len() {
            return Err(CoreError::index(alloc::format!(
                "observation {t} in episode of {} steps",
                ep.steps()
            )));
        }
        let [h, w] = self.meta.frame_shape;
        let stack = self.meta.frame_stack;
        let mut values = Vec::with_capacity(stack * h * w);
        for k in 0..stack {
            let idx = (t + k + 1).saturating_sub(stack);
            values.extend(ep.frames[idx].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(&[stack, h, w], values)
    }

    /// Full transition view at (episode, i).
    pub fn transition(&self, episode: usize, i: usize) -> Result<Transition> {
        let ep = self
            .episodes
            .get(episode)
            .ok_or_else(|| CoreError::index(alloc::format!("episode {episode}")))?;
        if i >= ep.steps() {
            return Err(CoreError::index(alloc::format!(
                "transition {i} in episode of {} steps",
                ep.steps()
            )));
        }
        Ok(Transition {
            observation: self.observation(episode, i)?,
            action: ep.actions[i] as usize,
            reward: ep.rewards[i],
            done: i + 1 == ep.steps() && ep.terminated,
            next_observation: self.observation(episode, i + 1)?,
        })
    }

    pub fn stats(&self) -> Result<DatasetStats> {
        if self.episodes.is_empty() {
            return Err(CoreError::argument("stats of an empty dataset"));
        }
        let mut hist = vec![0u64; self.meta.num_actions];
        let mut clipped_total = 0.0;
        for ep in &self.episodes {
            clipped_total += ep.rewards.iter().map(|r| r.clamp(-1.0, 1.0)).sum::<f64>();
            for &a in &ep.actions {
                hist[a as usize] += 1;
            }
        }
        Ok(DatasetStats {
            avg_clipped_reward_per_episode: clipped_total / self.episodes.len() as f64,
            episodes: self.episodes.len() as u64,
            transitions: self.transition_count() as u64,
            action_histogram: hist,
        })
    }
}

// ── sequence sampling ───────────────────────────────────────────────

/// A batch of within-episode sequences `s_t..s_{t+K}`, `a_t..a_{t+K-1}`.
/// Observations are batched per time offset (`obs[k]` is `[B,S,H,W]`),
/// which is the layout the encoder consumes.
#[derive(Debug)]
pub struct SequenceBatch {
    pub depth: usize,
    pub obs: Vec<Tensor>,
    /// actions[k][b] = a_{t+k}, k < depth
    pub actions: Vec<Vec<usize>>,
    /// rewards[k][b] = r_{t+k}
    pub rewards: Vec<Vec<f64>>,
    /// (episode, t) per sample
    pub anchors: Vec<(usize, usize)>,
    /// steps still available in the episode past the anchor (>= depth)
    pub remaining: Vec<usize>,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.anchors.len()
    }
}

/// Gather stacked observations for a list of (episode, t) into `[B,S,H,W]`.
pub fn gather_observations(data: &ReplayDataset, items: &[(usize, usize)]) -> Result<Tensor> {
    let [h, w] = data.meta.frame_shape;
    let stack = data.meta.frame_stack;
    let mut values = Vec::with_capacity(items.len() * stack * h * w);
    for &(ep, t) in items {
        let obs = data.observation(ep, t)?;
        values.extend_from_slice(obs.values());
    }
    Tensor::new(&[items.len(), stack, h, w], values)
}

/// Uniform sampler over all valid K-sequence anchors. Sequences never cross
/// episode boundaries: anchor t in episode of L steps is valid iff t+K <= L.
#[derive(Debug, Clone)]
pub struct SequenceSampler {
    depth: usize,
    /// (episode, number of valid anchors in it)
    spans: Vec<(usize, usize)>,
    total: usize,
}

impl SequenceSampler {
    pub fn new(data: &ReplayDataset, depth: usize) -> Result<SequenceSampler> {
        if depth == 0 {
            return Err(CoreError::argument("sequence depth must be >= 1"));
        }
        let mut spans = Vec::new();
        let mut total = 0;
        for (i, ep) in data.episodes.iter().enumerate() {
            if ep.steps() >= depth {
                let n = ep.steps() - depth + 1;
                spans.push((i, n));
                total += n;
            }
        }
        if total == 0 {
            return Err(CoreError::argument(alloc::format!(
                "dataset too short: no episode supports depth-{depth} sequences"
            )));
        }
        Ok(SequenceSampler { depth, spans, total })
    }

    pub fn anchor_count(&self) -> usize {
        self.total
    }

    fn draw_anchor(&self, rng: &mut SgiRng) -> (usize, usize) {
        let mut pick = rng.gen_range(0..self.total);
        for &(ep, n) in &self.spans {
            if pick < n {
                return (ep, pick);
            }
            pick -= n;
        }
        unreachable!()
    }

    pub fn sample(&self, data: &ReplayDataset, batch: usize, rng: &mut SgiRng) -> Result<SequenceBatch> {
        if batch == 0 {
            return Err(CoreError::argument("batch size must be >= 1"));
        }
        let k = self.depth;
        let mut anchors = Vec::with_capacity(batch);
        let mut remaining = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (ep, t) = self.draw_anchor(rng);
            remaining.push(data.episodes[ep].steps() - t);
            anchors.push((ep, t));
        }
        let mut obs = Vec::with_capacity(k + 1);
        for off in 0..=k {
            let items: Vec<(usize, usize)> = anchors.iter().map(|&(e, t)| (e, t + off)).collect();
            obs.push(gather_observations(data, &items)?);
        }
        let mut actions = Vec::with_capacity(k);
        let mut rewards = Vec::with_capacity(k);
        for off in 0..k {
            actions.push(
                anchors
                    .iter()
                    .map(|&(e, t)| data.episodes[e].actions[t + off] as usize)
                    .collect(),
            );
            rewards.push(
                anchors
                    .iter()
                    .map(|&(e, t)| data.episodes[e].rewards[t + off])
                    .collect(),
            );
        }
        Ok(SequenceBatch {
            depth: k,
            obs,
            actions,
            rewards,
            anchors,
            remaining,
        })
    }
}

// ── online replay buffer ────────────────────────────────────────────

/// Episodic replay for finetuning. Whole episodes are evicted oldest-first
/// once the transition capacity is exceeded.
#[derive(Debug)]
pub struct ReplayBuffer {
    pub data: ReplayDataset,
    capacity: usize,
    current: Option<EpisodeData>,
}

impl ReplayBuffer {
    pub fn new(frame_shape: [usize; 2], frame_stack: usize, num_actions: usize, capacity: usize) -> Self {
        ReplayBuffer {
            data: ReplayDataset {
                meta: DatasetMeta {
                    collector: String::from("online"),
                    env_seed: 0,
                    created_unix: 0,
                    transitions: 0,
                    frame_shape,
                    frame_stack,
                    num_actions,
                    final_episode_truncated: false,
                    segments: Vec::new(),
                },
                episodes: Vec::new(),
            },
            capacity,
            current: None,
        }
    }

    pub fn start_episode(&mut self, first_frame: Vec<u8>) {
        debug_assert!(self.current.is_none(), "previous episode still open");
        self.current = Some(EpisodeData {
            frames: vec![first_frame],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
        });
    }

    pub fn push(&mut self, action: usize, reward: f64, done: bool, next_frame: Vec<u8>) {
        let ep = self.current.as_mut().expect("push without start_episode");
        ep.frames.push(next_frame);
        ep.actions.push(action as u8);
        ep.rewards.push(reward);
        if done {
            let mut finished = self.current.take().unwrap();
            finished.terminated = true;
            self.data.meta.transitions += finished.steps() as u64;
            self.data.episodes.push(finished);
            while self.data.meta.transitions as usize > self.capacity && self.data.episodes.len() > 1 {
                let evicted = self.data.episodes.remove(0);
                self.data.meta.transitions -= evicted.steps() as u64;
            }
        }
    }

    /// Completed transitions available for sampling.
    pub fn len(&self) -> usize {
        self.data.meta.transitions as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample a sequence batch if enough data is stored.
    pub fn sample(&self, depth: usize, batch: usize, rng: &mut SgiRng) -> Option<SequenceBatch> {
        let sampler = SequenceSampler::new(&self.data, depth).ok()?;
        sampler.sample(&self.data, batch, rng).ok()
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Synthetic dataset with `side x side` frames whose bytes encode
    /// (episode, step, pixel) so latents vary across states; rewards equal
    /// the step index.
    pub fn toy_dataset_sized(
        side: usize,
        stack: usize,
        episode_lengths: &[usize],
        terminated: &[bool],
    ) -> ReplayDataset {
        let mut episodes = Vec::new();
        let mut total = 0u64;
        for (e, &len) in episode_lengths.iter().enumerate() {
            let frames = (0..=len)
                .map(|t| {
                    (0..side * side)
                        .map(|p| ((e * 50 + t + p * 37) % 256) as u8)
                        .collect()
                })
                .collect();
            episodes.push(EpisodeData {
                frames,
                actions: (0..len).map(|t| (t % 5) as u8).collect(),
                rewards: (0..len).map(|t| t as f64).collect(),
                terminated: terminated[e],
            });
            total += len as u64;
        }
        ReplayDataset {
            meta: DatasetMeta {
                collector: String::from("toy"),
                env_seed: 0,
                created_unix: 0,
                transitions: total,
                frame_shape: [side, side],
                frame_stack: stack,
                num_actions: 5,
                final_episode_truncated: !terminated.last().unwrap(),
                segments: Vec::new(),
            },
            episodes,
        }
    }

    /// The 2x2 variant most unit tests use.
    pub fn toy_dataset(episode_lengths: &[usize], terminated: &[bool]) -> ReplayDataset {
        toy_dataset_sized(2, 2, episode_lengths, terminated)
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::toy_dataset;
    use super::*;
    use crate::rng::{stream, stream_rng};

    #[test]
    fn observation_stacks_clamp_at_episode_start() {
        let d = toy_dataset(&[3], &[true]);
        let obs0 = d.observation(0, 0).unwrap();
        // both stack slots show frame 0
        assert_eq!(obs0.values()[0], obs0.values()[4]);
        let obs1 = d.observation(0, 1).unwrap();
        assert_eq!(obs1.values()[0], 0.0);
        assert!((obs1.values()[4] - 1.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn done_flag_only_on_final_transition_of_terminated_episode() {
        let d = toy_dataset(&[3, 2], &[true, false]);
        assert!(!d.transition(0, 1).unwrap().done);
        assert!(d.transition(0, 2).unwrap().done);
        assert!(!d.transition(1, 1).unwrap().done, "truncated episode has no done");
    }

    #[test]
    fn stats_clip_rewards() {
        // rewards {+5} and {+1, +1} -> clipped sums 1 and 2 -> average 1.5
        let mut d = toy_dataset(&[1, 2], &[true, true]);
        d.episodes[0].rewards = alloc::vec![5.0];
        d.episodes[1].rewards = alloc::vec![1.0, 1.0];
        let s = d.stats().unwrap();
        assert_eq!(s.avg_clipped_reward_per_episode, 1.5);
        assert_eq!(s.episodes, 2);
        assert_eq!(s.transitions, 3);
    }

    #[test]
    fn stats_all_zero_rewards() {
        let mut d = toy_dataset(&[4], &[true]);
        d.episodes[0].rewards = alloc::vec![0.0; 4];
        assert_eq!(d.stats().unwrap().avg_clipped_reward_per_episode, 0.0);
    }

    #[test]
    fn stats_single_episode_equals_its_clipped_sum() {
        let mut d = toy_dataset(&[3], &[true]);
        d.episodes[0].rewards = alloc::vec![0.5, -3.0, 0.25];
        let s = d.stats().unwrap();
        assert_eq!(s.avg_clipped_reward_per_episode, 0.5 - 1.0 + 0.25);
    }

    #[test]
    fn stats_of_empty_dataset_is_argument_error() {
        let d = toy_dataset(&[1], &[true]);
        let d = ReplayDataset {
            meta: d.meta,
            episodes: Vec::new(),
        };
        assert!(matches!(d.stats(), Err(CoreError::Argument(_))));
    }

    #[test]
    fn sampler_rejects_too_short_datasets() {
        let d = toy_dataset(&[2, 1], &[true, true]);
        assert!(SequenceSampler::new(&d, 3).is_err());
        assert!(SequenceSampler::new(&d, 2).is_ok());
    }

    #[test]
    fn sampled_sequences_stay_inside_episodes() {
        let d = toy_dataset(&[6, 4, 9], &[true, true, false]);
        let sampler = SequenceSampler::new(&d, 3).unwrap();
        let mut rng = stream_rng(0, stream::TRAIN);
        let batch = sampler.sample(&d, 64, &mut rng).unwrap();
        assert_eq!(batch.obs.len(), 4);
        assert_eq!(batch.obs[0].shape(), &[64, 2, 2, 2]);
        for (i, &(ep, t)) in batch.anchors.iter().enumerate() {
            assert!(t + 3 <= d.episodes[ep].steps());
            assert_eq!(batch.remaining[i], d.episodes[ep].steps() - t);
            // rewards in this toy dataset equal the step index
            assert_eq!(batch.rewards[0][i], t as f64);
            assert_eq!(batch.rewards[2][i], (t + 2) as f64);
        }
    }

    #[test]
    fn replay_buffer_evicts_whole_episodes() {
        let mut buf = ReplayBuffer::new([2, 2], 2, 5, 5);
        for e in 0..4 {
            buf.start_episode(alloc::vec![e as u8; 4]);
            for i in 0..3 {
                buf.push(0, 0.0, i == 2, alloc::vec![e as u8; 4]);
            }
        }
        assert!(buf.len() <= 5 + 2, "capacity roughly respected: {}", buf.len());
        assert!(buf.data.episodes.len() < 4, "old episodes evicted");
        let mut rng = stream_rng(0, stream::TRAIN);
        assert!(buf.sample(2, 8, &mut rng).is_some());
    }
}
