//! The pretraining objectives: latent self-prediction over K-step rollouts,
//! unsupervised goal-conditioned Q-learning with hindsight goals, inverse
//! dynamics classification, and a behavioral-cloning baseline, combined as
//! a weighted sum.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::augment::{augment, AugmentConfig};
use crate::error::{CoreError, Result};
use crate::nets::{AgentNets, GraphNets, Side};
use crate::replay::{gather_observations, ReplayDataset, SequenceBatch};
use crate::rng::{self, SgiRng};
use crate::tape::{NodeId, Tape, ZeroNormPolicy};
use crate::tensor::Tensor;

/// Loss weights; latent self-prediction carries weight 2, inverse modeling
/// and goal RL weight 1, behavioral cloning is off by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub spr: f64,
    pub goal: f64,
    pub inverse: f64,
    pub bc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            spr: 2.0,
            goal: 1.0,
            inverse: 1.0,
            bc: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("spr", self.spr),
            ("goal", self.goal),
            ("inverse", self.inverse),
            ("bc", self.bc),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(CoreError::argument(format!("weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which objectives are active. Subsets reproduce the ablation grid
/// (S, G, I, S+G, G+I, S+I, SGI, and BC as a baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObjectiveMask {
    pub s: bool,
    pub g: bool,
    pub i: bool,
    pub bc: bool,
}

impl ObjectiveMask {
    pub const SGI: ObjectiveMask = ObjectiveMask {
        s: true,
        g: true,
        i: true,
        bc: false,
    };

    pub fn any(&self) -> bool {
        self.s || self.g || self.i || self.bc
    }

    /// Parse a comma-separated list like "S,G,I" or "BC".
    pub fn parse(text: &str) -> Result<ObjectiveMask> {
        let mut m = ObjectiveMask::default();
        for part in text.split(',') {
            let part = part.trim();
            match part {
                "S" | "s" => m.s = true,
                "G" | "g" => m.g = true,
                "I" | "i" => m.i = true,
                "BC" | "bc" => m.bc = true,
                "" => {}
                other => {
                    return Err(CoreError::argument(format!("unknown objective '{other}'")));
                }
            }
        }
        if !m.any() {
            return Err(CoreError::argument("empty objective mask"));
        }
        Ok(m)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.s {
            parts.push("S");
        }
        if self.g {
            parts.push("G");
        }
        if self.i {
            parts.push("I");
        }
        if self.bc {
            parts.push("BC");
        }
        parts.join("+")
    }
}

/// Goal-generation settings: hindsight horizon, noise mixing range,
/// exchange probability, and the sign convention of the shaped reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalConfig {
    pub horizon: usize,
    pub alpha_max: f64,
    pub permute_prob: f64,
    /// Flip the sign of the shaped goal reward. Off by default: the reward
    /// is potential(t) - potential(t+1) exactly as defined, which is
    /// negative while approaching the goal.
    pub negate_reward: bool,
    /// How the potential treats a zero-norm latent. Training uses the
    /// total definition (cosine 0, potential e^-2) so a temporarily dead
    /// ReLU encoder cannot abort a run; the standalone distance op defaults
    /// to erroring instead.
    pub zero_norm: ZeroNormPolicy,
}

impl Default for GoalConfig {
    fn default() -> Self {
        GoalConfig {
            horizon: 50,
            alpha_max: 0.5,
            permute_prob: 0.2,
            negate_reward: false,
            zero_norm: ZeroNormPolicy::Zero,
        }
    }
}

/// Goals with their generation provenance. `offsets`/`noise_weights`
/// describe how each row's goal was built before the exchange stage;
/// `permuted[i]` marks rows whose final goal came from another sample.
#[derive(Debug, Clone)]
pub struct GoalBatch {
    pub goals: Tensor, // [B, D_z], unit rows
    pub offsets: Vec<usize>,
    pub noise_weights: Vec<f64>,
    pub permuted: Vec<bool>,
}

impl GoalBatch {
    pub fn batch_size(&self) -> usize {
        self.offsets.len()
    }
}

fn normalize_row(row: &mut [f64]) -> bool {
    let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
    if norm == 0.0 {
        return false;
    }
    row.iter_mut().for_each(|v| *v /= norm);
    true
}

/// Unit-norm isotropic Gaussian direction.
fn unit_noise(d: usize, rng: &mut SgiRng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
        if normalize_row(&mut v) {
            return v;
        }
    }
}

/// Noise mixing stage: `alpha * n + (1 - alpha) * g`, renormalized.
/// Both inputs must be unit vectors.
pub fn mix_goal(goal: &[f64], noise: &[f64], alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = goal
        .iter()
        .zip(noise)
        .map(|(g, n)| alpha * n + (1.0 - alpha) * g)
        .collect();
    if !normalize_row(&mut out) {
        // alpha*n cancelled (1-alpha)*g exactly; fall back to the noise
        out = noise.to_vec();
    }
    out
}

/// Three-stage goal sampler: hindsight pick from the near future of each
/// anchor, Gaussian-noise mixing, then a derangement applied to a
/// Bernoulli-selected subset so some goals come from other samples.
pub fn sample_goals(
    nets: &AgentNets,
    data: &ReplayDataset,
    batch: &SequenceBatch,
    aug: &AugmentConfig,
    cfg: &GoalConfig,
    rng: &mut SgiRng,
) -> Result<GoalBatch> {
    let b = batch.batch_size();
    if b == 0 {
        return Err(CoreError::argument("sample_goals: empty batch"));
    }
    if cfg.horizon == 0 {
        return Err(CoreError::argument("goal horizon must be >= 1"));
    }

    // stage 1: hindsight offsets j ~ U{1..min(horizon, remaining)}
    let mut offsets = Vec::with_capacity(b);
    for i in 0..b {
        let hi = cfg.horizon.min(batch.remaining[i]);
        debug_assert!(hi >= 1, "sequence batch guarantees remaining >= 1");
        offsets.push(if hi == 1 { 1 } else { rng.gen_range(1..=hi) });
    }
    let items: Vec<(usize, usize)> = batch
        .anchors
        .iter()
        .zip(&offsets)
        .map(|(&(ep, t), &j)| (ep, t + j))
        .collect();
    let goal_obs = gather_observations(data, &items)?;
    let goal_obs = augment(&goal_obs, aug, rng)?;

    // target-encoder latents of the goal states
    let mut tape = Tape::new();
    let g = GraphNets::bind(nets, &mut tape, &|_| false);
    let obs_id = tape.leaf(&goal_obs);
    let z = g.encode(&mut tape, obs_id, Side::Target)?;
    let dz = tape.shape(z)[1];
    let mut goals = tape.values(z).to_vec();

    // normalize; a collapsed all-zero latent falls back to pure noise
    let mut noise_weights = Vec::with_capacity(b);
    for i in 0..b {
        let row = &mut goals[i * dz..(i + 1) * dz];
        if !normalize_row(row) {
            row.copy_from_slice(&unit_noise(dz, rng));
        }
        // stage 2: noise mixing
        let alpha = if cfg.alpha_max == 0.0 {
            0.0
        } else {
            rng.gen_range(0.0..cfg.alpha_max)
        };
        noise_weights.push(alpha);
        if alpha > 0.0 {
            let n = unit_noise(dz, rng);
            let mixed = mix_goal(row, &n, alpha);
            row.copy_from_slice(&mixed);
        }
    }

    // stage 3: exchange goals within the Bernoulli(permute_prob) subset
    // using a Sattolo cycle, which has no fixed points for subsets >= 2.
    let mut permuted = vec![false; b];
    let selected: Vec<usize> = (0..b)
        .filter(|_| cfg.permute_prob > 0.0 && rng.gen_range(0.0..1.0) < cfg.permute_prob)
        .collect();
    if selected.len() >= 2 {
        let mut order: Vec<usize> = selected.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..i);
            order.swap(i, j);
        }
        // rotate goal rows along the cycle: row order[k] receives order[k+1]
        let snapshot = goals.clone();
        for k in 0..order.len() {
            let src = order[(k + 1) % order.len()];
            let dst = order[k];
            goals[dst * dz..(dst + 1) * dz].copy_from_slice(&snapshot[src * dz..(src + 1) * dz]);
            permuted[dst] = true;
        }
    }

    Ok(GoalBatch {
        goals: Tensor::new(&[b, dz], goals)?,
        offsets,
        noise_weights,
        permuted,
    })
}

// ── goal distance and shaped reward ─────────────────────────────────

fn cosine_vec(a: &[f64], b: &[f64], policy: ZeroNormPolicy) -> Result<f64> {
    let na = libm::sqrt(a.iter().map(|v| v * v).sum());
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum());
    if na == 0.0 || nb == 0.0 {
        return match policy {
            ZeroNormPolicy::Error => Err(CoreError::zero_norm("goal distance")),
            ZeroNormPolicy::Zero => Ok(0.0),
        };
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Goal proximity `d(z, g) = exp(2 cos(z, g) - 2)`, in (0, 1], equal to 1
/// iff the vectors are parallel. Errors on zero-norm input.
pub fn goal_distance(z: &[f64], g: &[f64]) -> Result<f64> {
    goal_distance_with(z, g, ZeroNormPolicy::Error)
}

/// Potential with an explicit zero-norm policy (Zero maps a dead latent to
/// cosine 0, potential e^-2, keeping the potential total).
pub fn goal_distance_with(z: &[f64], g: &[f64], policy: ZeroNormPolicy) -> Result<f64> {
    Ok(libm::exp(2.0 * cosine_vec(z, g, policy)? - 2.0))
}

/// Potential-shaped synthetic reward `d(z_t, g) - d(z_{t+1}, g)`, computed
/// on target-encoder latents. Sums over a trajectory telescope to
/// `d(z_0, g) - d(z_T, g)`.
pub fn goal_reward(z_t: &[f64], z_next: &[f64], g: &[f64], cfg: &GoalConfig) -> Result<f64> {
    let r = goal_distance_with(z_t, g, cfg.zero_norm)?
        - goal_distance_with(z_next, g, cfg.zero_norm)?;
    Ok(if cfg.negate_reward { -r } else { r })
}

// ── losses ──────────────────────────────────────────────────────────

/// Latent self-prediction loss: `-sum_k cos(pred_k, target_k)` per sample,
/// averaged over the batch. `predicted[k]` must already be the q-translated
/// online projections; `targets[k]` the (gradient-free) target projections.
pub fn spr_loss(
    tape: &mut Tape,
    predicted: &[NodeId],
    targets: &[NodeId],
    policy: ZeroNormPolicy,
) -> Result<NodeId> {
    if predicted.is_empty() || predicted.len() != targets.len() {
        return Err(CoreError::argument(format!(
            "spr_loss: {} predictions vs {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for (p, t) in predicted.iter().zip(targets) {
        let cos = tape.rows_cosine(*p, *t, policy)?;
        acc = Some(match acc {
            None => cos,
            Some(a) => tape.add(a, cos)?,
        });
    }
    let total = tape.mean_all(acc.unwrap())?;
    tape.scale(total, -1.0)
}

/// Inverse-dynamics loss: mean over k of cross-entropy of
/// `I(concat(y_k, y_target_{k+1}))` against the taken action. Also returns
/// the training accuracy over the batch for logging.
pub fn inverse_loss(
    tape: &mut Tape,
    nets: &GraphNets,
    online_proj: &[NodeId],
    target_proj_next: &[NodeId],
    actions: &[Vec<usize>],
) -> Result<(NodeId, f64)> {
    let k = online_proj.len();
    if k == 0 || target_proj_next.len() != k || actions.len() != k {
        return Err(CoreError::argument(format!(
            "inverse_loss: {k} projections, {} targets, {} action steps",
            target_proj_next.len(),
            actions.len()
        )));
    }
    let mut acc: Option<NodeId> = None;
    let mut hits = 0usize;
    let mut total = 0usize;
    for step in 0..k {
        let logits = nets.inverse_logits(tape, online_proj[step], target_proj_next[step])?;
        let na = tape.shape(logits)[1];
        let vals = tape.values(logits);
        for (b, &a) in actions[step].iter().enumerate() {
            let row = &vals[b * na..(b + 1) * na];
            let mut best = 0;
            for j in 1..na {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == a {
                hits += 1;
            }
            total += 1;
        }
        let ce = tape.softmax_cross_entropy(logits, &actions[step])?;
        acc = Some(match acc {
            None => ce,
            Some(prev) => tape.add(prev, ce)?,
        });
    }
    let loss = tape.scale(acc.unwrap(), 1.0 / k as f64)?;
    Ok((loss, hits as f64 / total as f64))
}

/// TD loss for the goal-conditioned head: squared error against
/// `r + gamma * max_a Q_target(s', a, g)` with the synthetic shaped reward.
/// Goals and the bootstrap target are constants; gradients flow through the
/// online head, FiLM generator and encoder only.
pub fn goal_rl_loss(
    tape: &mut Tape,
    nets: &GraphNets,
    z_online: NodeId,
    z_target_now: &Tensor,
    z_target_next: &Tensor,
    actions: &[usize],
    goals: &GoalBatch,
    gamma: f64,
    cfg: &GoalConfig,
) -> Result<NodeId> {
    let b = actions.len();
    let dz = goals.goals.shape()[1];
    if goals.batch_size() != b {
        return Err(CoreError::dim(format!(
            "goal_rl_loss: {b} actions vs {} goals",
            goals.batch_size()
        )));
    }

    // synthetic rewards from target-encoder potentials
    let mut rewards = Vec::with_capacity(b);
    for i in 0..b {
        let g = &goals.goals.values()[i * dz..(i + 1) * dz];
        let zt = &z_target_now.values()[i * dz..(i + 1) * dz];
        let zn = &z_target_next.values()[i * dz..(i + 1) * dz];
        rewards.push(goal_reward(zt, zn, g, cfg)?);
    }

    // bootstrap from the target goal head on s_{t+1}
    let goal_node = tape.leaf(&goals.goals);
    let tmods = nets.film_generator(tape, goal_node, Side::Target)?;
    let zt_next = tape.leaf(z_target_next);
    let q_next = nets.q_values(tape, zt_next, Some(tmods), Side::Target)?;
    let na = tape.shape(q_next)[1];
    let qv = tape.values(q_next);
    let targets: Vec<f64> = (0..b)
        .map(|i| {
            let row = &qv[i * na..(i + 1) * na];
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rewards[i] + gamma * best
        })
        .collect();

    // online Q(s_t, a_t, g)
    let mods = nets.film_generator(tape, goal_node, Side::Online)?;
    let q = nets.q_values(tape, z_online, Some(mods), Side::Online)?;
    let q_taken = tape.select_actions(q, actions)?;
    let target_node = tape.constant(&[b], targets)?;
    let diff = tape.sub(q_taken, target_node)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Behavioral cloning: action cross-entropy of the linear policy head.
pub fn bc_loss(tape: &mut Tape, nets: &GraphNets, z: NodeId, actions: &[usize]) -> Result<NodeId> {
    let logits = nets.bc_logits(tape, z)?;
    tape.softmax_cross_entropy(logits, actions)
}

/// Per-term values of one pretraining loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub spr: Option<f64>,
    pub goal: Option<f64>,
    pub inverse: Option<f64>,
    pub bc: Option<f64>,
    pub inverse_accuracy: Option<f64>,
}

/// Everything `pretrain_loss` needs beyond the network binding: augmented
/// observations (one node per time offset), the action/goal annotations and
/// the gradient-free target latents at t and t+1.
pub struct PretrainInputs<'a> {
    pub obs: &'a [NodeId],
    pub actions: &'a [Vec<usize>],
    pub goals: Option<&'a GoalBatch>,
    pub gamma: f64,
    pub goal_cfg: GoalConfig,
}

/// Weighted sum of the enabled objectives over one sequence batch.
/// Returns the scalar loss node plus the per-term breakdown for logging.
pub fn pretrain_loss(
    tape: &mut Tape,
    nets: &GraphNets,
    inputs: &PretrainInputs<'_>,
    weights: &LossWeights,
    mask: &ObjectiveMask,
) -> Result<(NodeId, LossBreakdown)> {
    if !mask.any() {
        return Err(CoreError::argument("pretrain_loss: empty objective mask"));
    }
    weights.validate()?;
    let depth = inputs.actions.len();
    if inputs.obs.len() != depth + 1 {
        return Err(CoreError::argument(format!(
            "pretrain_loss: {} observation steps for depth {depth}",
            inputs.obs.len()
        )));
    }
    if mask.g && inputs.goals.is_none() {
        return Err(CoreError::argument("goal objective enabled but no goals supplied"));
    }

    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<(f64, NodeId)> = Vec::new();

    // online encoding of s_t
    let z_t = nets.encode(tape, inputs.obs[0], Side::Online)?;

    // target latents and projections along the sequence
    let mut z_targets = Vec::with_capacity(depth + 1);
    for &o in inputs.obs {
        z_targets.push(nets.encode(tape, o, Side::Target)?);
    }
    let mut y_targets = Vec::with_capacity(depth);
    for &zt in &z_targets[1..] {
        y_targets.push(nets.project(tape, zt, Side::Target)?);
    }

    // latent rollout, shared by S and I. S consumes all K rollout latents;
    // I consumes only the first K-1 (its inputs are the projections at
    // k = 0..K-1, with index 0 taken from z_t directly).
    let roll_len = if mask.s {
        depth
    } else if mask.i {
        depth - 1
    } else {
        0
    };
    let zhat = if roll_len > 0 {
        nets.rollout(tape, z_t, &inputs.actions[..roll_len])?
    } else {
        Vec::new()
    };

    if mask.s {
        let mut preds = Vec::with_capacity(depth);
        for z in &zhat {
            let y = nets.project(tape, *z, Side::Online)?;
            preds.push(nets.predict(tape, y)?);
        }
        let spr = spr_loss(tape, &preds, &y_targets, ZeroNormPolicy::Error)?;
        breakdown.spr = Some(tape.scalar_value(spr));
        terms.push((weights.spr, spr));
    }

    if mask.i {
        // online projections at k = 0..K-1 (rollout latent at k, with
        // zhat_0 taken as z_t itself)
        let mut y_roll = Vec::with_capacity(depth);
        y_roll.push(nets.project(tape, z_t, Side::Online)?);
        for z in zhat.iter().take(depth.saturating_sub(1)) {
            y_roll.push(nets.project(tape, *z, Side::Online)?);
        }
        let (inv, acc) = inverse_loss(tape, nets, &y_roll, &y_targets, inputs.actions)?;
        breakdown.inverse = Some(tape.scalar_value(inv));
        breakdown.inverse_accuracy = Some(acc);
        terms.push((weights.inverse, inv));
    }

    if mask.g {
        let goals = inputs.goals.unwrap();
        let z_now = Tensor::new(tape.shape(z_targets[0]), tape.values(z_targets[0]).to_vec())?;
        let z_next = Tensor::new(tape.shape(z_targets[1]), tape.values(z_targets[1]).to_vec())?;
        let g = goal_rl_loss(
            tape,
            nets,
            z_t,
            &z_now,
            &z_next,
            &inputs.actions[0],
            goals,
            inputs.gamma,
            &inputs.goal_cfg,
        )?;
        breakdown.goal = Some(tape.scalar_value(g));
        terms.push((weights.goal, g));
    }

    if mask.bc {
        let bc = bc_loss(tape, nets, z_t, &inputs.actions[0])?;
        breakdown.bc = Some(tape.scalar_value(bc));
        terms.push((weights.bc, bc));
    }

    let mut total: Option<NodeId> = None;
    for (w, node) in terms {
        let scaled = tape.scale(node, w)?;
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.unwrap();
    breakdown.total = tape.scalar_value(total);
    Ok((total, breakdown))
}
