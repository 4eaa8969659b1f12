//! Self-check suite behind `sgi verify`: gradient fidelity against finite
//! differences, algebraic identities, statistics oracles, sampler
//! distributions, environment determinism and artifact round-trips. Each
//! check prints one line; any failure makes the command exit nonzero.

use sgi_core::agent::{self, AgentCheckpoint, Provenance};
use sgi_core::augment::AugmentConfig;
use sgi_core::collect::{collect_random, StartMode};
use sgi_core::env::GridPixEnv;
use sgi_core::gradcheck::{grad_check, grad_check_multi};
use sgi_core::nets::{film_modulate, AgentNets, EncoderSpec, GraphNets};
use sgi_core::objectives::{
    goal_distance, goal_reward, pretrain_loss, sample_goals, spr_loss, GoalConfig, LossWeights,
    ObjectiveMask, PretrainInputs,
};
use sgi_core::optim::{AdamConfig, AdamState, ParamGroup, ParamSet};
use sgi_core::replay::{DatasetMeta, EpisodeData, ReplayDataset, SequenceBatch, SequenceSampler};
use sgi_core::rng::{self, stream};
use sgi_core::stats::{aggregate, bootstrap_ci, hns, Metric};
use sgi_core::tape::{Tape, ZeroNormPolicy};
use sgi_core::tensor::Tensor;

use rand::Rng;

pub const CHI2_99_DF4: f64 = 13.276704135987622;
pub const CHI2_99_DF49: f64 = 74.91947430847816;

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Test fixture: negate the analytic cosine gradient before comparing,
    /// to confirm the harness catches a broken backward pass.
    pub flip_cosine_gradient_sign: bool,
}

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: std::result::Result<String, String>) -> CheckOutcome {
    match result {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

fn bounded(name: &str, value: f64, bound: f64) -> std::result::Result<String, String> {
    if value < bound {
        Ok(format!("{name} {value:.3e} < {bound:.1e}"))
    } else {
        Err(format!("{name} {value:.3e} exceeds {bound:.1e}"))
    }
}

/// Synthetic micro dataset: 6x6 single-frame observations, one long
/// episode so hindsight offsets are never truncated.
pub fn micro_dataset(episode_len: usize) -> ReplayDataset {
    let frames = (0..=episode_len)
        .map(|t| (0..36).map(|p| ((t * 11 + p * 7) % 256) as u8).collect())
        .collect();
    ReplayDataset {
        meta: DatasetMeta {
            collector: "micro".into(),
            env_seed: 0,
            created_unix: 0,
            transitions: episode_len as u64,
            frame_shape: [6, 6],
            frame_stack: 1,
            num_actions: 5,
            final_episode_truncated: false,
            segments: Vec::new(),
        },
        episodes: vec![EpisodeData {
            frames,
            actions: (0..episode_len).map(|t| (t % 5) as u8).collect(),
            rewards: vec![0.0; episode_len],
            terminated: true,
        }],
    }
}

pub fn micro_nets(seed: u64) -> AgentNets {
    AgentNets::init(EncoderSpec::micro(1, 6, 5), seed).unwrap()
}

// ── gradient checks ─────────────────────────────────────────────────

fn grad_affine(seeds: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng::stream_rng(seed, stream::INIT);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let w = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let b = Tensor::uniform(&[2], 1.0, &mut r);
        let err = grad_check_multi(
            |tape, ids| {
                let y = tape.affine(ids[0], ids[1], ids[2])?;
                let sq = tape.mul(y, y)?;
                tape.mean_all(sq)
            },
            &[x, w, b],
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    bounded("max rel err", worst, 1e-4)
}

fn grad_conv(seeds: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng::stream_rng(seed, stream::INIT);
        let x = Tensor::uniform(&[2, 2, 6, 6], 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::uniform(&[3], 1.0, &mut r);
        let err = grad_check_multi(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 2)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &[x, w, b],
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    bounded("max rel err", worst, 1e-4)
}

fn grad_cosine(seeds: u64, flip_sign: bool) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng::stream_rng(seed, stream::GOALS);
        let a = Tensor::uniform(&[6], 1.0, &mut r).with_grad();
        let b = Tensor::uniform(&[6], 1.0, &mut r);

        // analytic gradient w.r.t. a (optionally sabotaged by the fixture)
        let mut tape = Tape::new();
        let ia = tape.leaf(&a);
        let ib = tape.leaf(&b);
        let c = tape
            .cosine(ia, ib, ZeroNormPolicy::Error)
            .map_err(|e| e.to_string())?;
        let s = tape.sum_all(c).map_err(|e| e.to_string())?;
        tape.backward(s).map_err(|e| e.to_string())?;
        let sign = if flip_sign { -1.0 } else { 1.0 };
        let analytic: Vec<f64> = tape.grad(ia).unwrap().iter().map(|g| g * sign).collect();

        // central differences
        let h = 1e-5;
        for i in 0..a.numel() {
            let eval = |delta: f64| -> f64 {
                let mut probe = a.clone();
                probe.values_mut()[i] += delta;
                let mut t = Tape::new();
                let pa = t.leaf(&probe);
                let pb = t.leaf(&b);
                let c = t.cosine(pa, pb, ZeroNormPolicy::Error).unwrap();
                t.scalar_value(c)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    bounded("max rel err", worst, 1e-4)
}

fn grad_softmax_ce(seeds: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng::stream_rng(seed, stream::TRAIN);
        let logits = Tensor::uniform(&[4, 5], 2.0, &mut r);
        let labels = [0usize, 3, 2, 4];
        let err = grad_check(|tape, l| tape.softmax_cross_entropy(l, &labels), &logits, 1e-5)
            .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    bounded("max rel err", worst, 1e-4)
}

fn grad_layer_norm(seeds: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng::stream_rng(seed, stream::TRAIN);
        let x = Tensor::uniform(&[3, 6], 1.5, &mut r);
        let scale = Tensor::uniform(&[6], 1.0, &mut r);
        let shift = Tensor::uniform(&[6], 1.0, &mut r);
        let err = grad_check_multi(
            |tape, ids| {
                let ln = sgi_core::nets::layer_norm(tape, ids[0], ids[1], ids[2])?;
                let sq = tape.mul(ln, ln)?;
                tape.mean_all(sq)
            },
            &[x, scale, shift],
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    bounded("max rel err", worst, 1e-4)
}

fn grad_film(seeds: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng::stream_rng(seed, stream::TRAIN);
        let x = Tensor::uniform(&[2, 5], 1.5, &mut r);
        let gamma = Tensor::uniform(&[2, 5], 1.0, &mut r);
        let beta = Tensor::uniform(&[2, 5], 1.0, &mut r);
        let err = grad_check_multi(
            |tape, ids| {
                let fm = film_modulate(tape, ids[0], ids[1], ids[2])?;
                let sq = tape.mul(fm, fm)?;
                tape.mean_all(sq)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    bounded("max rel err", worst, 1e-4)
}

fn pretrain_micro_fixture(seed: u64) -> (AgentNets, ReplayDataset, SequenceBatch, sgi_core::objectives::GoalBatch) {
    let nets = micro_nets(seed);
    let data = micro_dataset(30);
    let sampler = SequenceSampler::new(&data, 2).unwrap();
    let mut r = rng::stream_rng(seed, stream::TRAIN);
    let batch = sampler.sample(&data, 2, &mut r).unwrap();
    let goals = sample_goals(
        &nets,
        &data,
        &batch,
        &AugmentConfig::identity(),
        &GoalConfig::default(),
        &mut r,
    )
    .unwrap();
    (nets, data, batch, goals)
}

fn grad_pretrain_full(seeds: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (nets, _data, batch, goals) = pretrain_micro_fixture(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        nets.online.visit(&mut |n, t| {
            names.push(n.to_string());
            tensors.push(t.clone());
        });
        let err = grad_check_multi(
            |tape, ids| {
                let mut g = GraphNets::bind(&nets, tape, &|_| false);
                for (name, id) in names.iter().zip(ids) {
                    g.override_node(name, *id);
                }
                let obs: Vec<_> = batch.obs.iter().map(|o| tape.leaf(o)).collect();
                let inputs = PretrainInputs {
                    obs: &obs,
                    actions: &batch.actions,
                    goals: Some(&goals),
                    gamma: 0.99,
                    goal_cfg: GoalConfig::default(),
                };
                let (total, _) = pretrain_loss(
                    tape,
                    &g,
                    &inputs,
                    &LossWeights {
                        bc: 0.5,
                        ..LossWeights::default()
                    },
                    &ObjectiveMask {
                        s: true,
                        g: true,
                        i: true,
                        bc: true,
                    },
                )?;
                Ok(total)
            },
            &tensors,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    bounded("max rel err", worst, 1e-4)
}

fn grad_dqn(seeds: u64) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let nets = micro_nets(seed);
        let mut r = rng::stream_rng(seed, stream::TRAIN);
        let obs = Tensor::uniform(&[2, 1, 6, 6], 0.5, &mut r);
        let next = Tensor::uniform(&[2, 1, 6, 6], 0.5, &mut r);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        nets.online.visit(&mut |n, t| {
            if n.starts_with("encoder") || n.starts_with("task_q") {
                names.push(n.to_string());
                tensors.push(t.clone());
            }
        });
        let err = grad_check_multi(
            |tape, ids| {
                let mut g = GraphNets::bind(&nets, tape, &|_| false);
                for (name, id) in names.iter().zip(ids) {
                    g.override_node(name, *id);
                }
                let o = tape.constant(&[2, 1, 6, 6], obs.values().to_vec())?;
                let n = tape.constant(&[2, 1, 6, 6], next.values().to_vec())?;
                let (loss, _) = agent::dqn_loss(
                    tape,
                    &g,
                    o,
                    &[1, 4],
                    &[0.5, -0.25],
                    &[false, true],
                    n,
                    0.99,
                    true,
                )?;
                Ok(loss)
            },
            &tensors,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    bounded("max rel err", worst, 1e-4)
}

// ── algebraic identities ────────────────────────────────────────────

fn ema_decay() -> std::result::Result<String, String> {
    let mut nets = micro_nets(0);
    nets.online
        .proj
        .w
        .values_mut()
        .iter_mut()
        .for_each(|v| *v += 1.0);
    let gap0 = nets.target_gap();
    for _ in 0..100 {
        nets.ema_update(0.99).map_err(|e| e.to_string())?;
    }
    let expect = gap0 * 0.99f64.powi(100);
    let got = nets.target_gap();
    let rel = (got - expect).abs() / expect;
    bounded("rel err at n=100", rel, 1e-9)
}

fn telescoping() -> std::result::Result<String, String> {
    let cfg = GoalConfig::default();
    let mut r = rng::stream_rng(0, stream::GOALS);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let traj: Vec<Vec<f64>> = (0..51)
            .map(|_| (0..8).map(|_| rng::normal(&mut r)).collect())
            .collect();
        let goal: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
        let total: f64 = (0..50)
            .map(|t| goal_reward(&traj[t], &traj[t + 1], &goal, &cfg).unwrap())
            .sum();
        let expect = goal_distance(&traj[0], &goal).unwrap()
            - goal_distance(&traj[50], &goal).unwrap();
        worst = worst.max((total - expect).abs());
    }
    bounded("max telescoping error", worst, 1e-10)
}

fn spr_scale_invariance() -> std::result::Result<String, String> {
    let mut r = rng::stream_rng(1, stream::TRAIN);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let t = Tensor::uniform(&[3, 5], 1.0, &mut r);
        let c: f64 = r.gen_range(0.01..100.0);
        let mut tape = Tape::new();
        let ip = tape.leaf(&p);
        let it = tape.leaf(&t);
        let base = spr_loss(&mut tape, &[ip], &[it], ZeroNormPolicy::Error).unwrap();
        let scaled = tape.scale(ip, c).unwrap();
        let l2 = spr_loss(&mut tape, &[scaled], &[it], ZeroNormPolicy::Error).unwrap();
        worst = worst.max((tape.scalar_value(base) - tape.scalar_value(l2)).abs());
    }
    bounded("max invariance error", worst, 1e-9)
}

fn adam_zero_grad() -> std::result::Result<String, String> {
    struct One {
        w: Tensor,
    }
    impl ParamSet for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.w);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.w);
        }
    }
    let mut p = One {
        w: Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(),
    };
    p.w.accumulate_grad(&[0.0, 0.0, 0.0]);
    let before = p.w.clone();
    let mut state = AdamState::new(AdamConfig::default());
    let group = ParamGroup::new("all", 1.0, vec!["w".into()]).unwrap();
    state.step(&mut p, &[group]).map_err(|e| e.to_string())?;
    if p.w.values() == before.values() {
        Ok("parameters unchanged".into())
    } else {
        Err(format!("{:?} -> {:?}", before.values(), p.w.values()))
    }
}

fn cosine_range() -> std::result::Result<String, String> {
    let mut r = rng::stream_rng(2, stream::GOALS);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a = Tensor::uniform(&[7], 10.0, &mut r);
        let b = Tensor::uniform(&[7], 10.0, &mut r);
        let mut tape = Tape::new();
        let ia = tape.leaf(&a);
        let ib = tape.leaf(&b);
        let c = tape.cosine(ia, ib, ZeroNormPolicy::Error).unwrap();
        worst = worst.max(tape.scalar_value(c).abs() - 1.0);
    }
    bounded("max |cos|-1", worst, 1e-12)
}

// ── statistics oracles ──────────────────────────────────────────────

fn iqm_oracle() -> std::result::Result<String, String> {
    let mut r = rng::stream_rng(3, stream::BOOTSTRAP);
    for trial in 0..200 {
        let n = 1 + (trial % 12);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let got = aggregate(&v, Metric::Iqm).unwrap();
        // independent rank-counting oracle
        let trim = n / 4;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &x) in v.iter().enumerate() {
            let rank = v
                .iter()
                .enumerate()
                .filter(|(j, &y)| y < x || (y == x && *j < i))
                .count();
            if rank >= trim && rank < n - trim {
                sum += x;
                count += 1;
            }
        }
        let want = sum / count as f64;
        if (got - want).abs() > 1e-12 {
            return Err(format!("n={n}: {got} vs oracle {want}"));
        }
    }
    Ok("200 trials, n in 1..=12".into())
}

fn hns_reference() -> std::result::Result<String, String> {
    if hns(7127.7, 227.8, 7127.7).unwrap() != 1.0 || hns(227.8, 227.8, 7127.7).unwrap() != 0.0 {
        return Err("endpoint identity failed".into());
    }
    let alien = hns(1101.7, 227.8, 7127.7).unwrap();
    if (alien - 0.12665).abs() >= 1e-5 {
        return Err(format!("reference normalized score {alien} != 0.12665 +/- 1e-5"));
    }
    Ok(format!("reference hns {alien:.6}"))
}

fn bootstrap_determinism() -> std::result::Result<String, String> {
    let mut r = rng::stream_rng(4, stream::BOOTSTRAP);
    let v: Vec<f64> = (0..30).map(|_| r.gen_range(-1.0..1.0)).collect();
    let a = bootstrap_ci(&v, |x| aggregate(x, Metric::Iqm).unwrap(), 1000, 0.95, 11).unwrap();
    let b = bootstrap_ci(&v, |x| aggregate(x, Metric::Iqm).unwrap(), 1000, 0.95, 11).unwrap();
    if a != b {
        return Err("same seed produced different intervals".into());
    }
    if !(a.lower <= a.point && a.point <= a.upper) {
        return Err(format!("point {} outside [{}, {}]", a.point, a.lower, a.upper));
    }
    Ok(format!("[{:.4}, {:.4}] around {:.4}", a.lower, a.upper, a.point))
}

// ── distributions ───────────────────────────────────────────────────

fn geometric_distribution() -> std::result::Result<String, String> {
    let mut r = rng::stream_rng(5, stream::COLLECT);
    let n = 100_000usize;
    let mut counts = [0u64; 64];
    let mut total = 0u64;
    for _ in 0..n {
        let k = rng::geometric(&mut r, 1.0 / 3.0);
        total += k;
        counts[(k as usize).min(63)] += 1;
    }
    let mean = total as f64 / n as f64;
    if (mean - 3.0).abs() >= 0.05 {
        return Err(format!("mean {mean} != 3.0 +/- 0.05"));
    }
    let mut emp = 0.0;
    let mut ana = 0.0;
    let mut ks = 0.0f64;
    for k in 1..60 {
        emp += counts[k] as f64 / n as f64;
        ana += (2.0f64 / 3.0).powi(k as i32 - 1) / 3.0;
        ks = ks.max((emp - ana).abs());
    }
    if ks >= 0.01 {
        return Err(format!("KS distance {ks} >= 0.01"));
    }
    Ok(format!("mean {mean:.4}, KS {ks:.5}"))
}

/// Goal-sampler distribution measurement, shared with the acceptance
/// suite: permuted fraction, KS distance of the noise weights to
/// Uniform(0, 0.5), and the chi^2 statistic of offsets against uniform
/// {1..50}.
pub struct GoalSamplerStats {
    pub samples: usize,
    pub permuted_fraction: f64,
    pub alpha_ks: f64,
    pub offsets_chi2: f64,
}

pub fn measure_goal_sampler(total: usize, batch: usize, seed: u64) -> GoalSamplerStats {
    let nets = micro_nets(seed);
    let episode_len = 10_000usize;
    let data = micro_dataset(episode_len);
    let mut r = rng::stream_rng(seed, stream::GOALS);
    let mut permuted = 0usize;
    let mut alphas: Vec<f64> = Vec::with_capacity(total);
    let mut offset_counts = [0u64; 50];
    let mut done = 0usize;
    while done < total {
        let b = batch.min(total - done);
        // anchors with >= 51 future steps so offsets are never truncated
        let anchors: Vec<(usize, usize)> = (0..b)
            .map(|_| (0usize, r.gen_range(0..episode_len - 51)))
            .collect();
        let remaining: Vec<usize> = anchors.iter().map(|&(_, t)| episode_len - t).collect();
        let sb = SequenceBatch {
            depth: 1,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            anchors,
            remaining,
        };
        let goals = sample_goals(
            &nets,
            &data,
            &sb,
            &AugmentConfig::identity(),
            &GoalConfig::default(),
            &mut r,
        )
        .unwrap();
        permuted += goals.permuted.iter().filter(|&&p| p).count();
        alphas.extend_from_slice(&goals.noise_weights);
        for &j in &goals.offsets {
            offset_counts[j - 1] += 1;
        }
        done += b;
    }

    alphas.sort_by(f64::total_cmp);
    let n = alphas.len() as f64;
    let mut ks = 0.0f64;
    for (i, &a) in alphas.iter().enumerate() {
        let cdf = (a / 0.5).clamp(0.0, 1.0);
        ks = ks.max(((i + 1) as f64 / n - cdf).abs());
        ks = ks.max((cdf - i as f64 / n).abs());
    }

    let expected = total as f64 / 50.0;
    let chi2: f64 = offset_counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();

    GoalSamplerStats {
        samples: total,
        permuted_fraction: permuted as f64 / total as f64,
        alpha_ks: ks,
        offsets_chi2: chi2,
    }
}

fn goal_sampler_distribution() -> std::result::Result<String, String> {
    let s = measure_goal_sampler(100_000, 1000, 6);
    if (s.permuted_fraction - 0.2).abs() >= 0.01 {
        return Err(format!("permuted fraction {}", s.permuted_fraction));
    }
    if s.alpha_ks >= 0.01 {
        return Err(format!("alpha KS {}", s.alpha_ks));
    }
    if s.offsets_chi2 >= CHI2_99_DF49 {
        return Err(format!("offsets chi2 {} >= {CHI2_99_DF49}", s.offsets_chi2));
    }
    Ok(format!(
        "permuted {:.4}, alpha KS {:.5}, offsets chi2 {:.2}",
        s.permuted_fraction, s.alpha_ks, s.offsets_chi2
    ))
}

// ── environment ─────────────────────────────────────────────────────

fn env_determinism() -> std::result::Result<String, String> {
    let a = GridPixEnv::reset(3).observation();
    let b = GridPixEnv::reset(3).observation();
    if a != b {
        return Err("same seed produced different observations".into());
    }
    Ok("reset(3) twice gives identical observations".into())
}

fn env_bfs_return() -> std::result::Result<String, String> {
    let mut env = GridPixEnv::reset(0);
    let plan = env
        .layout()
        .plan(env.agent_pos())
        .ok_or("seed 0 should be solvable")?;
    let mut total = 0.0;
    for a in plan {
        total += env.step(a).map_err(|e| e.to_string())?.reward;
    }
    if total != 6.0 {
        return Err(format!("scripted shortest path returned {total}, wanted 6"));
    }
    Ok("shortest key-then-door path returns 6".into())
}

// ── artifact round-trips ────────────────────────────────────────────

fn tmp_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("sgi-verify-{}", std::process::id()));
    let _ = std::fs::create_dir_all(&dir);
    dir
}

fn dataset_roundtrip() -> std::result::Result<String, String> {
    let dir = tmp_dir();
    let d = collect_random(1, 200, 2, StartMode::Fixed).map_err(|e| e.to_string())?;
    let p1 = dir.join("verify-a.sgid");
    let p2 = dir.join("verify-b.sgid");
    crate::formats::write_dataset(&p1, &d, "verify").map_err(|e| e.to_string())?;
    let (d2, _) = crate::formats::read_dataset(&p1).map_err(|e| e.to_string())?;
    if d != d2 {
        return Err("decoded dataset differs".into());
    }
    crate::formats::write_dataset(&p2, &d2, "verify").map_err(|e| e.to_string())?;
    let h1 = crate::formats::file_sha256(&p1).map_err(|e| e.to_string())?;
    let h2 = crate::formats::file_sha256(&p2).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&p1);
    let _ = std::fs::remove_file(&p2);
    if h1 != h2 {
        return Err("re-encoded bytes differ".into());
    }
    Ok(format!("sha256 {}", &h1[..12]))
}

fn checkpoint_roundtrip() -> std::result::Result<String, String> {
    let dir = tmp_dir();
    let ckpt = AgentCheckpoint {
        nets: micro_nets(7),
        provenance: Provenance {
            pretrained: false,
            objectives: String::new(),
            dataset_id: String::new(),
            config_fingerprint: "verify".into(),
            seed: 7,
        },
    };
    let p = dir.join("verify.sgic");
    crate::formats::write_checkpoint(&p, &ckpt).map_err(|e| e.to_string())?;
    let loaded = crate::formats::read_checkpoint(&p).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_file(&p);
    if loaded.nets != ckpt.nets {
        return Err("decoded parameters differ".into());
    }
    Ok("parameters reproduced bit-exactly".into())
}

fn pretrain_reproducibility() -> std::result::Result<String, String> {
    let data = micro_dataset(40);
    let cfg = sgi_core::agent::PretrainConfig {
        steps: Some(3),
        batch_size: 4,
        depth: 2,
        log_every: 1,
        seed: 5,
        ..sgi_core::agent::PretrainConfig::default()
    };
    let spec = EncoderSpec::micro(1, 6, 5);
    let a = agent::pretrain_with_spec(&data, spec.clone(), &cfg).map_err(|e| e.to_string())?;
    let b = agent::pretrain_with_spec(&data, spec, &cfg).map_err(|e| e.to_string())?;
    if a.checkpoint != b.checkpoint {
        return Err("identical configs produced different checkpoints".into());
    }
    Ok("double run produced identical parameters".into())
}

// ── suite ───────────────────────────────────────────────────────────

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let seeds = 5;
    vec![
        check("grad.affine", grad_affine(seeds)),
        check("grad.conv2d", grad_conv(seeds)),
        check("grad.cosine", grad_cosine(seeds, opts.flip_cosine_gradient_sign)),
        check("grad.softmax_ce", grad_softmax_ce(seeds)),
        check("grad.layer_norm", grad_layer_norm(seeds)),
        check("grad.film_modulate", grad_film(seeds)),
        check("grad.dqn_loss", grad_dqn(2)),
        check("grad.pretrain_full", grad_pretrain_full(1)),
        check("algebra.ema_decay", ema_decay()),
        check("algebra.goal_telescoping", telescoping()),
        check("algebra.spr_scale_invariance", spr_scale_invariance()),
        check("algebra.adam_zero_grad", adam_zero_grad()),
        check("algebra.cosine_range", cosine_range()),
        check("stats.iqm_oracle", iqm_oracle()),
        check("stats.hns_reference", hns_reference()),
        check("stats.bootstrap_determinism", bootstrap_determinism()),
        check("dist.geometric", geometric_distribution()),
        check("dist.goal_sampler", goal_sampler_distribution()),
        check("env.determinism", env_determinism()),
        check("env.bfs_return", env_bfs_return()),
        check("data.dataset_roundtrip", dataset_roundtrip()),
        check("data.checkpoint_roundtrip", checkpoint_roundtrip()),
        check("repro.pretrain", pretrain_reproducibility()),
    ]
}

/// Print one line per check; returns true when everything passed.
pub fn print_table(outcomes: &[CheckOutcome]) -> bool {
    let mut ok = true;
    for o in outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<28} {}", o.name, o.detail);
        ok &= o.passed;
    }
    println!(
        "{} of {} checks passed",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len()
    );
    ok
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let outcomes = run_all(&VerifyOptions::default());
        for o in &outcomes {
            assert!(o.passed, "{} failed: {}", o.name, o.detail);
        }
    }

    #[test]
    fn injected_cosine_sign_flip_is_caught_by_name() {
        let outcomes = run_all(&VerifyOptions {
            flip_cosine_gradient_sign: true,
        });
        let cosine = outcomes.iter().find(|o| o.name == "grad.cosine").unwrap();
        assert!(!cosine.passed, "sabotaged gradient slipped through");
        // and only that check fails
        for o in &outcomes {
            if o.name != "grad.cosine" {
                assert!(o.passed, "{} unexpectedly failed: {}", o.name, o.detail);
            }
        }
    }
}
