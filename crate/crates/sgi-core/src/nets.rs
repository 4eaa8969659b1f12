//! Network stack: convolutional encoder, latent transition model,
//! projection/predictor pair, inverse-dynamics MLP, FiLM generator and the
//! goal-conditioned / task Q-heads, plus EMA maintenance of the target
//! copies.
//!
//! All forward passes run on a [`Tape`]; a [`GraphNets`] binding leafs each
//! parameter once per tape so gradients accumulate in one place. Target
//! parameters are always bound without gradient tracking.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::optim::ParamSet;
use crate::rng::{self, stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture description. The flattened encoder output dimension is the
/// goal dimension used everywhere (goals live in latent space).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub convs: Vec<ConvLayerSpec>,
    /// Projection dimension for p_o / p_m (and the linear predictor q).
    pub proj_dim: usize,
    /// Hidden width of the latent transition model.
    pub dynamics_hidden: usize,
    /// Hidden width of the two-layer inverse-dynamics MLP.
    pub inverse_hidden: usize,
    /// Q-head hidden width; also the FiLM channel count being modulated.
    pub head_hidden: usize,
    /// Channel count of the two FiLM-generator convolutions.
    pub film_channels: usize,
    pub num_actions: usize,
}

impl EncoderSpec {
    /// Default desk-scale encoder for 40x40, 4-frame observations:
    /// conv(16,k5,s2) conv(32,k5,s2) conv(32,k3,s1) -> [32,5,5], D_z = 800.
    pub fn default_pixel() -> EncoderSpec {
        EncoderSpec {
            in_channels: 4,
            in_height: 40,
            in_width: 40,
            convs: vec![
                ConvLayerSpec { channels: 16, kernel: 5, stride: 2 },
                ConvLayerSpec { channels: 32, kernel: 5, stride: 2 },
                ConvLayerSpec { channels: 32, kernel: 3, stride: 1 },
            ],
            proj_dim: 128,
            dynamics_hidden: 128,
            inverse_hidden: 128,
            head_hidden: 128,
            film_channels: 32,
            num_actions: 5,
        }
    }

    /// Smaller encoder for time-bounded experiment runs on the same
    /// observations: conv(8,k8,s4) conv(16,k5,s2) -> [16,3,3], D_z = 144.
    pub fn small_pixel() -> EncoderSpec {
        EncoderSpec {
            in_channels: 4,
            in_height: 40,
            in_width: 40,
            convs: vec![
                ConvLayerSpec { channels: 8, kernel: 8, stride: 4 },
                ConvLayerSpec { channels: 16, kernel: 5, stride: 2 },
            ],
            proj_dim: 64,
            dynamics_hidden: 64,
            inverse_hidden: 64,
            head_hidden: 64,
            film_channels: 16,
            num_actions: 5,
        }
    }

    /// Micro spec for gradient checks and distribution tests.
    pub fn micro(in_channels: usize, side: usize, num_actions: usize) -> EncoderSpec {
        EncoderSpec {
            in_channels,
            in_height: side,
            in_width: side,
            convs: vec![
                ConvLayerSpec { channels: 3, kernel: 3, stride: 2 },
                ConvLayerSpec { channels: 4, kernel: 2, stride: 1 },
            ],
            proj_dim: 6,
            dynamics_hidden: 8,
            inverse_hidden: 8,
            head_hidden: 6,
            film_channels: 3,
            num_actions,
        }
    }

    /// Spatial shape `[C,H,W]` of the encoder output.
    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        let (mut c, mut h, mut w) = (self.in_channels, self.in_height, self.in_width);
        for (i, l) in self.convs.iter().enumerate() {
            if l.kernel > h || l.kernel > w {
                return Err(CoreError::dim(format!(
                    "conv {i}: kernel {} exceeds input {h}x{w}",
                    l.kernel
                )));
            }
            if l.stride == 0 || l.channels == 0 {
                return Err(CoreError::argument(format!("conv {i}: zero stride or channels")));
            }
            h = (h - l.kernel) / l.stride + 1;
            w = (w - l.kernel) / l.stride + 1;
            c = l.channels;
        }
        Ok([c, h, w])
    }

    /// Flattened latent dimension D_z (== goal dimension).
    pub fn latent_dim(&self) -> Result<usize> {
        let [c, h, w] = self.latent_shape()?;
        Ok(c * h * w)
    }

    /// Kernel sizes of the two FiLM-generator convs, clamped so they fit the
    /// latent grid.
    fn film_kernels(&self) -> Result<[usize; 2]> {
        let [_, h, w] = self.latent_shape()?;
        let k1 = 3.min(h).min(w);
        let (h1, w1) = (h - k1 + 1, w - k1 + 1);
        let k2 = 3.min(h1).min(w1);
        Ok([k1, k2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor, // [O, C, k, k]
    pub b: Tensor, // [O]
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor, // [I, O]
    pub b: Tensor, // [O]
}

impl Linear {
    fn init(name: &str, inp: usize, out: usize, seed: u64) -> Linear {
        let mut r = rng::stream_rng(rng::derive(seed, rng::name_tag(name)), stream::INIT);
        let bound = libm::sqrt(6.0 / inp as f64);
        Linear {
            w: Tensor::uniform(&[inp, out], bound, &mut r),
            b: Tensor::uniform(&[out], 1.0 / libm::sqrt(inp as f64), &mut r),
        }
    }
}

impl ConvLayer {
    fn init(name: &str, inp: usize, out: usize, kernel: usize, stride: usize, seed: u64) -> ConvLayer {
        let mut r = rng::stream_rng(rng::derive(seed, rng::name_tag(name)), stream::INIT);
        let fan_in = inp * kernel * kernel;
        let bound = libm::sqrt(6.0 / fan_in as f64);
        ConvLayer {
            w: Tensor::uniform(&[out, inp, kernel, kernel], bound, &mut r),
            b: Tensor::uniform(&[out], 1.0 / libm::sqrt(fan_in as f64), &mut r),
            stride,
        }
    }
}

/// Online parameters: encoder f_o, projection p_o, predictor q, transition
/// model h, inverse MLP, FiLM generator, goal and task Q-heads, and the
/// behavioral-cloning head.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineParams {
    pub encoder: Vec<ConvLayer>,
    pub proj: Linear,
    pub pred: Linear,
    pub dynamics: [Linear; 2],
    pub inverse: [Linear; 2],
    pub film_convs: [ConvLayer; 2],
    pub film_out: Linear,
    pub goal_q: [Linear; 2],
    pub task_q: [Linear; 2],
    pub bc: Linear,
}

/// EMA targets: encoder f_m, projection p_m, target task-Q head and the
/// target goal-Q head (with its FiLM generator). Never updated by gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetParams {
    pub encoder: Vec<ConvLayer>,
    pub proj: Linear,
    pub task_q: [Linear; 2],
    pub goal_q: [Linear; 2],
    pub film_convs: [ConvLayer; 2],
    pub film_out: Linear,
}

fn visit_conv<'a>(name: String, l: &'a ConvLayer, f: &mut dyn FnMut(&str, &'a Tensor)) {
    f(&format!("{name}.w"), &l.w);
    f(&format!("{name}.b"), &l.b);
}

fn visit_conv_mut<'a>(name: String, l: &'a mut ConvLayer, f: &mut dyn FnMut(&str, &'a mut Tensor)) {
    f(&format!("{name}.w"), &mut l.w);
    f(&format!("{name}.b"), &mut l.b);
}

fn visit_lin<'a>(name: String, l: &'a Linear, f: &mut dyn FnMut(&str, &'a Tensor)) {
    f(&format!("{name}.w"), &l.w);
    f(&format!("{name}.b"), &l.b);
}

fn visit_lin_mut<'a>(name: String, l: &'a mut Linear, f: &mut dyn FnMut(&str, &'a mut Tensor)) {
    f(&format!("{name}.w"), &mut l.w);
    f(&format!("{name}.b"), &mut l.b);
}

impl ParamSet for OnlineParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.encoder.iter().enumerate() {
            visit_conv(format!("encoder.{i}"), l, f);
        }
        visit_lin(String::from("proj"), &self.proj, f);
        visit_lin(String::from("pred"), &self.pred, f);
        for (i, l) in self.dynamics.iter().enumerate() {
            visit_lin(format!("dynamics.{i}"), l, f);
        }
        for (i, l) in self.inverse.iter().enumerate() {
            visit_lin(format!("inverse.{i}"), l, f);
        }
        for (i, l) in self.film_convs.iter().enumerate() {
            visit_conv(format!("film.conv{i}"), l, f);
        }
        visit_lin(String::from("film.out"), &self.film_out, f);
        for (i, l) in self.goal_q.iter().enumerate() {
            visit_lin(format!("goal_q.{i}"), l, f);
        }
        for (i, l) in self.task_q.iter().enumerate() {
            visit_lin(format!("task_q.{i}"), l, f);
        }
        visit_lin(String::from("bc"), &self.bc, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.encoder.iter_mut().enumerate() {
            visit_conv_mut(format!("encoder.{i}"), l, f);
        }
        visit_lin_mut(String::from("proj"), &mut self.proj, f);
        visit_lin_mut(String::from("pred"), &mut self.pred, f);
        for (i, l) in self.dynamics.iter_mut().enumerate() {
            visit_lin_mut(format!("dynamics.{i}"), l, f);
        }
        for (i, l) in self.inverse.iter_mut().enumerate() {
            visit_lin_mut(format!("inverse.{i}"), l, f);
        }
        for (i, l) in self.film_convs.iter_mut().enumerate() {
            visit_conv_mut(format!("film.conv{i}"), l, f);
        }
        visit_lin_mut(String::from("film.out"), &mut self.film_out, f);
        for (i, l) in self.goal_q.iter_mut().enumerate() {
            visit_lin_mut(format!("goal_q.{i}"), l, f);
        }
        for (i, l) in self.task_q.iter_mut().enumerate() {
            visit_lin_mut(format!("task_q.{i}"), l, f);
        }
        visit_lin_mut(String::from("bc"), &mut self.bc, f);
    }
}

impl TargetParams {
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.encoder.iter().enumerate() {
            visit_conv(format!("target.encoder.{i}"), l, f);
        }
        visit_lin(String::from("target.proj"), &self.proj, f);
        for (i, l) in self.task_q.iter().enumerate() {
            visit_lin(format!("target.task_q.{i}"), l, f);
        }
        for (i, l) in self.goal_q.iter().enumerate() {
            visit_lin(format!("target.goal_q.{i}"), l, f);
        }
        for (i, l) in self.film_convs.iter().enumerate() {
            visit_conv(format!("target.film.conv{i}"), l, f);
        }
        visit_lin(String::from("target.film.out"), &self.film_out, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.encoder.iter_mut().enumerate() {
            visit_conv_mut(format!("target.encoder.{i}"), l, f);
        }
        visit_lin_mut(String::from("target.proj"), &mut self.proj, f);
        for (i, l) in self.task_q.iter_mut().enumerate() {
            visit_lin_mut(format!("target.task_q.{i}"), l, f);
        }
        for (i, l) in self.goal_q.iter_mut().enumerate() {
            visit_lin_mut(format!("target.goal_q.{i}"), l, f);
        }
        for (i, l) in self.film_convs.iter_mut().enumerate() {
            visit_conv_mut(format!("target.film.conv{i}"), l, f);
        }
        visit_lin_mut(String::from("target.film.out"), &mut self.film_out, f);
    }
}

/// Complete parameter set for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub spec: EncoderSpec,
    pub online: OnlineParams,
    pub target: TargetParams,
}

impl AgentNets {
    /// Seeded initialization. Target copies start equal to the online side.
    pub fn init(spec: EncoderSpec, seed: u64) -> Result<AgentNets> {
        let dz = spec.latent_dim()?;
        let [c, h, w] = spec.latent_shape()?;
        let a = spec.num_actions;
        if a == 0 {
            return Err(CoreError::argument("num_actions must be >= 1"));
        }

        let mut encoder = Vec::new();
        let mut in_ch = spec.in_channels;
        for (i, l) in spec.convs.iter().enumerate() {
            encoder.push(ConvLayer::init(
                &format!("encoder.{i}"),
                in_ch,
                l.channels,
                l.kernel,
                l.stride,
                seed,
            ));
            in_ch = l.channels;
        }

        let [k1, k2] = spec.film_kernels()?;
        let (h1, w1) = (h - k1 + 1, w - k1 + 1);
        let (h2, w2) = (h1 - k2 + 1, w1 - k2 + 1);
        let film_flat = spec.film_channels * h2 * w2;

        let online = OnlineParams {
            encoder,
            proj: Linear::init("proj", dz, spec.proj_dim, seed),
            pred: Linear::init("pred", spec.proj_dim, spec.proj_dim, seed),
            dynamics: [
                Linear::init("dynamics.0", dz + a, spec.dynamics_hidden, seed),
                Linear::init("dynamics.1", spec.dynamics_hidden, dz, seed),
            ],
            inverse: [
                Linear::init("inverse.0", 2 * spec.proj_dim, spec.inverse_hidden, seed),
                Linear::init("inverse.1", spec.inverse_hidden, a, seed),
            ],
            film_convs: [
                ConvLayer::init("film.conv0", c, spec.film_channels, k1, 1, seed),
                ConvLayer::init("film.conv1", spec.film_channels, spec.film_channels, k2, 1, seed),
            ],
            film_out: Linear::init("film.out", film_flat, 2 * spec.head_hidden, seed),
            goal_q: [
                Linear::init("goal_q.0", dz, spec.head_hidden, seed),
                Linear::init("goal_q.1", spec.head_hidden, a, seed),
            ],
            task_q: [
                Linear::init("task_q.0", dz, spec.head_hidden, seed),
                Linear::init("task_q.1", spec.head_hidden, a, seed),
            ],
            bc: Linear::init("bc", dz, a, seed),
        };
        let target = TargetParams {
            encoder: online.encoder.clone(),
            proj: online.proj.clone(),
            task_q: online.task_q.clone(),
            goal_q: online.goal_q.clone(),
            film_convs: online.film_convs.clone(),
            film_out: online.film_out.clone(),
        };
        Ok(AgentNets { spec, online, target })
    }

    /// EMA step: every target tensor becomes `tau * target + (1-tau) * online`.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(CoreError::argument(format!("tau must be in [0,1], got {tau}")));
        }
        fn blend(t: &mut Tensor, o: &Tensor, tau: f64) -> Result<()> {
            if t.shape() != o.shape() {
                return Err(CoreError::contract("ema_update: shape mismatch"));
            }
            for (tv, ov) in t.values_mut().iter_mut().zip(o.values()) {
                *tv = tau * *tv + (1.0 - tau) * ov;
            }
            Ok(())
        }
        for (t, o) in self.target.encoder.iter_mut().zip(&self.online.encoder) {
            blend(&mut t.w, &o.w, tau)?;
            blend(&mut t.b, &o.b, tau)?;
        }
        blend(&mut self.target.proj.w, &self.online.proj.w, tau)?;
        blend(&mut self.target.proj.b, &self.online.proj.b, tau)?;
        for i in 0..2 {
            blend(&mut self.target.task_q[i].w, &self.online.task_q[i].w, tau)?;
            blend(&mut self.target.task_q[i].b, &self.online.task_q[i].b, tau)?;
            blend(&mut self.target.goal_q[i].w, &self.online.goal_q[i].w, tau)?;
            blend(&mut self.target.goal_q[i].b, &self.online.goal_q[i].b, tau)?;
            blend(&mut self.target.film_convs[i].w, &self.online.film_convs[i].w, tau)?;
            blend(&mut self.target.film_convs[i].b, &self.online.film_convs[i].b, tau)?;
        }
        blend(&mut self.target.film_out.w, &self.online.film_out.w, tau)?;
        blend(&mut self.target.film_out.b, &self.online.film_out.b, tau)?;
        Ok(())
    }

    /// Hard copy of the online weights into the target copies (tau = 0).
    pub fn copy_online_to_target(&mut self) {
        self.ema_update(0.0).unwrap();
    }

    /// L2 distance between online and target encoder+projection weights.
    pub fn target_gap(&self) -> f64 {
        let mut total = 0.0;
        for (t, o) in self.target.encoder.iter().zip(&self.online.encoder) {
            total += sq_dist(&t.w, &o.w) + sq_dist(&t.b, &o.b);
        }
        total += sq_dist(&self.target.proj.w, &self.online.proj.w);
        total += sq_dist(&self.target.proj.b, &self.online.proj.b);
        libm::sqrt(total)
    }
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

// ── tape-bound forward passes ───────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Online,
    Target,
}

/// Per-tape parameter binding: each parameter is leafed exactly once, so
/// gradient contributions from every use accumulate on a single node.
pub struct GraphNets {
    pub spec: EncoderSpec,
    ids: BTreeMap<String, NodeId>,
}

impl GraphNets {
    /// Bind all parameters. `track` decides per online-parameter name
    /// whether gradients are recorded; target parameters never track.
    pub fn bind(nets: &AgentNets, tape: &mut Tape, track: &dyn Fn(&str) -> bool) -> GraphNets {
        let mut ids = BTreeMap::new();
        nets.online.visit(&mut |name, t| {
            let mut t = t.clone();
            t.requires_grad = track(name);
            ids.insert(String::from(name), tape.leaf(&t));
        });
        nets.target.visit(&mut |name, t| {
            let mut t = t.clone();
            t.requires_grad = false;
            ids.insert(String::from(name), tape.leaf(&t));
        });
        GraphNets {
            spec: nets.spec.clone(),
            ids,
        }
    }

    /// Bind with gradients tracked for every online parameter.
    pub fn bind_all(nets: &AgentNets, tape: &mut Tape) -> GraphNets {
        Self::bind(nets, tape, &|_| true)
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Point a parameter name at a different tape node. Used by gradient
    /// checks to substitute probe leaves for bound parameters.
    pub fn override_node(&mut self, name: &str, id: NodeId) {
        self.ids.insert(String::from(name), id);
    }

    /// Copy accumulated gradients from the tape back into the parameter
    /// tensors (adds to whatever is already there).
    pub fn harvest_grads(&self, tape: &Tape, params: &mut OnlineParams) {
        params.visit_mut(&mut |name, t| {
            if let Some(g) = tape.grad(self.node(name)) {
                t.accumulate_grad(g);
            }
        });
    }

    fn prefix(side: Side) -> &'static str {
        match side {
            Side::Online => "",
            Side::Target => "target.",
        }
    }

    /// Encoder forward: conv/ReLU stack flattened to `[B, D_z]`.
    pub fn encode(&self, tape: &mut Tape, obs: NodeId, side: Side) -> Result<NodeId> {
        let p = Self::prefix(side);
        let mut x = obs;
        for i in 0..self.spec.convs.len() {
            let w = self.node(&format!("{p}encoder.{i}.w"));
            let b = self.node(&format!("{p}encoder.{i}.b"));
            x = tape.conv2d(x, w, b, self.spec.convs[i].stride)?;
            x = tape.relu(x)?;
        }
        let batch = tape.shape(x)[0];
        let dz: usize = tape.shape(x)[1..].iter().product();
        tape.reshape(x, &[batch, dz])
    }

    /// Projection p (online or target): a linear map to `proj_dim`.
    pub fn project(&self, tape: &mut Tape, z: NodeId, side: Side) -> Result<NodeId> {
        let p = Self::prefix(side);
        let w = self.node(&format!("{p}proj.w"));
        let b = self.node(&format!("{p}proj.b"));
        tape.affine(z, w, b)
    }

    /// Linear predictor q translating online projections to target space.
    pub fn predict(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        tape.affine(y, self.node("pred.w"), self.node("pred.b"))
    }

    /// One transition-model application: `h(z, a) -> z'`.
    pub fn transition(&self, tape: &mut Tape, z: NodeId, actions: &[usize]) -> Result<NodeId> {
        let batch = tape.shape(z)[0];
        if actions.len() != batch {
            return Err(CoreError::dim(format!(
                "transition: {batch} latents vs {} actions",
                actions.len()
            )));
        }
        let onehot = self.action_onehot(tape, actions)?;
        let za = tape.concat_cols(z, onehot)?;
        let h = tape.affine(za, self.node("dynamics.0.w"), self.node("dynamics.0.b"))?;
        let h = tape.relu(h)?;
        tape.affine(h, self.node("dynamics.1.w"), self.node("dynamics.1.b"))
    }

    /// Recursive latent rollout: returns z-hat at t+1..t+K.
    pub fn rollout(&self, tape: &mut Tape, z_t: NodeId, actions: &[Vec<usize>]) -> Result<Vec<NodeId>> {
        if actions.is_empty() {
            return Err(CoreError::argument("rollout needs at least one step"));
        }
        let mut out = Vec::with_capacity(actions.len());
        let mut z = z_t;
        for step in actions {
            z = self.transition(tape, z, step)?;
            out.push(z);
        }
        Ok(out)
    }

    /// Inverse-dynamics logits from concat(online projection at k, target
    /// projection at k+1).
    pub fn inverse_logits(&self, tape: &mut Tape, y_k: NodeId, y_next: NodeId) -> Result<NodeId> {
        let cat = tape.concat_cols(y_k, y_next)?;
        let h = tape.affine(cat, self.node("inverse.0.w"), self.node("inverse.0.b"))?;
        let h = tape.relu(h)?;
        tape.affine(h, self.node("inverse.1.w"), self.node("inverse.1.b"))
    }

    /// FiLM generator: goal vectors `[B, D_z]` reshaped to the latent grid,
    /// two convs, flatten, linear to (gamma, beta), each `[B, head_hidden]`.
    pub fn film_generator(
        &self,
        tape: &mut Tape,
        goals: NodeId,
        side: Side,
    ) -> Result<(NodeId, NodeId)> {
        let p = Self::prefix(side);
        let [c, h, w] = self.spec.latent_shape()?;
        let shape = tape.shape(goals);
        if shape.len() != 2 || shape[1] != c * h * w {
            return Err(CoreError::dim(format!(
                "film_generator: goals {shape:?} vs latent dim {}",
                c * h * w
            )));
        }
        let batch = shape[0];
        let mut x = tape.reshape(goals, &[batch, c, h, w])?;
        for i in 0..2 {
            let wt = self.node(&format!("{p}film.conv{i}.w"));
            let bt = self.node(&format!("{p}film.conv{i}.b"));
            x = tape.conv2d(x, wt, bt, 1)?;
            x = tape.relu(x)?;
        }
        let flat: usize = tape.shape(x)[1..].iter().product();
        let x = tape.reshape(x, &[batch, flat])?;
        let gb = tape.affine(x, self.node(&format!("{p}film.out.w")), self.node(&format!("{p}film.out.b")))?;
        let hh = self.spec.head_hidden;
        let gamma = split_cols(tape, gb, 0, hh)?;
        let beta = split_cols(tape, gb, hh, hh)?;
        Ok((gamma, beta))
    }

    /// Q-values over encoded features. With a goal, FiLM modulation is
    /// applied after the first layer of the head (standardize, then
    /// gamma * x + beta); without, the plain task head runs.
    pub fn q_values(
        &self,
        tape: &mut Tape,
        z: NodeId,
        goal_mod: Option<(NodeId, NodeId)>,
        side: Side,
    ) -> Result<NodeId> {
        let p = Self::prefix(side);
        match goal_mod {
            None => {
                let h = tape.affine(z, self.node(&format!("{p}task_q.0.w")), self.node(&format!("{p}task_q.0.b")))?;
                let h = tape.relu(h)?;
                tape.affine(h, self.node(&format!("{p}task_q.1.w")), self.node(&format!("{p}task_q.1.b")))
            }
            Some((gamma, beta)) => {
                let h = tape.affine(z, self.node(&format!("{p}goal_q.0.w")), self.node(&format!("{p}goal_q.0.b")))?;
                let h = tape.relu(h)?;
                let m = film_modulate(tape, h, gamma, beta)?;
                tape.affine(m, self.node(&format!("{p}goal_q.1.w")), self.node(&format!("{p}goal_q.1.b")))
            }
        }
    }

    /// Behavioral-cloning policy logits (linear over latents).
    pub fn bc_logits(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        tape.affine(z, self.node("bc.w"), self.node("bc.b"))
    }

    /// One-hot encode a batch of actions as a constant.
    pub fn action_onehot(&self, tape: &mut Tape, actions: &[usize]) -> Result<NodeId> {
        let a = self.spec.num_actions;
        let mut v = vec![0.0; actions.len() * a];
        for (i, &act) in actions.iter().enumerate() {
            if act >= a {
                return Err(CoreError::index(format!("action {act} out of range 0..{a}")));
            }
            v[i * a + act] = 1.0;
        }
        tape.constant(&[actions.len(), a], v)
    }
}

/// Column slice `[B, offset..offset+len]` as a differentiable op
/// (implemented with a constant selection matrix).
fn split_cols(tape: &mut Tape, x: NodeId, offset: usize, len: usize) -> Result<NodeId> {
    let cols = tape.shape(x)[1];
    let mut sel = vec![0.0; cols * len];
    for j in 0..len {
        sel[(offset + j) * len + j] = 1.0;
    }
    let sel = tape.constant(&[cols, len], sel)?;
    tape.matmul(x, sel)
}

/// FiLM modulation over standardized features: `gamma * xhat + beta`,
/// with per-sample gamma/beta of the same shape as the features.
pub fn film_modulate(tape: &mut Tape, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let xhat = tape.standardize(x)?;
    let scaled = tape.mul(xhat, gamma)?;
    tape.add(scaled, beta)
}

/// Plain layer norm: standardize then apply a learned per-channel affine.
pub fn layer_norm(tape: &mut Tape, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
    let xhat = tape.standardize(x)?;
    let scaled = tape.mul_row(xhat, scale)?;
    tape.add_bias(scaled, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_multi;
    use crate::rng::{stream, stream_rng};
    use crate::tape::ZeroNormPolicy;

    fn micro_nets(seed: u64) -> AgentNets {
        AgentNets::init(EncoderSpec::micro(2, 7, 5), seed).unwrap()
    }

    #[test]
    fn default_spec_latent_dims() {
        let spec = EncoderSpec::default_pixel();
        assert_eq!(spec.latent_shape().unwrap(), [32, 5, 5]);
        assert_eq!(spec.latent_dim().unwrap(), 800);
        let small = EncoderSpec::small_pixel();
        assert_eq!(small.latent_shape().unwrap(), [16, 3, 3]);
        assert_eq!(small.latent_dim().unwrap(), 144);
    }

    #[test]
    fn zero_image_zero_biases_encode_to_zero() {
        let mut nets = micro_nets(0);
        for l in nets.online.encoder.iter_mut() {
            l.b = Tensor::zeros(l.b.shape());
        }
        let mut tape = Tape::new();
        let g = GraphNets::bind_all(&nets, &mut tape);
        let obs = tape.constant(&[2, 2, 7, 7], alloc::vec![0.0; 2 * 2 * 49]).unwrap();
        let z = g.encode(&mut tape, obs, Side::Online).unwrap();
        assert!(tape.values(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_sides_differ_after_perturbation() {
        let mut nets = micro_nets(1);
        let mut rng = stream_rng(9, stream::TRAIN);
        let obs = Tensor::uniform(&[1, 2, 7, 7], 0.5, &mut rng);

        let run = |nets: &AgentNets, side: Side| {
            let mut tape = Tape::new();
            let g = GraphNets::bind_all(nets, &mut tape);
            let o = tape.leaf(&obs);
            let z = g.encode(&mut tape, o, side).unwrap();
            tape.values(z).to_vec()
        };
        assert_eq!(run(&nets, Side::Online), run(&nets, Side::Online));
        // target starts as an exact copy
        assert_eq!(run(&nets, Side::Online), run(&nets, Side::Target));
        // after perturbing one online weight they diverge
        nets.online.encoder[0].w.values_mut()[0] += 0.37;
        assert_ne!(run(&nets, Side::Online), run(&nets, Side::Target));
    }

    #[test]
    fn rollout_with_identity_dynamics_is_fixed_point() {
        // Identity stub: dynamics.0 passes z through (ReLU-safe since
        // encoder outputs are ReLU outputs), dynamics.1 is the identity.
        let spec = EncoderSpec {
            dynamics_hidden: 16, // == latent_dim of micro(2,7,5)
            ..EncoderSpec::micro(2, 7, 5)
        };
        let dz = spec.latent_dim().unwrap();
        assert_eq!(spec.dynamics_hidden, dz);
        let mut nets = AgentNets::init(spec, 3).unwrap();
        let a = nets.spec.num_actions;
        let mut w0 = alloc::vec![0.0; (dz + a) * dz];
        for i in 0..dz {
            w0[i * dz + i] = 1.0;
        }
        nets.online.dynamics[0].w = Tensor::new(&[dz + a, dz], w0).unwrap();
        nets.online.dynamics[0].b = Tensor::zeros(&[dz]);
        let mut w1 = alloc::vec![0.0; dz * dz];
        for i in 0..dz {
            w1[i * dz + i] = 1.0;
        }
        nets.online.dynamics[1].w = Tensor::new(&[dz, dz], w1).unwrap();
        nets.online.dynamics[1].b = Tensor::zeros(&[dz]);

        let mut rng = stream_rng(4, stream::TRAIN);
        let obs = Tensor::uniform(&[3, 2, 7, 7], 0.5, &mut rng);
        let mut tape = Tape::new();
        let g = GraphNets::bind_all(&nets, &mut tape);
        let o = tape.leaf(&obs);
        let z = g.encode(&mut tape, o, Side::Online).unwrap();
        let states = g
            .rollout(&mut tape, z, &[alloc::vec![0; 3], alloc::vec![1; 3], alloc::vec![2; 3]])
            .unwrap();
        for s in &states {
            assert_eq!(tape.values(*s), tape.values(z));
        }
        // K=1 equals a single application of the transition model
        let single = g.transition(&mut tape, z, &[0, 0, 0]).unwrap();
        let k1 = g.rollout(&mut tape, z, &[alloc::vec![0; 3]]).unwrap();
        assert_eq!(tape.values(k1[0]), tape.values(single));
    }

    #[test]
    fn rollout_gradient_flows_through_all_steps() {
        let nets = micro_nets(5);
        let mut rng = stream_rng(6, stream::TRAIN);
        let obs = Tensor::uniform(&[1, 2, 7, 7], 0.5, &mut rng);
        let actions = [alloc::vec![0], alloc::vec![3], alloc::vec![1]];
        // gradient w.r.t. the first dynamics weight through a K=3 rollout
        let w0 = nets.online.dynamics[0].w.clone();
        let err = grad_check_multi(
            |tape, ids| {
                let mut g = GraphNets::bind_all(&nets, tape);
                g.override_node("dynamics.0.w", ids[0]);
                let o = tape.constant(&[1, 2, 7, 7], obs.values().to_vec())?;
                let z = g.encode(tape, o, Side::Online)?;
                let states = g.rollout(tape, z, &actions)?;
                let mut total = tape.sum_all(states[0])?;
                for s in &states[1..] {
                    let s = tape.sum_all(*s)?;
                    total = tape.add(total, s)?;
                }
                Ok(total)
            },
            &[w0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn project_predict_contract() {
        let nets = micro_nets(7);
        let mut rng = stream_rng(8, stream::TRAIN);
        let obs = Tensor::uniform(&[2, 2, 7, 7], 0.5, &mut rng);
        let mut tape = Tape::new();
        let g = GraphNets::bind_all(&nets, &mut tape);
        let o = tape.leaf(&obs);
        let z = g.encode(&mut tape, o, Side::Online).unwrap();
        let y = g.project(&mut tape, z, Side::Online).unwrap();
        assert_eq!(tape.shape(y), &[2, nets.spec.proj_dim]);

        // target-side output carries no gradient back to the encoder
        let zt = g.encode(&mut tape, o, Side::Target).unwrap();
        let yt = g.project(&mut tape, zt, Side::Target).unwrap();
        let s = tape.sum_all(yt).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(g.node("target.encoder.0.w")).is_none());
        assert!(tape.grad(g.node("encoder.0.w")).is_none());
    }

    #[test]
    fn ema_single_step_and_extremes() {
        let mut nets = micro_nets(10);
        // force target to 0 and online to 1 on one tensor, tau = 0.99
        let n = nets.target.proj.w.numel();
        nets.target.proj.w = Tensor::zeros(&[nets.spec.latent_dim().unwrap(), nets.spec.proj_dim]);
        nets.online.proj.w =
            Tensor::new(nets.target.proj.w.shape(), alloc::vec![1.0; n]).unwrap();
        nets.ema_update(0.99).unwrap();
        for &v in nets.target.proj.w.values() {
            assert!((v - 0.01).abs() < 1e-15);
        }

        // tau = 1 leaves the target untouched
        let before = nets.target.proj.w.clone();
        nets.ema_update(1.0).unwrap();
        assert_eq!(before, nets.target.proj.w);

        // tau = 0 copies the online side
        nets.ema_update(0.0).unwrap();
        assert_eq!(nets.target.proj.w, nets.online.proj.w);
    }

    #[test]
    fn ema_geometric_decay() {
        // fixed online: gap shrinks by exactly 0.99 per step
        let mut nets = micro_nets(11);
        nets.online.proj.w.values_mut().iter_mut().for_each(|v| *v += 1.0);
        let gap0 = nets.target_gap();
        assert!(gap0 > 0.0);
        for _ in 0..100 {
            nets.ema_update(0.99).unwrap();
        }
        let expect = gap0 * libm::pow(0.99, 100.0);
        let got = nets.target_gap();
        assert!(
            (got - expect).abs() / expect < 1e-9,
            "gap {got} vs {expect}"
        );
    }

    #[test]
    fn film_generator_zero_goal_zero_linear_gives_zero() {
        let mut nets = micro_nets(12);
        let hh = nets.spec.head_hidden;
        let flat = nets.online.film_out.w.shape()[0];
        nets.online.film_out.w = Tensor::zeros(&[flat, 2 * hh]);
        nets.online.film_out.b = Tensor::zeros(&[2 * hh]);
        let dz = nets.spec.latent_dim().unwrap();
        let mut tape = Tape::new();
        let g = GraphNets::bind_all(&nets, &mut tape);
        let goals = tape.constant(&[2, dz], alloc::vec![0.0; 2 * dz]).unwrap();
        let (gamma, beta) = g.film_generator(&mut tape, goals, Side::Online).unwrap();
        assert_eq!(tape.shape(gamma), &[2, hh]);
        assert_eq!(tape.shape(beta), &[2, hh]);
        assert!(tape.values(gamma).iter().all(|&v| v == 0.0));
        assert!(tape.values(beta).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn film_generator_distinguishes_goals() {
        let nets = micro_nets(13);
        let dz = nets.spec.latent_dim().unwrap();
        let mut rng = stream_rng(14, stream::GOALS);
        let mut tape = Tape::new();
        let g = GraphNets::bind_all(&nets, &mut tape);
        let g1 = Tensor::uniform(&[1, dz], 1.0, &mut rng);
        let g2 = Tensor::uniform(&[1, dz], 1.0, &mut rng);
        let a = tape.leaf(&g1);
        let b = tape.leaf(&g2);
        let (ga, _) = g.film_generator(&mut tape, a, Side::Online).unwrap();
        let (gb, _) = g.film_generator(&mut tape, b, Side::Online).unwrap();
        assert_ne!(tape.values(ga), tape.values(gb));
    }

    #[test]
    fn q_values_shapes_and_goal_sensitivity() {
        let nets = micro_nets(15);
        let dz = nets.spec.latent_dim().unwrap();
        let mut rng = stream_rng(16, stream::TRAIN);
        let obs = Tensor::uniform(&[2, 2, 7, 7], 0.5, &mut rng);
        let goal1 = Tensor::uniform(&[2, dz], 1.0, &mut rng);
        let goal2 = Tensor::uniform(&[2, dz], 1.0, &mut rng);

        let mut tape = Tape::new();
        let g = GraphNets::bind_all(&nets, &mut tape);
        let o = tape.leaf(&obs);
        let z = g.encode(&mut tape, o, Side::Online).unwrap();
        let q_task = g.q_values(&mut tape, z, None, Side::Online).unwrap();
        assert_eq!(tape.shape(q_task), &[2, 5]);

        let gl1 = tape.leaf(&goal1);
        let mods1 = g.film_generator(&mut tape, gl1, Side::Online).unwrap();
        let q1 = g.q_values(&mut tape, z, Some(mods1), Side::Online).unwrap();
        let gl2 = tape.leaf(&goal2);
        let mods2 = g.film_generator(&mut tape, gl2, Side::Online).unwrap();
        let q2 = g.q_values(&mut tape, z, Some(mods2), Side::Online).unwrap();
        assert_eq!(tape.shape(q1), &[2, 5]);
        assert_ne!(tape.values(q1), tape.values(q2));
    }

    #[test]
    fn film_modulate_matches_layer_norm_at_identity() {
        let mut rng = stream_rng(17, stream::TRAIN);
        let x = Tensor::uniform(&[3, 6], 2.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let ones_row = tape.constant(&[6], alloc::vec![1.0; 6]).unwrap();
        let zeros_row = tape.constant(&[6], alloc::vec![0.0; 6]).unwrap();
        let ln = layer_norm(&mut tape, xi, ones_row, zeros_row).unwrap();
        let ones = tape.constant(&[3, 6], alloc::vec![1.0; 18]).unwrap();
        let zeros = tape.constant(&[3, 6], alloc::vec![0.0; 18]).unwrap();
        let fm = film_modulate(&mut tape, xi, ones, zeros).unwrap();
        assert_eq!(tape.values(ln), tape.values(fm));
    }

    #[test]
    fn film_modulate_gamma_zero_returns_beta() {
        let mut rng = stream_rng(18, stream::TRAIN);
        let x = Tensor::uniform(&[2, 4], 2.0, &mut rng);
        let beta_t = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let zeros = tape.constant(&[2, 4], alloc::vec![0.0; 8]).unwrap();
        let beta = tape.leaf(&beta_t);
        let fm = film_modulate(&mut tape, xi, zeros, beta).unwrap();
        assert_eq!(tape.values(fm), beta_t.values());
    }

    #[test]
    fn film_modulate_gradient_check() {
        for seed in 0..20 {
            let mut rng = stream_rng(seed, stream::TRAIN);
            let x = Tensor::uniform(&[2, 5], 1.5, &mut rng);
            let gamma = Tensor::uniform(&[2, 5], 1.0, &mut rng);
            let beta = Tensor::uniform(&[2, 5], 1.0, &mut rng);
            let err = grad_check_multi(
                |tape, ids| {
                    let fm = film_modulate(tape, ids[0], ids[1], ids[2])?;
                    let sq = tape.mul(fm, fm)?;
                    tape.mean_all(sq)
                },
                &[x, gamma, beta],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn target_params_never_track_gradients() {
        let nets = micro_nets(19);
        let mut tape = Tape::new();
        let g = GraphNets::bind_all(&nets, &mut tape);
        let mut rng = stream_rng(20, stream::TRAIN);
        let obs = Tensor::uniform(&[1, 2, 7, 7], 0.5, &mut rng);
        let o = tape.leaf(&obs);
        let zt = g.encode(&mut tape, o, Side::Target).unwrap();
        let yt = g.project(&mut tape, zt, Side::Target).unwrap();
        let qn = g.q_values(&mut tape, zt, None, Side::Target).unwrap();
        let s1 = tape.sum_all(yt).unwrap();
        let s2 = tape.sum_all(qn).unwrap();
        let s = tape.add(s1, s2).unwrap();
        tape.backward(s).unwrap();
        nets.target.visit(&mut |name, _| {
            assert!(tape.grad(g.node(name)).is_none(), "{name} tracked a gradient");
        });
    }

    #[test]
    fn cosine_stays_in_unit_interval_for_projections() {
        let nets = micro_nets(21);
        for seed in 0..10 {
            let mut rng = stream_rng(seed, stream::TRAIN);
            let obs = Tensor::uniform(&[2, 2, 7, 7], 0.5, &mut rng);
            let mut tape = Tape::new();
            let g = GraphNets::bind_all(&nets, &mut tape);
            let o = tape.leaf(&obs);
            let z = g.encode(&mut tape, o, Side::Online).unwrap();
            let y = g.project(&mut tape, z, Side::Online).unwrap();
            let p = g.predict(&mut tape, y).unwrap();
            let c = tape.rows_cosine(y, p, ZeroNormPolicy::Error).unwrap();
            for &v in tape.values(c) {
                assert!(v.abs() <= 1.0 + 1e-12);
            }
        }
    }
}
