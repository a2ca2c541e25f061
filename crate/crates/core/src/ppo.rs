//! Perimeter control as an MDP, and a PPO trainer for it.
//!
//! The policy is a Gaussian on a `[0, 1]` action scale whose mean comes
//! from a ReLU-output actor; the applied per-meter rate is the affine image
//! of the sample on `[min_rate, max_rate]`, clamped. The critic is a linear
//! head on the same hidden shape. The action noise is a single learned
//! log standard deviation.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctrl::{Controller, MeterCommand, Observation, RateBounds};
use crate::error::{NnError, PpoError};
use crate::net::Network;
use crate::nn::{adam_step, Activation, AdamState, DenseNet, Grads};
use crate::scenario::{self, RunResult, Scenario};
use crate::sim::SimState;

pub mod toy;

/// Density scale: four times a 35 veh/km critical density.
pub const DEFAULT_DENSITY_MAX: f64 = 140.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateVariant {
    /// Inner density only.
    D1,
    /// Inner and feeder densities.
    D2,
    /// Both densities and the four future-demand counts.
    D6,
}

impl StateVariant {
    pub fn dim(self) -> usize {
        match self {
            StateVariant::D1 => 1,
            StateVariant::D2 => 2,
            StateVariant::D6 => 6,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Some(StateVariant::D1),
            "d2" => Some(StateVariant::D2),
            "d6" => Some(StateVariant::D6),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StateVariant::D1 => "d1",
            StateVariant::D2 => "d2",
            StateVariant::D6 => "d6",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateDesign {
    pub variant: StateVariant,
    /// veh/lane-km mapped to 1.
    pub density_max: f64,
    /// Vehicles per cycle mapped to 1.
    pub demand_max: f64,
}

impl StateDesign {
    pub fn new(variant: StateVariant, demand_max: f64) -> Self {
        StateDesign {
            variant,
            density_max: DEFAULT_DENSITY_MAX,
            demand_max,
        }
    }

    /// Design whose demand scale is the scenario's peak per-cycle demand.
    pub fn for_scenario(variant: StateVariant, scenario: &Scenario) -> Self {
        StateDesign::new(variant, scenario.demand.max_cycle_demand(scenario.cycle).max(1.0))
    }
}

/// Scaled state vector in `[0, 1]^dim`.
pub fn build_state(obs: &Observation, design: &StateDesign) -> Result<Vec<f64>, PpoError> {
    let raw = [
        obs.inner_density / design.density_max,
        obs.feeder_density / design.density_max,
        obs.future.n12 / design.demand_max,
        obs.future.n22 / design.demand_max,
        obs.future.n21 / design.demand_max,
        obs.future.n11 / design.demand_max,
    ];
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(PpoError::NonFinite {
            what: "observation",
            detail: format!("{obs:?}"),
        });
    }
    Ok(raw[..design.variant.dim()].iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Actor, critic and the shared action noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub log_std: f64,
}

impl ActorCritic {
    /// Tanh hidden layers of the given widths; actor output is ReLU, critic
    /// output linear. The last actor layer is scaled down and biased so the
    /// initial mean sits mid-range.
    pub fn new<R: Rng>(state_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Relu);
        let mut gains = vec![2f64.sqrt(); hidden.len()];
        gains.push(0.01);
        let mut actor = DenseNet::orthogonal(&sizes, &acts, &gains, rng);
        actor.layers.last_mut().expect("output layer").bias[0] = 0.5;
        *acts.last_mut().expect("output layer") = Activation::None;
        *gains.last_mut().expect("output layer") = 1.0;
        let critic = DenseNet::orthogonal(&sizes, &acts, &gains, rng);
        ActorCritic {
            actor,
            critic,
            log_std: 0.3f64.ln(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_size()
    }

    pub fn mean(&self, state: &[f64]) -> Result<f64, PpoError> {
        Ok(self.actor.eval(state)?[0])
    }

    pub fn value(&self, state: &[f64]) -> Result<f64, PpoError> {
        Ok(self.critic.eval(state)?[0])
    }
}

/// Gaussian log-density.
pub fn log_prob(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
}

/// Differential entropy of the action Gaussian.
pub fn entropy(log_std: f64) -> f64 {
    log_std + 0.5 * (2.0 * PI * std::f64::consts::E).ln()
}

/// Maps an action on the `[0, 1]` scale to a clamped per-meter rate.
pub fn action_to_rate(action: f64, bounds: &RateBounds) -> f64 {
    bounds.clamp(bounds.min_rate + action * (bounds.max_rate - bounds.min_rate))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    /// Pre-clamp Gaussian sample on the `[0, 1]` scale.
    pub raw: f64,
    pub mean: f64,
    /// Clamped per-meter rate, veh/h.
    pub rate: f64,
    pub log_prob: f64,
}

pub fn sample_action<R: Rng>(
    ac: &ActorCritic,
    state: &[f64],
    bounds: &RateBounds,
    rng: &mut R,
) -> Result<ActionSample, PpoError> {
    let mean = ac.mean(state)?;
    if !mean.is_finite() {
        return Err(PpoError::NonFinite {
            what: "action mean",
            detail: format!("state {state:?}"),
        });
    }
    let eps: f64 = rng.sample(StandardNormal);
    let raw = mean + ac.log_std.exp() * eps;
    Ok(ActionSample {
        raw,
        mean,
        rate: action_to_rate(raw, bounds),
        log_prob: log_prob(raw, mean, ac.log_std),
    })
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    /// Rate (or plant input) actually applied.
    pub applied: f64,
}

/// Episodic environment with a scalar action on the `[0, 1]` scale.
pub trait Env {
    fn state_dim(&self) -> usize;

    /// Starts episode `episode`; environments with per-episode randomness
    /// derive it from this index.
    fn reset(&mut self, episode: u64) -> Result<Vec<f64>, PpoError>;

    fn step(&mut self, action: f64) -> Result<EnvStep, PpoError>;

    /// Total time spent of the finished episode, hours, when meaningful.
    fn tts_hours(&self) -> Option<f64> {
        None
    }
}

/// The perimeter MDP: one step per control cycle, reward is the cycle's
/// completion rate divided by `reward_scale`.
pub struct PerimeterEnv {
    scenario: Scenario,
    net: Arc<Network>,
    design: StateDesign,
    seed: u64,
    reward_scale: f64,
    bounds: RateBounds,
    state: Option<SimState>,
    cycles: Vec<crate::sim::CycleSummary>,
    /// When set, episode `k` draws route choices from seed `base + k` while
    /// keeping the trip table of `seed`.
    route_reseed: Option<u64>,
}

impl PerimeterEnv {
    pub fn new(
        scenario: Scenario,
        net: Arc<Network>,
        design: StateDesign,
        seed: u64,
        reward_scale: f64,
    ) -> Self {
        let bounds = scenario.bounds(&net);
        PerimeterEnv {
            scenario,
            net,
            design,
            seed,
            reward_scale,
            bounds,
            state: None,
            cycles: Vec::new(),
            route_reseed: None,
        }
    }

    /// Re-draws route choices on every reset, starting from `base`.
    pub fn with_route_reseed(mut self, base: u64) -> Self {
        self.route_reseed = Some(base);
        self
    }

    fn sim(&self) -> &SimState {
        self.state.as_ref().expect("reset before step")
    }

    fn observe(&self) -> Result<(Observation, Vec<f64>), PpoError> {
        let obs = self.sim().observe(self.scenario.cycle);
        let s = build_state(&obs, &self.design)?;
        Ok((obs, s))
    }

    /// Run summary of the finished episode.
    pub fn result(&self) -> Option<RunResult> {
        let state = self.state.as_ref()?;
        Some(scenario::finish(
            self.seed,
            state,
            self.cycles.clone(),
            !state.is_finished(),
        ))
    }
}

impl Env for PerimeterEnv {
    fn state_dim(&self) -> usize {
        self.design.variant.dim()
    }

    fn reset(&mut self, episode: u64) -> Result<Vec<f64>, PpoError> {
        let route_seed = match self.route_reseed {
            Some(base) => base.wrapping_add(episode),
            None => self.seed,
        };
        self.state = Some(self.scenario.sim_state_split(&self.net, self.seed, route_seed)?);
        self.cycles.clear();
        Ok(self.observe()?.1)
    }

    fn step(&mut self, action: f64) -> Result<EnvStep, PpoError> {
        let (obs, _) = self.observe()?;
        let rate = action_to_rate(action, &self.bounds);
        let steps = (self.scenario.cycle / self.scenario.sim.dt).round() as usize;
        let max_time = self.scenario.max_time();
        let sim = self.state.as_mut().expect("reset before step");
        let summary = sim.apply_decision(obs, MeterCommand::Rate(rate), steps)?;
        let done = sim.is_finished();
        let truncated = !done && sim.clock >= max_time;
        let reward = summary.completed as f64 / self.scenario.cycle / self.reward_scale;
        self.cycles.push(summary);
        Ok(EnvStep {
            state: self.observe()?.1,
            reward,
            done: done || truncated,
            truncated,
            applied: rate,
        })
    }

    fn tts_hours(&self) -> Option<f64> {
        self.result().map(|r| r.tts.total_h)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub raw_actions: Vec<f64>,
    pub applied: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub truncated: bool,
    pub tts_h: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }
}

/// Plays one episode. With `deterministic` the mean action is applied and
/// `rng` is not consumed.
pub fn rollout<E: Env + ?Sized, R: Rng>(
    env: &mut E,
    episode: u64,
    ac: &ActorCritic,
    rng: &mut R,
    deterministic: bool,
    max_steps: usize,
) -> Result<Trajectory, PpoError> {
    let mut traj = Trajectory::default();
    let mut state = env.reset(episode)?;
    for _ in 0..max_steps {
        let mean = ac.mean(&state)?;
        if !mean.is_finite() {
            return Err(PpoError::NonFinite {
                what: "action mean",
                detail: format!("state {state:?}"),
            });
        }
        let raw = if deterministic {
            mean
        } else {
            mean + ac.log_std.exp() * rng.sample::<f64, _>(StandardNormal)
        };
        let value = ac.value(&state)?;
        let step = env.step(raw.clamp(0.0, 1.0))?;
        traj.log_probs.push(log_prob(raw, mean, ac.log_std));
        traj.states.push(std::mem::replace(&mut state, step.state));
        traj.raw_actions.push(raw);
        traj.applied.push(step.applied);
        traj.values.push(value);
        traj.rewards.push(step.reward);
        if step.done {
            traj.truncated = step.truncated;
            break;
        }
    }
    traj.tts_h = env.tts_hours();
    Ok(traj)
}

/// Generalized advantage estimates and value targets with a zero terminal
/// bootstrap.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if rewards.len() != values.len() {
        return Err(PpoError::Length(format!(
            "{} rewards vs {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub episodes: usize,
    pub batch_episodes: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub clip: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    /// Global gradient-norm cap per network; non-positive disables it.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    /// Completion rate (veh/s) that maps to a reward of 1.
    pub reward_scale: f64,
    /// Hard cap on steps per episode.
    pub max_steps: usize,
    /// Keep the training trip table but redraw route choices every episode.
    pub route_reseed: bool,
}

/// First route seed used when route choices are redrawn during training;
/// chosen clear of the evaluation seeds.
pub const ROUTE_SEED_BASE: u64 = 1_000;

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            episodes: 1200,
            batch_episodes: 25,
            lr: 5e-4,
            entropy_coef: 0.01,
            gamma: 0.95,
            clip: 0.2,
            lambda: 0.95,
            epochs: 10,
            minibatch: 512,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: vec![256, 256],
            reward_scale: 4.0,
            max_steps: 10_000,
            route_reseed: true,
        }
    }
}

/// One flattened transition with its advantage and value target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: Vec<f64>,
    pub raw_action: f64,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

/// Flattens a batch of trajectories with per-batch advantage normalization.
pub fn prepare_batch(batch: &[Trajectory], gamma: f64, lambda: f64) -> Result<Vec<Sample>, PpoError> {
    let mut samples = Vec::new();
    for traj in batch {
        let (adv, ret) = gae(&traj.rewards, &traj.values, gamma, lambda)?;
        for t in 0..traj.len() {
            samples.push(Sample {
                state: traj.states[t].clone(),
                raw_action: traj.raw_actions[t],
                old_log_prob: traj.log_probs[t],
                advantage: adv[t],
                target: ret[t],
            });
        }
    }
    let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    normalize(&mut adv);
    for (s, a) in samples.iter_mut().zip(adv) {
        s.advantage = a;
    }
    Ok(samples)
}

/// Clipped surrogate contribution `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

#[derive(Debug, Clone)]
pub struct ActorGrad {
    pub loss: f64,
    /// Mean clipped surrogate, without the entropy bonus.
    pub surrogate: f64,
    pub grads: Grads,
    pub log_std_grad: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

fn stack_states(samples: &[&Sample], dim: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        x.extend_from_slice(&s.state);
    }
    x
}

/// Actor loss `-mean(clipped surrogate) - c·entropy` and its gradient.
pub fn actor_loss_grad(
    ac: &ActorCritic,
    samples: &[&Sample],
    clip: f64,
    entropy_coef: f64,
) -> Result<ActorGrad, PpoError> {
    let n = samples.len();
    let x = stack_states(samples, ac.state_dim());
    let cache = ac.actor.forward_batch(&x, n)?;
    let means = cache.output();
    let var = (2.0 * ac.log_std).exp();
    let mut d_mean = vec![0.0; n];
    let mut d_log_std = 0.0;
    let (mut surrogate, mut ratio_sum, mut clipped) = (0.0, 0.0, 0usize);
    for (i, s) in samples.iter().enumerate() {
        let mu = means[i];
        let lp = log_prob(s.raw_action, mu, ac.log_std);
        let ratio = (lp - s.old_log_prob).exp();
        let a = s.advantage;
        surrogate += clipped_surrogate(ratio, a, clip);
        ratio_sum += ratio;
        let outside = (a >= 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        if outside {
            clipped += 1;
            continue;
        }
        // d(-ρA/n)/dlogπ = -ρA/n
        let g = -ratio * a / n as f64;
        let diff = s.raw_action - mu;
        d_mean[i] = g * diff / var;
        d_log_std += g * (diff * diff / var - 1.0);
    }
    d_log_std -= entropy_coef;
    let (grads, _) = ac.actor.backward(&cache, &d_mean)?;
    let surrogate = surrogate / n as f64;
    Ok(ActorGrad {
        loss: -surrogate - entropy_coef * entropy(ac.log_std),
        surrogate,
        grads,
        log_std_grad: d_log_std,
        mean_ratio: ratio_sum / n as f64,
        clip_fraction: clipped as f64 / n as f64,
    })
}

/// `value_coef · mean((V - target)²)` and its gradient.
pub fn critic_loss_grad(ac: &ActorCritic, samples: &[&Sample], value_coef: f64) -> Result<(f64, Grads), PpoError> {
    let n = samples.len();
    let x = stack_states(samples, ac.state_dim());
    let cache = ac.critic.forward_batch(&x, n)?;
    let mut loss = 0.0;
    let d: Vec<f64> = cache
        .output()
        .iter()
        .zip(samples)
        .map(|(v, s)| {
            let e = v - s.target;
            loss += e * e;
            2.0 * value_coef * e / n as f64
        })
        .collect();
    let (grads, _) = ac.critic.backward(&cache, &d)?;
    Ok((value_coef * loss / n as f64, grads))
}

/// Mean clipped surrogate of the current policy over `samples`.
pub fn surrogate_objective(ac: &ActorCritic, samples: &[Sample], clip: f64) -> Result<f64, PpoError> {
    let refs: Vec<&Sample> = samples.iter().collect();
    Ok(actor_loss_grad(ac, &refs, clip, 0.0)?.surrogate)
}

fn clip_norm(grads: &mut Grads, extra: &mut f64, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads.slices().iter().flat_map(|s| s.iter()).map(|x| x * x).sum::<f64>() + *extra * *extra;
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.scale(k);
        *extra *= k;
    }
}

/// Optimizer state for both networks and the noise parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub actor: AdamState,
    pub critic: AdamState,
    pub log_std: AdamState,
}

impl Optimizers {
    pub fn new(ac: &ActorCritic) -> Self {
        Optimizers {
            actor: AdamState::for_net(&ac.actor),
            critic: AdamState::for_net(&ac.critic),
            log_std: AdamState::new(&[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub surrogate_before: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub samples: usize,
}

/// Several epochs of minibatch PPO over one batch of trajectories.
pub fn ppo_update<R: Rng>(
    ac: &mut ActorCritic,
    opt: &mut Optimizers,
    batch: &[Trajectory],
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    let samples = prepare_batch(batch, config.gamma, config.lambda)?;
    let mut stats = UpdateStats {
        samples: samples.len(),
        ..Default::default()
    };
    if samples.is_empty() {
        return Ok(stats);
    }
    stats.surrogate_before = surrogate_objective(ac, &samples, config.clip)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mb = config.minibatch.max(1);
    let mut count = 0.0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut a = actor_loss_grad(ac, &refs, config.clip, config.entropy_coef)?;
            let (c_loss, mut c_grads) = critic_loss_grad(ac, &refs, config.value_coef)?;
            if !a.loss.is_finite() || !c_loss.is_finite() {
                return Err(PpoError::NonFinite {
                    what: "loss",
                    detail: format!("actor {} critic {}", a.loss, c_loss),
                });
            }
            clip_norm(&mut a.grads, &mut a.log_std_grad, config.max_grad_norm);
            let mut none = 0.0;
            clip_norm(&mut c_grads, &mut none, config.max_grad_norm);
            adam_step(&mut ac.actor, &a.grads, &mut opt.actor, config.lr)?;
            adam_step(&mut ac.critic, &c_grads, &mut opt.critic, config.lr)?;
            let mut ls = [ac.log_std];
            opt.log_std
                .update(&mut [&mut ls[..]], &[&[a.log_std_grad][..]], config.lr)?;
            ac.log_std = ls[0].clamp(-5.0, 1.0);
            stats.actor_loss += a.loss;
            stats.critic_loss += c_loss;
            stats.mean_ratio += a.mean_ratio;
            stats.clip_fraction += a.clip_fraction;
            count += 1.0;
        }
    }
    if !ac.actor.is_finite() || !ac.critic.is_finite() {
        return Err(PpoError::Nn(NnError::NonFiniteGradient));
    }
    stats.actor_loss /= count;
    stats.critic_loss /= count;
    stats.mean_ratio /= count;
    stats.clip_fraction /= count;
    stats.entropy = entropy(ac.log_std);
    Ok(stats)
}

/// One line of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub tts_h: Option<f64>,
    pub mean_rate: f64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub ac: ActorCritic,
    pub opt: Optimizers,
    pub episodes_done: usize,
    pub curve: Vec<EpisodeLog>,
    pub best: ActorCritic,
    /// Mean score of the batch `best` generated: TTS in hours when the
    /// environment reports it, negated return otherwise. Lower is better.
    pub best_score: f64,
    pub updates: usize,
}

fn stream(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

/// Seeded PPO trainer. Episode `k` samples actions from its own RNG stream
/// so results do not depend on how training is split across resumptions.
pub struct Trainer {
    pub config: PpoConfig,
    pub seed: u64,
    pub state: TrainerState,
}

impl Trainer {
    pub fn new(config: PpoConfig, state_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, 0, 0);
        let ac = ActorCritic::new(state_dim, &config.hidden, &mut rng);
        let opt = Optimizers::new(&ac);
        Trainer {
            state: TrainerState {
                best: ac.clone(),
                ac,
                opt,
                episodes_done: 0,
                curve: Vec::new(),
                best_score: f64::INFINITY,
                updates: 0,
            },
            config,
            seed,
        }
    }

    pub fn resume(config: PpoConfig, seed: u64, state: TrainerState) -> Self {
        Trainer { config, seed, state }
    }

    fn score(&self, batch: &[Trajectory]) -> f64 {
        let sum: f64 = batch
            .iter()
            .map(|t| t.tts_h.unwrap_or_else(|| -t.discounted_return(self.config.gamma)))
            .sum();
        sum / batch.len() as f64
    }

    /// Runs batches until `config.episodes` episodes are done or
    /// `max_batches` batches have run in this call. `on_batch` sees the state
    /// after every update. Each policy is scored on the exploratory batch it
    /// generated, and the best-scoring one is kept.
    pub fn train<E: Env + ?Sized>(
        &mut self,
        env: &mut E,
        max_batches: Option<usize>,
        mut on_batch: impl FnMut(&TrainerState) -> Result<(), PpoError>,
    ) -> Result<(), PpoError> {
        let mut batches = 0;
        while self.state.episodes_done < self.config.episodes {
            if max_batches.is_some_and(|m| batches >= m) {
                break;
            }
            let n = self
                .config
                .batch_episodes
                .min(self.config.episodes - self.state.episodes_done);
            let mut batch = Vec::with_capacity(n);
            for _ in 0..n {
                let k = self.state.episodes_done;
                let mut rng = stream(self.seed, 1, k as u64);
                let traj = rollout(env, k as u64, &self.state.ac, &mut rng, false, self.config.max_steps)?;
                let mean_rate = if traj.is_empty() {
                    0.0
                } else {
                    traj.applied.iter().sum::<f64>() / traj.len() as f64
                };
                self.state.curve.push(EpisodeLog {
                    episode: k,
                    ret: traj.discounted_return(self.config.gamma),
                    tts_h: traj.tts_h,
                    mean_rate,
                });
                self.state.episodes_done += 1;
                batch.push(traj);
            }
            let score = self.score(&batch);
            if score < self.state.best_score {
                self.state.best_score = score;
                self.state.best = self.state.ac.clone();
            }
            let mut rng = stream(self.seed, 2, self.state.updates as u64);
            ppo_update(&mut self.state.ac, &mut self.state.opt, &batch, &self.config, &mut rng)?;
            self.state.updates += 1;
            batches += 1;
            on_batch(&self.state)?;
        }
        Ok(())
    }
}

/// Frozen policy with the state design it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub version: u32,
    pub design: StateDesign,
    pub bounds: RateBounds,
    pub ac: ActorCritic,
}

impl Policy {
    pub fn new(design: StateDesign, bounds: RateBounds, ac: ActorCritic) -> Self {
        Policy {
            version: 1,
            design,
            bounds,
            ac,
        }
    }

    /// Deterministic (mean-action) rate for an observation.
    pub fn rate(&self, obs: &Observation) -> Result<f64, PpoError> {
        let s = build_state(obs, &self.design)?;
        self.rate_for_state(&s)
    }

    pub fn rate_for_state(&self, state: &[f64]) -> Result<f64, PpoError> {
        Ok(action_to_rate(self.ac.mean(state)?, &self.bounds))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PpoError> {
        let p: Policy = serde_json::from_str(text)
            .map_err(|e| PpoError::Nn(NnError::Checkpoint(e.to_string())))?;
        if p.ac.state_dim() != p.design.variant.dim() {
            return Err(PpoError::Nn(NnError::Checkpoint(format!(
                "actor input {} does not match design {}",
                p.ac.state_dim(),
                p.design.variant.as_str()
            ))));
        }
        Ok(p)
    }
}

/// A policy behind the controller contract.
#[derive(Debug, Clone)]
pub struct PolicyController {
    pub policy: Policy,
}

impl Controller for PolicyController {
    fn name(&self) -> &str {
        "ppo"
    }

    fn decide(&mut self, obs: &Observation) -> MeterCommand {
        // Non-finite observations cannot come from the engine; fall back to
        // the most restrictive rate rather than panic.
        MeterCommand::Rate(self.policy.rate(obs).unwrap_or(self.policy.bounds.min_rate))
    }
}

/// Trains on the fixed training seed of `scenario` and returns the trainer
/// (holding the learning curve and best policy).
pub fn train_on_scenario(
    scenario: &Scenario,
    variant: StateVariant,
    config: &PpoConfig,
    train_seed: u64,
    init_seed: u64,
) -> Result<(Trainer, Policy), PpoError> {
    let net = scenario.network()?;
    let design = StateDesign::for_scenario(variant, scenario);
    let mut env = PerimeterEnv::new(scenario.clone(), Arc::clone(&net), design, train_seed, config.reward_scale);
    if config.route_reseed {
        env = env.with_route_reseed(ROUTE_SEED_BASE);
    }
    let mut trainer = Trainer::new(config.clone(), variant.dim(), init_seed);
    trainer.train(&mut env, None, |_| Ok(()))?;
    let policy = Policy::new(design, scenario.bounds(&net), trainer.state.best.clone());
    Ok((trainer, policy))
}

/// Per-seed results of one controller.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub runs: Vec<RunResult>,
}

impl Evaluation {
    pub fn mean_tts(&self) -> f64 {
        if self.runs.is_empty() {
            return 0.0;
        }
        self.runs.iter().map(|r| r.tts.total_h).sum::<f64>() / self.runs.len() as f64
    }
}

/// Runs `controller` once per seed.
pub fn evaluate(
    scenario: &Scenario,
    net: &Arc<Network>,
    controller: &mut dyn Controller,
    seeds: &[u64],
) -> Result<Evaluation, PpoError> {
    let runs = seeds
        .iter()
        .map(|&s| scenario.run(net, controller, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Evaluation { runs })
}

/// One point of a policy sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub slice: String,
    pub state: Vec<f64>,
    pub rate: f64,
}

/// Sweeps inner density over `densities` (veh/lane-km). Other components
/// are fixed from `base`; one slice per entry of `slices`, which override
/// the future-demand counts.
pub fn policy_grid(
    policy: &Policy,
    densities: &[f64],
    base: &Observation,
    slices: &[(String, crate::demand::FutureDemand)],
) -> Result<Vec<GridPoint>, PpoError> {
    let mut out = Vec::new();
    let default_slice = [("base".to_string(), base.future)];
    let slices = if slices.is_empty() { &default_slice[..] } else { slices };
    for (name, future) in slices {
        for &d in densities {
            let obs = Observation {
                inner_density: d,
                future: *future,
                ..*base
            };
            let state = build_state(&obs, &policy.design)?;
            out.push(GridPoint {
                slice: name.clone(),
                rate: policy.rate_for_state(&state)?,
                state,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::FutureDemand;

    fn design(v: StateVariant) -> StateDesign {
        StateDesign::new(v, 100.0)
    }

    #[test]
    fn empty_network_state_is_zero() {
        let s = build_state(&Observation::default(), &design(StateVariant::D6)).unwrap();
        assert_eq!(s, vec![0.0; 6]);
    }

    #[test]
    fn density_scaling() {
        let obs = Observation {
            inner_density: 35.0,
            ..Default::default()
        };
        assert_eq!(build_state(&obs, &design(StateVariant::D1)).unwrap(), vec![0.25]);
    }

    #[test]
    fn d2_is_prefix_of_d6() {
        let obs = Observation {
            inner_density: 20.0,
            feeder_density: 300.0,
            future: FutureDemand {
                n12: 40.0,
                n22: 70.0,
                n21: 0.0,
                n11: 0.0,
            },
            ..Default::default()
        };
        let d2 = build_state(&obs, &design(StateVariant::D2)).unwrap();
        let d6 = build_state(&obs, &design(StateVariant::D6)).unwrap();
        assert_eq!(d2[..], d6[..2]);
        assert_eq!(d6[1], 1.0);
        assert!(d6.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn non_finite_observation_rejected() {
        let obs = Observation {
            inner_density: f64::NAN,
            ..Default::default()
        };
        assert!(build_state(&obs, &design(StateVariant::D1)).is_err());
    }

    #[test]
    fn midpoint_and_clamp_mapping() {
        let b = RateBounds::default();
        assert_eq!(action_to_rate(0.5, &b), 175.0);
        assert_eq!(action_to_rate(2.0, &b), 300.0);
        assert_eq!(action_to_rate(-1.0, &b), 50.0);
    }

    #[test]
    fn deterministic_limit_gives_mean_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ac = ActorCritic::new(1, &[8], &mut rng);
        ac.log_std = -40.0;
        let s = sample_action(&ac, &[0.3], &RateBounds::default(), &mut rng).unwrap();
        assert!((s.mean - 0.5).abs() < 0.1);
        assert!((s.raw - s.mean).abs() < 1e-12);
        assert_eq!(s.rate, action_to_rate(s.mean, &RateBounds::default()));
    }

    #[test]
    fn gae_single_step_and_lambda_zero() {
        let (a, r) = gae(&[0.7], &[0.0], 0.95, 0.95).unwrap();
        assert_eq!((a[0], r[0]), (0.7, 0.7));
        let rewards = [0.1, 0.4, 0.2];
        let values = [0.5, 0.3, 0.9];
        let (a, _) = gae(&rewards, &values, 0.9, 0.0).unwrap();
        let deltas = [0.1 + 0.9 * 0.3 - 0.5, 0.4 + 0.9 * 0.9 - 0.3, 0.2 - 0.9];
        for (x, y) in a.iter().zip(deltas) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(gae(&[1.0], &[], 0.9, 0.9).is_err());
    }

    #[test]
    fn constant_reward_return_is_geometric() {
        let traj = Trajectory {
            rewards: vec![0.3; 40],
            ..Default::default()
        };
        let g: f64 = 0.95;
        let closed = 0.3 * (1.0 - g.powi(40)) / (1.0 - g);
        assert!((traj.discounted_return(g) - closed).abs() < 1e-12);
    }

    #[test]
    fn clip_uses_upper_factor() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2), 1.2 * 2.0);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(0.9, 1.0, 0.2), 0.9);
    }

    #[test]
    fn normalization_moments() {
        let mut xs: Vec<f64> = (0..37).map(|k| (k as f64 * 1.7).sin() * 3.0 + 2.0).collect();
        normalize(&mut xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unchanged_policy_has_unit_ratio_and_entropy_only_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ac = ActorCritic::new(2, &[8, 8], &mut rng);
        let samples: Vec<Sample> = (0..20)
            .map(|k| {
                let state = vec![k as f64 / 20.0, 0.5];
                let mu = ac.mean(&state).unwrap();
                let raw = mu + 0.1 * ((k as f64).sin());
                Sample {
                    old_log_prob: log_prob(raw, mu, ac.log_std),
                    state,
                    raw_action: raw,
                    advantage: 0.0,
                    target: 0.0,
                }
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let g = actor_loss_grad(&ac, &refs, 0.2, 0.01).unwrap();
        assert!((g.mean_ratio - 1.0).abs() < 1e-12);
        assert!(g.grads.slices().iter().all(|s| s.iter().all(|x| *x == 0.0)));
        assert_eq!(g.log_std_grad, -0.01);
    }

    #[test]
    fn policy_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Policy::new(
            design(StateVariant::D2),
            RateBounds::default(),
            ActorCritic::new(2, &[4], &mut rng),
        );
        let back = Policy::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let bad = Policy::new(design(StateVariant::D6), RateBounds::default(), p.ac.clone());
        assert!(Policy::from_json(&bad.to_json()).is_err());
    }
}
