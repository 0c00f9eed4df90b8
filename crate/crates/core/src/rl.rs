//! Portfolio MDP and two on-policy actor-critic learners (A2C, PPO).
//!
//! The policy network ends in a softmax, whose output is the mean allocation.
//! During training, actions are drawn from a Dirichlet with concentration
//! `kappa * softmax(...)`, and the log-density of that draw drives the policy
//! gradient. Evaluation uses the mean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::features::{build_state, FeatureScaler, FeatureTensor};
use crate::market_data::{price_relatives, PricePanel};
use crate::mean_variance::{check_simplex, PortfolioWeights, SIMPLEX_TOL};
use crate::nn::{Activation, AdamState, DenseNet, GradientBundle};

const MIN_ACTION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    A2c,
    Ppo,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::A2c => "a2c",
            Algo::Ppo => "ppo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub entropy_coef: f64,
    pub rollout_len: usize,
    pub clip_eps: f64,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    /// Dirichlet concentration `kappa`.
    pub concentration: f64,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            entropy_coef: 0.01,
            rollout_len: 64,
            clip_eps: 0.2,
            ppo_epochs: 4,
            minibatch: 16,
            concentration: 100.0,
            hidden: vec![64, 64],
            hidden_activation: Activation::Tanh,
        }
    }
}

/// Walk-forward portfolio environment over slots `t_start..=t_end`.
/// States and relatives are precomputed; the state of slot `t` only uses data
/// up to day `t-1`.
#[derive(Debug, Clone)]
pub struct PortfolioEnv {
    pub t_start: usize,
    pub t_end: usize,
    pub n_assets: usize,
    pub n_features: usize,
    cursor: usize,
    states: Vec<Vec<f64>>,
    relatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: Option<Vec<f64>>,
    pub done: bool,
}

impl PortfolioEnv {
    pub fn new(
        panel: &PricePanel,
        features: &FeatureTensor,
        scaler: &FeatureScaler,
        window: usize,
        t_start: usize,
        t_end: usize,
    ) -> Result<Self> {
        if t_start == 0 || t_end < t_start || t_end > panel.n_slots() {
            return Err(Error::SlotOutOfRange {
                slot: t_end,
                max: panel.n_slots(),
            });
        }
        let mut states = Vec::with_capacity(t_end - t_start + 1);
        let mut relatives = Vec::with_capacity(t_end - t_start + 1);
        for t in t_start..=t_end {
            states.push(build_state(panel, features, scaler, t, window)?.data);
            relatives.push(price_relatives(panel, t)?.values);
        }
        Ok(Self {
            t_start,
            t_end,
            n_assets: panel.n_assets(),
            n_features: features.n_features(),
            cursor: t_start,
            states,
            relatives,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n_assets * (self.n_assets + self.n_features)
    }

    pub fn episode_len(&self) -> usize {
        self.t_end - self.t_start + 1
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.cursor = self.t_start;
        self.states[0].clone()
    }

    pub fn state(&self) -> Result<&[f64]> {
        if self.cursor > self.t_end {
            return Err(Error::EpisodeFinished);
        }
        Ok(&self.states[self.cursor - self.t_start])
    }

    pub fn state_at(&self, t: usize) -> Option<&[f64]> {
        (t >= self.t_start && t <= self.t_end).then(|| self.states[t - self.t_start].as_slice())
    }

    pub fn relatives_at(&self, t: usize) -> Option<&[f64]> {
        (t >= self.t_start && t <= self.t_end)
            .then(|| self.relatives[t - self.t_start].as_slice())
    }

    /// Realize `ln(w'y(t))` for the current slot and advance.
    pub fn step(&mut self, w: &[f64]) -> Result<StepOutcome> {
        if self.cursor > self.t_end {
            return Err(Error::EpisodeFinished);
        }
        check_simplex(w, SIMPLEX_TOL)?;
        let y = &self.relatives[self.cursor - self.t_start];
        if w.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: y.len(),
                got: w.len(),
            });
        }
        let reward = log_return(w, y);
        self.cursor += 1;
        let done = self.cursor > self.t_end;
        Ok(StepOutcome {
            reward,
            next_state: (!done).then(|| self.states[self.cursor - self.t_start].clone()),
            done,
        })
    }
}

pub fn log_return(w: &[f64], y: &[f64]) -> f64 {
    w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>().ln()
}

/// One-step bootstrapped advantage. Pass `v_next = 0` at terminal states.
pub fn advantage(reward: f64, gamma: f64, v_next: f64, v_now: f64) -> f64 {
    reward + gamma * v_next - v_now
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub slot: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward: f64,
    pub next_state: Option<Vec<f64>>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub gamma: f64,
    pub transitions: Vec<Transition>,
}

// ---------------------------------------------------------------------------
// Dirichlet helpers

/// Trigamma by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x)
            * x2
            * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 * (1.0 / 30.0))))
}

pub fn dirichlet_log_density(alpha: &[f64], w: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    ln_gamma(a0)
        + alpha
            .iter()
            .zip(w)
            .map(|(a, x)| (a - 1.0) * x.ln() - ln_gamma(*a))
            .sum::<f64>()
}

pub fn dirichlet_entropy(alpha: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let k = alpha.len() as f64;
    alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>() - ln_gamma(a0) + (a0 - k) * digamma(a0)
        - alpha.iter().map(|a| (a - 1.0) * digamma(*a)).sum::<f64>()
}

fn alphas(mean: &[f64], kappa: f64) -> Vec<f64> {
    mean.iter().map(|m| kappa * m).collect()
}

/// d log p(w) / d mean, with `alpha = kappa * mean`.
fn log_density_grad_mean(mean: &[f64], kappa: f64, w: &[f64]) -> Vec<f64> {
    let alpha = alphas(mean, kappa);
    let psi0 = digamma(alpha.iter().sum());
    alpha
        .iter()
        .zip(w)
        .map(|(a, x)| kappa * (psi0 - digamma(*a) + x.ln()))
        .collect()
}

/// d H / d mean.
fn entropy_grad_mean(mean: &[f64], kappa: f64) -> Vec<f64> {
    let alpha = alphas(mean, kappa);
    let a0: f64 = alpha.iter().sum();
    let common = (a0 - alpha.len() as f64) * trigamma(a0);
    alpha
        .iter()
        .map(|a| kappa * (common - (a - 1.0) * trigamma(*a)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Mean,
    Dirichlet,
}

#[derive(Debug, Clone)]
pub struct ActionSample {
    pub weights: PortfolioWeights,
    pub mean: Vec<f64>,
    pub log_prob: f64,
}

pub fn sample_action<R: Rng + ?Sized>(
    policy: &DenseNet,
    state: &[f64],
    mode: ActionMode,
    kappa: f64,
    rng: &mut R,
) -> Result<ActionSample> {
    let mean = policy.predict(state)?;
    let alpha = alphas(&mean, kappa);
    let values = match mode {
        ActionMode::Mean => mean.clone(),
        ActionMode::Dirichlet => {
            let mut draws: Vec<f64> = alpha
                .iter()
                .map(|a| {
                    Gamma::new(*a, 1.0)
                        .map(|g| g.sample(rng))
                        .unwrap_or(MIN_ACTION)
                        .max(MIN_ACTION)
                })
                .collect();
            let sum: f64 = draws.iter().sum();
            draws.iter_mut().for_each(|d| *d /= sum);
            draws
        }
    };
    let log_prob = dirichlet_log_density(&alpha, &values);
    Ok(ActionSample {
        weights: PortfolioWeights { slot: 0, values },
        mean,
        log_prob,
    })
}

// ---------------------------------------------------------------------------
// Agents

#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub policy: DenseNet,
    pub value: DenseNet,
    pub policy_opt: AdamState,
    pub value_opt: AdamState,
    pub hp: Hyperparams,
}

impl AgentBundle {
    pub fn new(state_dim: usize, n_assets: usize, hp: Hyperparams, seed: u64) -> Result<Self> {
        let mut dims = vec![state_dim];
        dims.extend(&hp.hidden);
        let mut acts = vec![hp.hidden_activation; hp.hidden.len()];

        let mut pdims = dims.clone();
        pdims.push(n_assets);
        acts.push(Activation::Softmax);
        let policy = DenseNet::init(&pdims, &acts, seed)?;

        let mut vdims = dims;
        vdims.push(1);
        *acts.last_mut().expect("output activation") = Activation::Identity;
        let value = DenseNet::init(&vdims, &acts, seed ^ 0x5EED_C0FF_EE00_0001)?;

        Ok(Self {
            policy_opt: AdamState::new(policy.n_params()),
            value_opt: AdamState::new(value.n_params()),
            policy,
            value,
            hp,
        })
    }

    pub fn value_of(&self, state: &[f64]) -> Result<f64> {
        Ok(self.value.predict(state)?[0])
    }

    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.policy.predict(state)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_advantage: f64,
    /// Largest `|ratio - 1|` before the first PPO step; zero for A2C.
    pub initial_ratio_dev: f64,
}

fn nan_guard(phase: &str, values: &[f64], grads: &[&GradientBundle]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NaNLoss {
            phase: phase.to_string(),
            detail: format!("losses {values:?}"),
        });
    }
    Ok(())
}

fn zero_grads(net: &DenseNet, state_dim: usize) -> GradientBundle {
    let cache = net.forward(&vec![0.0; state_dim]).expect("dimension");
    net.backward(&cache, &vec![0.0; net.output_dim()])
        .expect("fresh cache")
}

/// `(1/n) sum 0.5 (V(s) - target)^2` and its gradient.
fn value_loss_and_grad(
    value: &DenseNet,
    states: &[&[f64]],
    targets: &[f64],
) -> Result<(f64, GradientBundle)> {
    let n = states.len() as f64;
    let mut grad = zero_grads(value, states[0].len());
    let mut loss = 0.0;
    for (s, target) in states.iter().zip(targets) {
        let cache = value.forward(s)?;
        let err = cache.output()[0] - target;
        loss += 0.5 * err * err / n;
        let g = value.backward(&cache, &[err / n])?;
        grad.accumulate(&g, 1.0);
    }
    Ok((loss, grad))
}

fn one_step_targets(bundle: &AgentBundle, traj: &Trajectory) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut advs = Vec::with_capacity(traj.transitions.len());
    let mut targets = Vec::with_capacity(traj.transitions.len());
    for tr in &traj.transitions {
        let v_now = bundle.value_of(&tr.state)?;
        let v_next = match (&tr.next_state, tr.done) {
            (Some(ns), false) => bundle.value_of(ns)?,
            _ => 0.0,
        };
        advs.push(advantage(tr.reward, traj.gamma, v_next, v_now));
        targets.push(tr.reward + traj.gamma * v_next);
    }
    Ok((advs, targets))
}

pub fn a2c_update(bundle: &mut AgentBundle, traj: &Trajectory) -> Result<UpdateStats> {
    if traj.transitions.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let hp = bundle.hp.clone();
    let n = traj.transitions.len() as f64;
    let (advs, targets) = one_step_targets(bundle, traj)?;

    let mut pgrad = zero_grads(&bundle.policy, traj.transitions[0].state.len());
    let mut policy_loss = 0.0;
    let mut entropy = 0.0;
    for (tr, adv) in traj.transitions.iter().zip(&advs) {
        let cache = bundle.policy.forward(&tr.state)?;
        let mean = cache.output().to_vec();
        let alpha = alphas(&mean, hp.concentration);
        let logp = dirichlet_log_density(&alpha, &tr.action);
        let h = dirichlet_entropy(&alpha);
        policy_loss -= (adv * logp + hp.entropy_coef * h) / n;
        entropy += h / n;
        let dlogp = log_density_grad_mean(&mean, hp.concentration, &tr.action);
        let mut upstream: Vec<f64> = dlogp.iter().map(|d| -adv * d / n).collect();
        if hp.entropy_coef != 0.0 {
            let dh = entropy_grad_mean(&mean, hp.concentration);
            for (u, d) in upstream.iter_mut().zip(&dh) {
                *u -= hp.entropy_coef * d / n;
            }
        }
        let g = bundle.policy.backward(&cache, &upstream)?;
        pgrad.accumulate(&g, 1.0);
    }

    let states: Vec<&[f64]> = traj.transitions.iter().map(|t| t.state.as_slice()).collect();
    let (value_loss, vgrad) = value_loss_and_grad(&bundle.value, &states, &targets)?;
    nan_guard("a2c", &[policy_loss, value_loss], &[&pgrad, &vgrad])?;

    bundle.policy_opt.step(&mut bundle.policy, &pgrad, hp.policy_lr)?;
    bundle.value_opt.step(&mut bundle.value, &vgrad, hp.value_lr)?;
    Ok(UpdateStats {
        policy_loss,
        value_loss,
        entropy,
        mean_advantage: advs.iter().sum::<f64>() / n,
        initial_ratio_dev: 0.0,
    })
}

/// Clipped surrogate `min(R A, clip(R, 1-eps, 1+eps) A)`.
pub fn ppo_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// One sample for the PPO objective.
#[derive(Debug, Clone)]
pub struct PpoSample<'a> {
    pub state: &'a [f64],
    pub action: &'a [f64],
    pub old_log_prob: f64,
    pub advantage: f64,
}

/// Mean clipped surrogate plus entropy bonus over `batch`, and the gradient
/// of its negation (a loss) with respect to the policy parameters.
pub fn ppo_objective_and_grad(
    policy: &DenseNet,
    hp: &Hyperparams,
    batch: &[PpoSample<'_>],
) -> Result<(f64, f64, GradientBundle)> {
    let n = batch.len() as f64;
    let mut grad = zero_grads(policy, batch[0].state.len());
    let mut objective = 0.0;
    let mut entropy = 0.0;
    for s in batch {
        let cache = policy.forward(s.state)?;
        let mean = cache.output().to_vec();
        let alpha = alphas(&mean, hp.concentration);
        let logp = dirichlet_log_density(&alpha, s.action);
        let ratio = (logp - s.old_log_prob).exp();
        let h = dirichlet_entropy(&alpha);
        objective += (ppo_surrogate(ratio, s.advantage, hp.clip_eps) + hp.entropy_coef * h) / n;
        entropy += h / n;

        let clipped_active = (s.advantage >= 0.0 && ratio > 1.0 + hp.clip_eps)
            || (s.advantage < 0.0 && ratio < 1.0 - hp.clip_eps);
        let mut upstream = vec![0.0; mean.len()];
        if !clipped_active {
            let dlogp = log_density_grad_mean(&mean, hp.concentration, s.action);
            for (u, d) in upstream.iter_mut().zip(&dlogp) {
                *u -= s.advantage * ratio * d / n;
            }
        }
        if hp.entropy_coef != 0.0 {
            let dh = entropy_grad_mean(&mean, hp.concentration);
            for (u, d) in upstream.iter_mut().zip(&dh) {
                *u -= hp.entropy_coef * d / n;
            }
        }
        let g = policy.backward(&cache, &upstream)?;
        grad.accumulate(&g, 1.0);
    }
    Ok((objective, entropy, grad))
}

pub fn ppo_update<R: Rng + ?Sized>(
    bundle: &mut AgentBundle,
    traj: &Trajectory,
    epochs: usize,
    rng: &mut R,
) -> Result<UpdateStats> {
    if traj.transitions.is_empty() {
        return Err(Error::TooFewSamples(0));
    }
    let hp = bundle.hp.clone();
    let (advs, targets) = one_step_targets(bundle, traj)?;

    let mut initial_ratio_dev = 0.0f64;
    for tr in &traj.transitions {
        let mean = bundle.policy.predict(&tr.state)?;
        let logp = dirichlet_log_density(&alphas(&mean, hp.concentration), &tr.action);
        initial_ratio_dev = initial_ratio_dev.max(((logp - tr.log_prob).exp() - 1.0).abs());
    }

    let mut order: Vec<usize> = (0..traj.transitions.len()).collect();
    let mb = hp.minibatch.max(1);
    let mut stats = UpdateStats {
        mean_advantage: advs.iter().sum::<f64>() / advs.len() as f64,
        initial_ratio_dev,
        ..Default::default()
    };
    let mut batches = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            let batch: Vec<PpoSample<'_>> = chunk
                .iter()
                .map(|&i| PpoSample {
                    state: &traj.transitions[i].state,
                    action: &traj.transitions[i].action,
                    old_log_prob: traj.transitions[i].log_prob,
                    advantage: advs[i],
                })
                .collect();
            let (objective, entropy, pgrad) = ppo_objective_and_grad(&bundle.policy, &hp, &batch)?;
            let states: Vec<&[f64]> = chunk.iter().map(|&i| traj.transitions[i].state.as_slice()).collect();
            let tg: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (value_loss, vgrad) = value_loss_and_grad(&bundle.value, &states, &tg)?;
            nan_guard("ppo", &[objective, value_loss], &[&pgrad, &vgrad])?;
            bundle.policy_opt.step(&mut bundle.policy, &pgrad, hp.policy_lr)?;
            bundle.value_opt.step(&mut bundle.value, &vgrad, hp.value_lr)?;
            stats.policy_loss -= objective;
            stats.value_loss += value_loss;
            stats.entropy += entropy;
            batches += 1;
        }
    }
    if batches > 0 {
        let b = batches as f64;
        stats.policy_loss /= b;
        stats.value_loss /= b;
        stats.entropy /= b;
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub bundle: AgentBundle,
    /// Mean reward of each rollout.
    pub curve: Vec<f64>,
}

/// Train a fresh agent for `steps` environment steps. Deterministic in `seed`.
pub fn train(
    env: &mut PortfolioEnv,
    algo: Algo,
    hp: &Hyperparams,
    steps: usize,
    seed: u64,
) -> Result<TrainOutput> {
    let mut bundle = AgentBundle::new(env.state_dim(), env.n_assets, hp.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::new();
    let mut state = env.reset();
    let mut done_steps = 0;
    while done_steps < steps {
        let len = hp.rollout_len.max(1).min(steps - done_steps);
        let mut transitions = Vec::with_capacity(len);
        for _ in 0..len {
            let slot = env.cursor();
            let a = sample_action(
                &bundle.policy,
                &state,
                ActionMode::Dirichlet,
                hp.concentration,
                &mut rng,
            )?;
            let out = env.step(&a.weights.values)?;
            transitions.push(Transition {
                slot,
                state: std::mem::take(&mut state),
                action: a.weights.values,
                log_prob: a.log_prob,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
            });
            state = match out.next_state {
                Some(s) => s,
                None => env.reset(),
            };
        }
        done_steps += len;
        let traj = Trajectory {
            gamma: hp.gamma,
            transitions,
        };
        curve.push(traj.transitions.iter().map(|t| t.reward).sum::<f64>() / len as f64);
        match algo {
            Algo::A2c => a2c_update(&mut bundle, &traj)?,
            Algo::Ppo => ppo_update(&mut bundle, &traj, hp.ppo_epochs, &mut rng)?,
        };
    }
    Ok(TrainOutput { bundle, curve })
}

/// Per-slot log rewards of the mean policy over one full episode.
pub fn evaluate(bundle: &AgentBundle, env: &mut PortfolioEnv) -> Result<Vec<f64>> {
    let mut state = env.reset();
    let mut rewards = Vec::with_capacity(env.episode_len());
    loop {
        let w = bundle.mean_action(&state)?;
        let out = env.step(&w)?;
        rewards.push(out.reward);
        match out.next_state {
            Some(s) => state = s,
            None => break,
        }
    }
    env.reset();
    Ok(rewards)
}
