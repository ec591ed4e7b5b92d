//! PPO meta-policy deciding at every step whether to replan or keep
//! following the current plan.
//!
//! The policy picks `p` from a five-point grid and replans when a uniform
//! draw falls below `p²`. It is trained on windowed returns of base reward
//! plus prior entropy.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{c, softmax_groups, Adam, Init, LossReport, Mlp, Params, Real, Tape, Var};
use crate::worldmodel::sample_index;

/// Replan-probability grid the policy chooses from.
pub const P_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Version of the [`MetaObservation::to_vec`] field order.
pub const OBS_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("window has {got} steps, need {need} and the episode has not ended")]
    ShortWindow { got: usize, need: usize },
    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: String },
    #[error("buffer holds {have} ready transitions, need {need}")]
    NotEnoughData { have: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaObservation {
    pub embedding: Vec<f64>,
    pub feature: Vec<f64>,
    pub step_normalized: f64,
    /// One-hot of the actor's proposed action.
    pub greedy_action: Vec<f64>,
    pub plan_position: f64,
    pub in_plan: bool,
    /// Feature predicted at the end of the current plan; zeros without one.
    pub final_feature: Vec<f64>,
}

impl MetaObservation {
    pub fn dim(embed: usize, feature: usize, actions: usize) -> usize {
        embed + feature + 1 + actions + 2 + feature
    }

    /// Flattens in the fixed order: embedding, feature, step, greedy action,
    /// plan position, in-plan flag, final feature.
    pub fn to_vec(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.embedding.len() + 2 * self.feature.len() + self.greedy_action.len() + 3);
        out.extend(self.embedding.iter().map(|&v| v as f32));
        out.extend(self.feature.iter().map(|&v| v as f32));
        out.push(self.step_normalized as f32);
        out.extend(self.greedy_action.iter().map(|&v| v as f32));
        out.push(self.plan_position as f32);
        out.push(if self.in_plan { 1.0 } else { 0.0 });
        out.extend(self.final_feature.iter().map(|&v| v as f32));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTransition {
    /// Flattened [`MetaObservation`].
    pub obs: Vec<f32>,
    pub action: usize,
    pub log_prob: f64,
    /// Whether a replan actually happened at this step.
    pub implemented: bool,
    pub step_entropy: f64,
    pub next_base_reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub hidden: usize,
    pub lr: f64,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub num_epochs: usize,
    pub sub_batch_size: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub buffer_size: usize,
    pub buffer_minimum: usize,
    pub train_every: usize,
    /// Meta-reward window length `L`.
    pub seq_length: usize,
    pub reward_multiplier: f64,
    pub entropy_multiplier: f64,
    /// Added to the output bias at init, one entry per grid point.
    pub initial_logit_bias: [f64; 5],
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            lr: 0.003,
            clip_epsilon: 0.2,
            entropy_coef: 0.1,
            num_epochs: 30,
            sub_batch_size: 64,
            gamma: 0.99,
            lambda: 0.95,
            buffer_size: 32768,
            buffer_minimum: 512,
            train_every: 32,
            seq_length: 8,
            reward_multiplier: 1.0,
            entropy_multiplier: 1.0,
            initial_logit_bias: [0.0, 1.0, 1.0, 1.0, 0.0],
        }
    }
}

/// Whether a draw `u` triggers a replan at grid point `p_index`: `u < p²`.
pub fn replan_given(p_index: usize, u: f64) -> bool {
    u < P_GRID[p_index] * P_GRID[p_index]
}

/// `(L / 2) · Σ (reward_mult · r + entropy_mult · H)` over `t..=t+L`.
///
/// `window` holds `(base_reward, prior_entropy)` from step `t` on. A window
/// shorter than `L + 1` is accepted only when the episode ended inside it.
pub fn meta_reward(
    window: &[(f64, f64)],
    seq_length: usize,
    episode_done: bool,
    reward_multiplier: f64,
    entropy_multiplier: f64,
) -> Result<f64, MetaError> {
    let need = seq_length + 1;
    if window.len() < need && !episode_done {
        return Err(MetaError::ShortWindow { got: window.len(), need });
    }
    let total: f64 = window.iter().take(need).map(|(r, h)| reward_multiplier * r + entropy_multiplier * h).sum();
    Ok(seq_length as f64 / 2.0 * total)
}

/// GAE over a contiguous sequence. `values` has one extra entry used to
/// bootstrap the last step. Returns (advantages, value targets).
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n + 1);
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaDecision {
    pub p_index: usize,
    pub replan: bool,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MetaPolicy<T: Real> {
    pub cfg: MetaConfig,
    pub obs_dim: usize,
    pub actor_params: Params<T>,
    actor: Mlp,
    pub critic_params: Params<T>,
    critic: Mlp,
    actor_opt: Adam<T>,
    critic_opt: Adam<T>,
}

impl<T: Real> MetaPolicy<T> {
    pub fn new<R: Rng + ?Sized>(cfg: MetaConfig, obs_dim: usize, rng: &mut R) -> Self {
        let u = cfg.hidden;
        let mut actor_params = Params::default();
        let actor = Mlp::new(&mut actor_params, "meta_actor", &[obs_dim, u, u, P_GRID.len()], Init::He, Init::Xavier(0.01), rng);
        let bias = actor.output_layer().b;
        for (k, b) in cfg.initial_logit_bias.iter().enumerate() {
            actor_params.tensors[bias][[0, k]] += c::<T>(*b);
        }
        let mut critic_params = Params::default();
        let critic = Mlp::new(&mut critic_params, "meta_critic", &[obs_dim, u, u, 1], Init::He, Init::Xavier(0.01), rng);
        let actor_opt = Adam::new(&actor_params, cfg.lr, 1e-8, None);
        let critic_opt = Adam::new(&critic_params, cfg.lr, 1e-8, None);
        Self { cfg, obs_dim, actor_params, actor, critic_params, critic, actor_opt, critic_opt }
    }

    pub fn probs(&self, obs: &Array2<T>) -> Array2<T> {
        softmax_groups(&self.actor.forward(&self.actor_params, obs), P_GRID.len())
    }

    pub fn value(&self, obs: &Array2<T>) -> Array2<T> {
        self.critic.forward(&self.critic_params, obs)
    }

    pub fn decide<R: Rng + ?Sized>(&self, obs: &[f32], rng: &mut R) -> MetaDecision {
        let x = Array2::from_shape_fn((1, obs.len()), |(_, j)| c::<T>(f64::from(obs[j])));
        let probs = self.probs(&x);
        let p: Vec<f64> = probs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let p_index = sample_index(&p, rng);
        let u: f64 = rng.random();
        MetaDecision { p_index, replan: replan_given(p_index, u), log_prob: p[p_index].ln() }
    }

    /// Clipped-surrogate actor loss with entropy bonus on stacked rows.
    /// Returns (loss, mean entropy).
    pub fn actor_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        obs: &Array2<T>,
        actions: &[usize],
        old_log_probs: &[f64],
        advantages: &[f64],
    ) -> (Var, Var) {
        let n = actions.len();
        let k = P_GRID.len();
        let eps = self.cfg.clip_epsilon;
        let x = tape.constant(obs.clone());
        let logits = self.actor.forward_t(tape, vars, x);
        let probs = tape.softmax(logits, k);
        let logp = tape.ln(probs);
        let mut mask = Array2::zeros((n, k));
        for (r, &a) in actions.iter().enumerate() {
            mask[[r, a]] = T::one();
        }
        let mask = tape.constant(mask);
        let chosen = tape.mul(logp, mask);
        let chosen = tape.sum_cols(chosen);
        let old = tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| c(old_log_probs[r])));
        let log_ratio = tape.sub(chosen, old);
        let ratio = tape.exp(log_ratio);
        let adv = tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| c(advantages[r])));
        let unclipped = tape.mul(ratio, adv);
        let clipped = tape.clamp(ratio, c(1.0 - eps), c(1.0 + eps));
        let clipped = tape.mul(clipped, adv);
        let surrogate = tape.minimum(unclipped, clipped);
        let surrogate = tape.mean(surrogate);
        let plogp = tape.mul(probs, logp);
        let neg_ent = tape.sum_cols(plogp);
        let neg_ent = tape.mean(neg_ent);
        let bonus = tape.scale(neg_ent, c(self.cfg.entropy_coef));
        let neg_surrogate = tape.scale(surrogate, c(-1.0));
        let loss = tape.add(neg_surrogate, bonus);
        let entropy = tape.scale(neg_ent, c(-1.0));
        (loss, entropy)
    }

    /// PPO on the given transitions: several epochs of shuffled sub-batches.
    pub fn ppo_update<R: Rng + ?Sized>(&mut self, batch: &PpoBatch, rng: &mut R) -> Result<LossReport, MetaError> {
        let n = batch.actions.len();
        let mut order: Vec<usize> = (0..n).collect();
        let (mut actor_sum, mut critic_sum, mut ent_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..self.cfg.num_epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.cfg.sub_batch_size.max(1)) {
                let obs = Array2::from_shape_fn((chunk.len(), self.obs_dim), |(r, j)| c::<T>(f64::from(batch.obs[chunk[r]][j])));
                let actions: Vec<usize> = chunk.iter().map(|&i| batch.actions[i]).collect();
                let old: Vec<f64> = chunk.iter().map(|&i| batch.old_log_probs[i]).collect();
                let adv: Vec<f64> = chunk.iter().map(|&i| batch.advantages[i]).collect();

                let mut tape = Tape::new();
                let vars = tape.params(&self.actor_params, 0);
                let (loss, entropy) = self.actor_loss_on_tape(&mut tape, &vars, &obs, &actions, &old, &adv);
                let actor_loss = tape.scalar(loss).to_f64().unwrap_or(f64::NAN);
                if !actor_loss.is_finite() {
                    return Err(MetaError::NonFiniteLoss { term: "meta_actor".into() });
                }
                let grads = tape.backward(loss, &[(0, &self.actor_params)]).remove(0);
                ent_sum += tape.scalar(entropy).to_f64().unwrap_or(f64::NAN);

                let mut ctape = Tape::new();
                let cvars = ctape.params(&self.critic_params, 0);
                let x = ctape.constant(obs);
                let v = self.critic.forward_t(&mut ctape, &cvars, x);
                let target = ctape.constant(Array2::from_shape_fn((chunk.len(), 1), |(r, _)| c(batch.value_targets[chunk[r]])));
                let d = ctape.sub(v, target);
                let sq = ctape.square(d);
                let closs = ctape.mean(sq);
                let critic_loss = ctape.scalar(closs).to_f64().unwrap_or(f64::NAN);
                if !critic_loss.is_finite() {
                    return Err(MetaError::NonFiniteLoss { term: "meta_critic".into() });
                }
                let cgrads = ctape.backward(closs, &[(0, &self.critic_params)]).remove(0);
                if !crate::nn::grads_finite(&grads) || !crate::nn::grads_finite(&cgrads) {
                    return Err(MetaError::NonFiniteLoss { term: "meta_gradient".into() });
                }
                self.actor_opt.step(&mut self.actor_params, &grads);
                self.critic_opt.step(&mut self.critic_params, &cgrads);
                actor_sum += actor_loss;
                critic_sum += critic_loss;
                count += 1;
            }
        }
        let mut report = LossReport::default();
        let count = count.max(1) as f64;
        report.insert("meta_actor", actor_sum / count);
        report.insert("meta_critic", critic_sum / count);
        report.insert("meta_entropy", ent_sum / count);
        report.insert("meta_return_mean", batch.meta_rewards.iter().sum::<f64>() / n.max(1) as f64);
        Ok(report)
    }

    /// Builds a PPO batch from the most recent `count` ready transitions:
    /// meta rewards, GAE advantages (normalized) and value targets.
    pub fn prepare_batch(&self, buffer: &MetaBuffer, count: usize) -> Result<PpoBatch, MetaError> {
        let ready = buffer.ready_len(self.cfg.seq_length);
        if ready < count || count == 0 {
            return Err(MetaError::NotEnoughData { have: ready, need: count.max(1) });
        }
        let start = ready - count;
        let items: Vec<&MetaTransition> = buffer.items.range(start..ready).collect();
        let rewards: Vec<f64> = (start..ready)
            .map(|i| {
                let (window, done) = buffer.window(i, self.cfg.seq_length);
                meta_reward(&window, self.cfg.seq_length, done, self.cfg.reward_multiplier, self.cfg.entropy_multiplier)
            })
            .collect::<Result<_, _>>()?;
        // Values for every item plus the observation after the last one.
        let mut obs_rows: Vec<&[f32]> = items.iter().map(|t| t.obs.as_slice()).collect();
        let bootstrap = buffer.items.get(ready).map(|t| t.obs.as_slice());
        obs_rows.push(bootstrap.unwrap_or(items[count - 1].obs.as_slice()));
        let x = Array2::from_shape_fn((obs_rows.len(), self.obs_dim), |(r, j)| c::<T>(f64::from(obs_rows[r][j])));
        let mut values: Vec<f64> = self.value(&x).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        if bootstrap.is_none() {
            values[count] = 0.0;
        }
        let dones: Vec<bool> = items.iter().map(|t| t.done).collect();
        let (adv, targets) = compute_gae(&rewards, &values, &dones, self.cfg.gamma, self.cfg.lambda);
        let mean = adv.iter().sum::<f64>() / count as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / count as f64).sqrt();
        let advantages = adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect();
        Ok(PpoBatch {
            obs: items.iter().map(|t| t.obs.clone()).collect(),
            actions: items.iter().map(|t| t.action).collect(),
            old_log_probs: items.iter().map(|t| t.log_prob).collect(),
            advantages,
            value_targets: targets,
            meta_rewards: rewards,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub obs: Vec<Vec<f32>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub meta_rewards: Vec<f64>,
}

/// FIFO store of meta transitions in collection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaBuffer {
    pub capacity: usize,
    pub items: VecDeque<MetaTransition>,
}

impl MetaBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: MetaTransition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// `(reward, entropy)` pairs from `i` up to `L + 1` steps, stopping after
    /// a done. The flag reports whether a done was reached.
    pub fn window(&self, i: usize, seq_length: usize) -> (Vec<(f64, f64)>, bool) {
        let mut out = Vec::with_capacity(seq_length + 1);
        for t in self.items.range(i..).take(seq_length + 1) {
            out.push((t.next_base_reward, t.step_entropy));
            if t.done {
                return (out, true);
            }
        }
        (out, false)
    }

    /// Number of leading transitions whose meta-reward window is complete.
    pub fn ready_len(&self, seq_length: usize) -> usize {
        let n = self.items.len();
        // Everything up to the last `L` items is complete; of those trailing
        // items only the ones followed by a done inside the buffer are.
        let mut ready = n.saturating_sub(seq_length);
        let mut last_done = None;
        for i in (ready..n).rev() {
            if self.items[i].done {
                last_done = Some(i);
                break;
            }
        }
        if let Some(d) = last_done {
            ready = ready.max(d + 1);
        }
        ready
    }
}

/// Per-episode mean replan probability `E[p²]` and mean number of steps
/// between consecutive replans, from transitions alone.
pub fn replan_metrics(transitions: &[MetaTransition]) -> (f64, Option<f64>) {
    if transitions.is_empty() {
        return (0.0, None);
    }
    let mean_p = transitions.iter().map(|t| P_GRID[t.action] * P_GRID[t.action]).sum::<f64>() / transitions.len() as f64;
    let replans: Vec<usize> = transitions.iter().enumerate().filter(|(_, t)| t.implemented).map(|(i, _)| i).collect();
    let gaps: Vec<usize> = replans.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_len = (!gaps.is_empty()).then(|| gaps.iter().sum::<usize>() as f64 / gaps.len() as f64);
    (mean_p, mean_len)
}
