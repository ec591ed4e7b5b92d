//! Actor and critic trained only on imagined world-model rollouts.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{c, softmax_groups, Adam, Init, LossReport, Mlp, Params, Real, Tape, Var};
use crate::worldmodel::{row_entropies, sample_index, ModelState, WorldModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: String },
    #[error("imagination horizon must be at least 1")]
    EmptyHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: usize,
    pub unimix_ratio: f64,
    pub entropy_coef: f64,
    pub actor_lr: f64,
    pub actor_eps: f64,
    pub actor_grad_clip: f64,
    pub critic_lr: f64,
    pub critic_eps: f64,
    pub critic_grad_clip: f64,
    pub slow_fraction: f64,
    pub discount: f64,
    pub lambda: f64,
    pub horizon: usize,
    /// Probability of a uniformly random action during collection.
    pub epsilon: f64,
    /// Decay of the moving return-range estimate used to scale advantages.
    pub return_norm_decay: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            unimix_ratio: 0.01,
            entropy_coef: 3e-4,
            actor_lr: 3e-5,
            actor_eps: 1e-5,
            actor_grad_clip: 100.0,
            critic_lr: 3e-5,
            critic_eps: 1e-5,
            critic_grad_clip: 100.0,
            slow_fraction: 0.02,
            discount: 0.997,
            lambda: 0.95,
            horizon: 15,
            epsilon: 0.0,
            return_norm_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActMode {
    Greedy,
    Sample,
    /// Uniform action with probability `epsilon`, otherwise a sample.
    EpsilonGreedy(f64),
}

/// `H` imagined steps for a batch of lanes, indexed `[step][lane]`.
#[derive(Debug, Clone)]
pub struct ImaginedTrajectory<T: Real> {
    /// `H + 1` states; `states[0]` is the start.
    pub states: Vec<ModelState<T>>,
    pub actions: Vec<Vec<usize>>,
    /// Reward predicted at `states[i + 1]`.
    pub rewards: Vec<Vec<f64>>,
    /// Continue probability predicted at `states[i + 1]`.
    pub continues: Vec<Vec<f64>>,
    /// Entropy of the prior that generated `states[i + 1]`.
    pub prior_entropies: Vec<Vec<f64>>,
}

impl<T: Real> ImaginedTrajectory<T> {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn lanes(&self) -> usize {
        self.states[0].batch()
    }

    /// Stacked features of `states[from..to]`, rows `step * lanes + lane`.
    pub fn features(&self, from: usize, to: usize) -> Array2<T> {
        let feats: Vec<_> = self.states[from..to].iter().map(|s| s.feature()).collect();
        let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
        concatenate(Axis(0), &views).expect("same width")
    }
}

/// TD(λ) returns for one lane: `R_t = r_t + γ c_t ((1 − λ) V_{t+1} + λ R_{t+1})`
/// with `R_H = V_H`. `values` holds `V(s_0) ..= V(s_H)`.
pub fn lambda_returns(rewards: &[f64], continues: &[f64], values: &[f64], discount: f64, lambda: f64) -> Vec<f64> {
    let h = rewards.len();
    assert_eq!(continues.len(), h);
    assert_eq!(values.len(), h + 1);
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + discount * continues[t] * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ActorCritic<T: Real> {
    pub cfg: AgentConfig,
    pub num_actions: usize,
    pub actor_params: Params<T>,
    actor: Mlp,
    pub critic_params: Params<T>,
    critic: Mlp,
    pub slow_critic: Params<T>,
    actor_opt: Adam<T>,
    critic_opt: Adam<T>,
    /// Moving estimate of the 5th-95th percentile return range.
    pub return_range: Option<f64>,
}

impl<T: Real> ActorCritic<T> {
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, feature_dim: usize, num_actions: usize, rng: &mut R) -> Self {
        let u = cfg.hidden;
        let mut actor_params = Params::default();
        let actor = Mlp::new(&mut actor_params, "actor", &[feature_dim, u, u, num_actions], Init::Xavier(1.0), Init::Xavier(1.0), rng);
        let mut critic_params = Params::default();
        let critic = Mlp::new(&mut critic_params, "critic", &[feature_dim, u, u, 1], Init::Xavier(1.0), Init::Zeros, rng);
        let slow_critic = critic_params.clone();
        let actor_opt = Adam::new(&actor_params, cfg.actor_lr, cfg.actor_eps, Some(cfg.actor_grad_clip));
        let critic_opt = Adam::new(&critic_params, cfg.critic_lr, cfg.critic_eps, Some(cfg.critic_grad_clip));
        Self { cfg, num_actions, actor_params, actor, critic_params, critic, slow_critic, actor_opt, critic_opt, return_range: None }
    }

    /// Action probabilities per row, blended with a uniform component.
    pub fn probs(&self, feature: &Array2<T>) -> Array2<T> {
        let u = c::<T>(self.cfg.unimix_ratio);
        let floor = u / c::<T>(self.num_actions as f64);
        softmax_groups(&self.actor.forward(&self.actor_params, feature), self.num_actions).mapv(|p| (T::one() - u) * p + floor)
    }

    pub fn value(&self, feature: &Array2<T>) -> Array2<T> {
        self.critic.forward(&self.critic_params, feature)
    }

    pub fn slow_value(&self, feature: &Array2<T>) -> Array2<T> {
        self.critic.forward(&self.slow_critic, feature)
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &ModelState<T>, mode: ActMode, rng: &mut R) -> Vec<usize> {
        self.act_on_features(&state.feature(), mode, rng)
    }

    pub fn act_on_features<R: Rng + ?Sized>(&self, feature: &Array2<T>, mode: ActMode, rng: &mut R) -> Vec<usize> {
        let probs = self.probs(feature);
        probs
            .rows()
            .into_iter()
            .map(|row| {
                let p = row.as_slice().expect("row-major");
                match mode {
                    ActMode::Greedy => argmax(p),
                    ActMode::Sample => sample_index(p, rng),
                    ActMode::EpsilonGreedy(eps) => {
                        if rng.random::<f64>() < eps {
                            rng.random_range(0..self.num_actions)
                        } else {
                            sample_index(p, rng)
                        }
                    }
                }
            })
            .collect()
    }

    /// Rolls the world model forward `horizon` steps from `start`, sampling
    /// actions from the actor. `first` overrides the first action per lane.
    pub fn imagine_rollout<R: Rng + ?Sized>(
        &self,
        wm: &WorldModel<T>,
        start: &ModelState<T>,
        horizon: usize,
        first: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<ImaginedTrajectory<T>, AgentError> {
        if horizon == 0 {
            return Err(AgentError::EmptyHorizon);
        }
        let mut traj = ImaginedTrajectory {
            states: vec![start.clone()],
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            continues: Vec::with_capacity(horizon),
            prior_entropies: Vec::with_capacity(horizon),
        };
        let classes = wm.cfg.classes;
        for i in 0..horizon {
            let state = traj.states.last().expect("start");
            let actions = match (i, first) {
                (0, Some(a)) => a.to_vec(),
                _ => self.act(state, ActMode::Sample, rng),
            };
            let (next, prior) = wm.imagine_step(state, &wm.one_hot_actions(&actions), rng);
            let feat = next.feature();
            let col = |a: Array2<T>| a.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>();
            traj.rewards.push(col(wm.predict_reward(&feat)));
            traj.continues.push(col(wm.predict_continue(&feat)));
            traj.prior_entropies.push(row_entropies(&prior, classes));
            traj.actions.push(actions);
            traj.states.push(next);
        }
        Ok(traj)
    }

    /// λ-returns per lane bootstrapped from the slow critic, `[step][lane]`.
    pub fn returns(&self, traj: &ImaginedTrajectory<T>) -> Vec<Vec<f64>> {
        let (h, b) = (traj.horizon(), traj.lanes());
        let values = self.slow_value(&traj.features(0, h + 1));
        let mut out = vec![vec![0.0; b]; h];
        for lane in 0..b {
            let v: Vec<f64> = (0..=h).map(|t| values[[t * b + lane, 0]].to_f64().unwrap_or(f64::NAN)).collect();
            let r: Vec<f64> = (0..h).map(|t| traj.rewards[t][lane]).collect();
            let cont: Vec<f64> = (0..h).map(|t| traj.continues[t][lane]).collect();
            for (t, ret) in lambda_returns(&r, &cont, &v, self.cfg.discount, self.cfg.lambda).into_iter().enumerate() {
                out[t][lane] = ret;
            }
        }
        out
    }

    /// Policy-gradient loss on stacked rows:
    /// `-mean(w * (log pi(a) * adv + eta * H(pi)))`. Returns (loss, mean entropy).
    pub fn actor_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        features: &Array2<T>,
        actions: &[usize],
        advantages: &[f64],
        weights: &[f64],
    ) -> (Var, Var) {
        let n = actions.len();
        let a = self.num_actions;
        let u = self.cfg.unimix_ratio;
        let x = tape.constant(features.clone());
        let logits = self.actor.forward_t(tape, vars, x);
        let probs = tape.softmax(logits, a);
        let probs = tape.scale(probs, c(1.0 - u));
        let probs = tape.add_scalar(probs, c(u / a as f64));
        let logp = tape.ln(probs);
        let mut mask = Array2::zeros((n, a));
        for (r, &act) in actions.iter().enumerate() {
            mask[[r, act]] = T::one();
        }
        let mask = tape.constant(mask);
        let chosen = tape.mul(logp, mask);
        let chosen = tape.sum_cols(chosen);
        let plogp = tape.mul(probs, logp);
        let neg_ent = tape.sum_cols(plogp);
        let adv = tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| c(advantages[r])));
        let pg = tape.mul(chosen, adv);
        let bonus = tape.scale(neg_ent, c(-self.cfg.entropy_coef));
        let objective = tape.add(pg, bonus);
        let w = tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| c(weights[r])));
        let weighted = tape.mul(objective, w);
        let mean = tape.mean(weighted);
        let loss = tape.scale(mean, c(-1.0));
        let ent = tape.mean(neg_ent);
        let ent = tape.scale(ent, c(-1.0));
        (loss, ent)
    }

    /// One actor and one critic step on an imagined batch, then the slow
    /// critic moves toward the critic.
    pub fn update_actor_critic(&mut self, traj: &ImaginedTrajectory<T>) -> Result<LossReport, AgentError> {
        let (h, b) = (traj.horizon(), traj.lanes());
        let n = h * b;
        let returns = self.returns(traj);
        let features = traj.features(0, h);
        let values = self.value(&features);
        let slow = self.slow_value(&features);

        // Discount weights: w_0 = 1, w_t = prod_{i<t} gamma * c_i.
        let mut weights = vec![0.0; n];
        for lane in 0..b {
            let mut w = 1.0;
            for t in 0..h {
                weights[t * b + lane] = w;
                w *= self.cfg.discount * traj.continues[t][lane];
            }
        }
        let flat_returns: Vec<f64> = (0..n).map(|r| returns[r / b][r % b]).collect();
        let scale = self.update_return_range(&flat_returns).max(1.0);
        let advantages: Vec<f64> =
            (0..n).map(|r| (flat_returns[r] - values[[r, 0]].to_f64().unwrap_or(f64::NAN)) / scale).collect();
        let actions: Vec<usize> = (0..n).map(|r| traj.actions[r / b][r % b]).collect();

        let mut report = LossReport::default();

        let mut tape = Tape::new();
        let vars = tape.params(&self.actor_params, 0);
        let (actor_loss, entropy) = self.actor_loss_on_tape(&mut tape, &vars, &features, &actions, &advantages, &weights);
        let actor_value = tape.scalar(actor_loss).to_f64().unwrap_or(f64::NAN);
        if !actor_value.is_finite() {
            return Err(AgentError::NonFiniteLoss { term: "actor".into() });
        }
        let actor_grads = tape.backward(actor_loss, &[(0, &self.actor_params)]).remove(0);
        report.insert("actor", actor_value);
        report.insert("actor_entropy", tape.scalar(entropy).to_f64().unwrap_or(f64::NAN));

        let mut tape = Tape::new();
        let vars = tape.params(&self.critic_params, 0);
        let x = tape.constant(features);
        let v = self.critic.forward_t(&mut tape, &vars, x);
        let target = tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| c(flat_returns[r])));
        let slow_target = tape.constant(slow);
        let w = tape.constant(Array2::from_shape_fn((n, 1), |(r, _)| c(weights[r])));
        let d1 = tape.sub(v, target);
        let d1 = tape.square(d1);
        let d2 = tape.sub(v, slow_target);
        let d2 = tape.square(d2);
        let sq = tape.add(d1, d2);
        let sq = tape.mul(sq, w);
        let critic_loss = tape.mean(sq);
        let critic_loss = tape.scale(critic_loss, c(0.5));
        let critic_value = tape.scalar(critic_loss).to_f64().unwrap_or(f64::NAN);
        if !critic_value.is_finite() {
            return Err(AgentError::NonFiniteLoss { term: "critic".into() });
        }
        let critic_grads = tape.backward(critic_loss, &[(0, &self.critic_params)]).remove(0);
        if !crate::nn::grads_finite(&actor_grads) || !crate::nn::grads_finite(&critic_grads) {
            return Err(AgentError::NonFiniteLoss { term: "gradient".into() });
        }
        report.insert("critic", critic_value);
        report.insert("actor_grad_norm", self.actor_opt.step(&mut self.actor_params, &actor_grads));
        report.insert("critic_grad_norm", self.critic_opt.step(&mut self.critic_params, &critic_grads));
        self.slow_critic.ema_toward(&self.critic_params, c(self.cfg.slow_fraction));
        report.insert("return_mean", flat_returns.iter().sum::<f64>() / n as f64);
        report.insert("return_scale", scale);
        Ok(report)
    }

    fn update_return_range(&mut self, returns: &[f64]) -> f64 {
        let mut sorted = returns.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let range = percentile(&sorted, 0.95) - percentile(&sorted, 0.05);
        let d = self.cfg.return_norm_decay;
        let next = match self.return_range {
            None => range,
            Some(old) => d * old + (1.0 - d) * range,
        };
        self.return_range = Some(next);
        next
    }
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::WorldModelConfig;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_wm(rng: &mut ChaCha8Rng) -> WorldModel<f32> {
        let cfg = WorldModelConfig { obs_dim: 4, num_actions: 6, deter: 16, hidden: 16, embed: 16, groups: 4, classes: 4, ..Default::default() };
        WorldModel::new(cfg, rng)
    }

    fn random_features(n: usize, f: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
        Array2::from_shape_fn((n, f), |_| rng.random::<f32>() * 4.0 - 2.0)
    }

    #[test]
    fn greedy_is_deterministic_and_matches_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ac = ActorCritic::<f32>::new(AgentConfig { hidden: 16, ..Default::default() }, 10, 6, &mut rng);
        let feats = random_features(100, 10, &mut rng);
        let a = ac.act_on_features(&feats, ActMode::Greedy, &mut rng);
        let b = ac.act_on_features(&feats, ActMode::Greedy, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
        let probs = ac.probs(&feats);
        for (row, act) in probs.rows().into_iter().zip(&a) {
            let best = row.iter().cloned().fold(f32::MIN, f32::max);
            assert_eq!(row[*act], best);
        }
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ac = ActorCritic::<f32>::new(AgentConfig { hidden: 8, ..Default::default() }, 3, 6, &mut rng);
        // Skew the actor strongly so any leakage from it would show.
        for t in ac.actor_params.tensors.iter_mut() {
            t.mapv_inplace(|v| v * 20.0);
        }
        let feats = Array2::from_elem((1, 3), 1.0f32);
        let draws = 100_000;
        let mut counts = [0usize; 6];
        for _ in 0..draws {
            counts[ac.act_on_features(&feats, ActMode::EpsilonGreedy(1.0), &mut rng)[0]] += 1;
        }
        let p = 1.0 / 6.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for k in counts {
            assert!((k as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn rollout_shapes_and_entropy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wm = tiny_wm(&mut rng);
        let ac = ActorCritic::<f32>::new(AgentConfig { hidden: 16, ..Default::default() }, wm.cfg.feature_dim(), 6, &mut rng);
        let start = wm.init_state(3, &mut rng);
        let one = ac.imagine_rollout(&wm, &start, 1, None, &mut rng).unwrap();
        assert_eq!(one.actions.len(), 1);
        assert_eq!(one.prior_entropies.len(), 1);
        assert_eq!(one.states.len(), 2);
        let long = ac.imagine_rollout(&wm, &start, 15, Some(&[5, 5, 5]), &mut rng).unwrap();
        assert_eq!(long.actions[0], vec![5, 5, 5]);
        let max = wm.cfg.max_entropy();
        for e in long.prior_entropies.iter().flatten() {
            assert!((0.0..=max + 1e-6).contains(e));
        }
        assert!(long.continues.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
        assert!(matches!(ac.imagine_rollout(&wm, &start, 0, None, &mut rng), Err(AgentError::EmptyHorizon)));
    }

    #[test]
    fn rollouts_with_different_seeds_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wm = tiny_wm(&mut rng);
        let ac = ActorCritic::<f32>::new(AgentConfig { hidden: 16, ..Default::default() }, wm.cfg.feature_dim(), 6, &mut rng);
        let start = wm.init_state(1, &mut rng);
        let differing = (0..100u64)
            .filter(|&i| {
                let a = ac.imagine_rollout(&wm, &start, 15, None, &mut ChaCha8Rng::seed_from_u64(2 * i)).unwrap();
                let b = ac.imagine_rollout(&wm, &start, 15, None, &mut ChaCha8Rng::seed_from_u64(2 * i + 1)).unwrap();
                a.actions != b.actions
            })
            .count();
        assert!(differing >= 99, "{differing} of 100 pairs differ");
    }

    #[test]
    fn lambda_return_limits() {
        let one = lambda_returns(&[0.5], &[0.8], &[9.0, 2.0], 0.9, 0.0);
        assert!((one[0] - (0.5 + 0.9 * 0.8 * 2.0)).abs() < 1e-12);
        let myopic = lambda_returns(&[1.0, -2.0, 3.0], &[1.0, 1.0, 1.0], &[5.0, 5.0, 5.0, 5.0], 0.0, 0.95);
        assert_eq!(myopic, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn lambda_returns_match_n_step_mixture() {
        // Weighted mixture of n-step returns, evaluated independently.
        let got = lambda_returns(&[1.0, -0.5, 2.0], &[0.9, 0.8, 1.0], &[0.3, 0.7, -0.2, 1.5], 0.99, 0.95);
        let want = [2.8207445113, 2.114194, 3.485];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{got:?}");
        }
    }

    proptest! {
        #[test]
        fn returns_ignore_steps_after_termination(
            rewards in prop::collection::vec(-5.0f64..5.0, 1..8),
            values in prop::collection::vec(-5.0f64..5.0, 9),
            extra in 1usize..5,
            gamma in 0.0f64..1.0,
            lambda in 0.0f64..1.0,
        ) {
            let h = rewards.len();
            let mut conts = vec![1.0; h];
            conts[h - 1] = 0.0;
            let base = lambda_returns(&rewards, &conts, &values[..=h], gamma, lambda);
            let mut r2 = rewards.clone();
            r2.extend(std::iter::repeat_n(0.0, extra));
            let mut c2 = conts.clone();
            c2.extend(std::iter::repeat_n(0.0, extra));
            let v2: Vec<f64> = (0..=h + extra).map(|i| values[i % values.len()]).collect();
            let longer = lambda_returns(&r2, &c2, &v2, gamma, lambda);
            for t in 0..h {
                prop_assert!((base[t] - longer[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ac = ActorCritic::<f64>::new(AgentConfig { hidden: 6, entropy_coef: 0.05, ..Default::default() }, 5, 4, &mut rng);
        let n = 7;
        let feats = Array2::from_shape_fn((n, 5), |_| rng.random::<f64>() * 2.0 - 1.0);
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let loss_of = |params: &Params<f64>| {
            let mut probe = ac.clone();
            probe.actor_params = params.clone();
            let mut tape = Tape::new();
            let vars = tape.params(&probe.actor_params, 0);
            let (l, _) = probe.actor_loss_on_tape(&mut tape, &vars, &feats, &actions, &adv, &w);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let vars = tape.params(&ac.actor_params, 0);
        let (l, _) = ac.actor_loss_on_tape(&mut tape, &vars, &feats, &actions, &adv, &w);
        let grads = tape.backward(l, &[(0, &ac.actor_params)]).remove(0);
        let mut params = ac.actor_params.clone();
        for i in 0..params.tensors.len() {
            let (rows, cols) = params[i].dim();
            for r in 0..rows {
                for col in 0..cols {
                    let orig = params[i][[r, col]];
                    params.tensors[i][[r, col]] = orig + 1e-6;
                    let up = loss_of(&params);
                    params.tensors[i][[r, col]] = orig - 1e-6;
                    let down = loss_of(&params);
                    params.tensors[i][[r, col]] = orig;
                    let numeric = (up - down) / 2e-6;
                    let analytic = grads[i][[r, col]];
                    let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-4);
                    assert!(rel < 1e-3, "{} [{r},{col}] numeric {numeric} analytic {analytic}", params.names[i]);
                }
            }
        }
    }

    #[test]
    fn slow_critic_tracks_critic_by_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wm = tiny_wm(&mut rng);
        let mut ac = ActorCritic::<f32>::new(AgentConfig { hidden: 16, ..Default::default() }, wm.cfg.feature_dim(), 6, &mut rng);
        // Start the slow copy away from the critic so the blend is visible.
        for t in ac.slow_critic.tensors.iter_mut() {
            t.mapv_inplace(|v| v + 0.5);
        }
        let start = wm.init_state(4, &mut rng);
        let traj = ac.imagine_rollout(&wm, &start, 5, None, &mut rng).unwrap();
        let old_slow = ac.slow_critic.clone();
        let report = ac.update_actor_critic(&traj).unwrap();
        assert!(report.all_finite());
        for ((s, o), n) in ac.slow_critic.tensors.iter().zip(&old_slow.tensors).zip(&ac.critic_params.tensors) {
            for ((s, o), n) in s.iter().zip(o).zip(n) {
                assert!((s - (0.98 * o + 0.02 * n)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn percentile_interpolates() {
        let xs: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((percentile(&xs, 0.95) - 9.5).abs() < 1e-12);
        assert!((percentile(&xs, 0.05) - 0.5).abs() < 1e-12);
        assert_eq!(argmax(&[1, 3, 3, 2]), 1);
    }
}
