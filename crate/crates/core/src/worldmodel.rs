//! Grouped-categorical recurrent state-space model.
//!
//! The deterministic state `h` is advanced by a gated recurrent cell from the
//! previous `(h, z, action)`. From `h` alone the model predicts a prior over
//! the stochastic latent `z`; after seeing an observation it forms a
//! posterior. Both are `G` independent `K`-way categoricals blended with a
//! small uniform component. Reward, continue and observation heads read the
//! feature `[h, z]`.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distmath::{self, GroupedCategorical};
use crate::nn::{c, sigmoid, softmax_groups, GruCell, Init, Linear, LossReport, Mlp, Params, Real, Tape, Var};
use crate::nn::Adam;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldModelError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub num_actions: usize,
    /// Recurrent state width `D`.
    pub deter: usize,
    /// Hidden width of every MLP.
    pub hidden: usize,
    /// Encoder output width.
    pub embed: usize,
    /// Latent groups `G`.
    pub groups: usize,
    /// Classes per group `K`.
    pub classes: usize,
    pub unimix_ratio: f64,
    pub dyn_scale: f64,
    pub rep_scale: f64,
    pub kl_free: f64,
    pub lr: f64,
    pub opt_eps: f64,
    pub grad_clip: f64,
    /// Feed latent probabilities instead of straight-through samples. Only
    /// used to verify gradients against finite differences: with sampled
    /// one-hots the forward pass is piecewise constant in the parameters.
    #[serde(default)]
    pub relaxed_latents: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            obs_dim: 1,
            num_actions: 1,
            deter: 128,
            hidden: 128,
            embed: 128,
            groups: 8,
            classes: 8,
            unimix_ratio: 0.01,
            dyn_scale: 0.5,
            rep_scale: 0.1,
            kl_free: 1.0,
            lr: 1e-4,
            opt_eps: 1e-8,
            grad_clip: 1000.0,
            relaxed_latents: false,
        }
    }
}

impl WorldModelConfig {
    pub fn stoch(&self) -> usize {
        self.groups * self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.deter + self.stoch()
    }

    pub fn max_entropy(&self) -> f64 {
        self.groups as f64 * (self.classes as f64).ln()
    }
}

/// A batch of model states, one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ModelState<T: Real> {
    pub h: Array2<T>,
    /// One-hot per group, group-major.
    pub z: Array2<T>,
}

impl<T: Real> ModelState<T> {
    pub fn batch(&self) -> usize {
        self.h.nrows()
    }

    pub fn row(&self, i: usize) -> ModelState<T> {
        ModelState { h: self.h.slice(s![i..i + 1, ..]).to_owned(), z: self.z.slice(s![i..i + 1, ..]).to_owned() }
    }

    /// Repeats a single-row state `n` times.
    pub fn broadcast(&self, n: usize) -> ModelState<T> {
        let rep = |a: &Array2<T>| {
            let row = a.row(0);
            Array2::from_shape_fn((n, a.ncols()), |(_, j)| row[j])
        };
        ModelState { h: rep(&self.h), z: rep(&self.z) }
    }

    /// `[h, z]` per row.
    pub fn feature(&self) -> Array2<T> {
        concatenate(Axis(1), &[self.h.view(), self.z.view()]).expect("same batch")
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|v| v.is_finite())
    }
}

/// Prior and posterior latent probabilities for a batch, after unimix.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPosteriorPair<T: Real> {
    pub prior: Array2<T>,
    pub posterior: Array2<T>,
}

impl<T: Real> PriorPosteriorPair<T> {
    pub fn prior_dist(&self, row: usize, groups: usize, classes: usize) -> GroupedCategorical {
        to_dist(&self.prior, row, groups, classes)
    }

    pub fn posterior_dist(&self, row: usize, groups: usize, classes: usize) -> GroupedCategorical {
        to_dist(&self.posterior, row, groups, classes)
    }
}

pub fn to_dist<T: Real>(probs: &Array2<T>, row: usize, groups: usize, classes: usize) -> GroupedCategorical {
    let r = probs.row(row);
    GroupedCategorical::normalized(groups, classes, r.as_slice().expect("row-major")).expect("model probabilities")
}

/// Per-row entropies of a batch of grouped probability rows.
pub fn row_entropies<T: Real>(probs: &Array2<T>, classes: usize) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .map(|r| distmath::grouped_entropy(r.as_slice().expect("row-major"), classes).to_f64().unwrap_or(f64::NAN))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T: Real> {
    pub reward: Array2<T>,
    pub cont: Array2<T>,
    pub obs_recon: Array2<T>,
}

/// Time-major sequence batch: row `t * batch + b` holds step `t` of lane `b`.
///
/// `actions[t]` is the action that led to `obs[t]`; `firsts[t] = 1` marks an
/// episode start, where the model resets to its initial state and ignores
/// the action.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T: Real> {
    pub steps: usize,
    pub batch: usize,
    pub obs: Array2<T>,
    pub actions: Array2<T>,
    pub rewards: Array2<T>,
    pub conts: Array2<T>,
    pub firsts: Array2<T>,
}

impl<T: Real> SequenceBatch<T> {
    fn rows(&self, t: usize) -> std::ops::Range<usize> {
        t * self.batch..(t + 1) * self.batch
    }
}

/// Everything a training step produced besides the loss numbers.
#[derive(Debug, Clone)]
pub struct TrainOutput<T: Real> {
    pub report: LossReport,
    /// Posterior states of every step, time-major like the batch.
    pub posterior_states: ModelState<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct WorldModel<T: Real> {
    pub cfg: WorldModelConfig,
    pub params: Params<T>,
    encoder: Mlp,
    img_in: Linear,
    gru: GruCell,
    prior_head: Mlp,
    posterior_head: Mlp,
    decoder: Mlp,
    reward_head: Mlp,
    cont_head: Mlp,
    init_h: usize,
    pub opt: Adam<T>,
}

impl<T: Real> WorldModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: WorldModelConfig, rng: &mut R) -> Self {
        let mut p = Params::default();
        let (d, u, e, st, f) = (cfg.deter, cfg.hidden, cfg.embed, cfg.stoch(), cfg.feature_dim());
        let x1 = Init::Xavier(1.0);
        // Small latent-head outputs start both distributions near uniform.
        let small = Init::Xavier(0.01);
        let encoder = Mlp::new(&mut p, "encoder", &[cfg.obs_dim, u, e], x1, x1, rng);
        let img_in = Linear::new(&mut p, "img_in", st + cfg.num_actions, u, x1, rng);
        let gru = GruCell::new(&mut p, "gru", u, d, rng);
        let prior_head = Mlp::new(&mut p, "prior", &[d, u, st], x1, small, rng);
        let posterior_head = Mlp::new(&mut p, "posterior", &[d + e, u, st], x1, small, rng);
        let decoder = Mlp::new(&mut p, "decoder", &[f, u, cfg.obs_dim], x1, x1, rng);
        let reward_head = Mlp::new(&mut p, "reward", &[f, u, 1], x1, Init::Zeros, rng);
        let cont_head = Mlp::new(&mut p, "cont", &[f, u, 1], x1, x1, rng);
        let init_h = p.add("initial.h", Array2::zeros((1, d)));
        let opt = Adam::new(&p, cfg.lr, cfg.opt_eps, Some(cfg.grad_clip));
        Self { cfg, params: p, encoder, img_in, gru, prior_head, posterior_head, decoder, reward_head, cont_head, init_h, opt }
    }

    fn unimix(&self, logits: &Array2<T>) -> Array2<T> {
        let u = c::<T>(self.cfg.unimix_ratio);
        let floor = u / c::<T>(self.cfg.classes as f64);
        softmax_groups(logits, self.cfg.classes).mapv(|p| (T::one() - u) * p + floor)
    }

    pub fn prior_probs(&self, h: &Array2<T>) -> Array2<T> {
        self.unimix(&self.prior_head.forward(&self.params, h))
    }

    pub fn embed(&self, obs: &Array2<T>) -> Array2<T> {
        self.encoder.forward(&self.params, obs)
    }

    pub fn posterior_probs(&self, h: &Array2<T>, embed: &Array2<T>) -> Array2<T> {
        let x = concatenate(Axis(1), &[h.view(), embed.view()]).expect("same batch");
        self.unimix(&self.posterior_head.forward(&self.params, &x))
    }

    fn initial_h(&self, batch: usize) -> Array2<T> {
        let h0 = self.params[self.init_h].mapv(T::tanh);
        Array2::from_shape_fn((batch, self.cfg.deter), |(_, j)| h0[[0, j]])
    }

    /// The learned initial state for `batch` lanes, `z` sampled from the
    /// prior at the initial `h`.
    pub fn init_state<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> ModelState<T> {
        let h = self.initial_h(batch);
        let prior = self.prior_probs(&h);
        let z = sample_one_hot(&prior, self.cfg.classes, rng);
        ModelState { h, z }
    }

    pub fn one_hot_actions(&self, actions: &[usize]) -> Array2<T> {
        one_hot(actions, self.cfg.num_actions)
    }

    /// `h' = f(h, z, a)`.
    pub fn recurrent(&self, state: &ModelState<T>, actions: &Array2<T>) -> Array2<T> {
        let za = concatenate(Axis(1), &[state.z.view(), actions.view()]).expect("same batch");
        let mut x = self.img_in.forward(&self.params, &za);
        x.mapv_inplace(crate::nn::silu);
        self.gru.forward(&self.params, &x, &state.h)
    }

    /// Advances with an observation: prior from `h'`, posterior from
    /// `(h', obs)`, next `z` sampled from the posterior.
    pub fn observe_step<R: Rng + ?Sized>(
        &self,
        state: &ModelState<T>,
        actions: &Array2<T>,
        obs: &Array2<T>,
        rng: &mut R,
    ) -> Result<(ModelState<T>, PriorPosteriorPair<T>), WorldModelError> {
        self.check(state, actions)?;
        if obs.ncols() != self.cfg.obs_dim {
            return Err(WorldModelError::ShapeMismatch { what: "observation", expected: self.cfg.obs_dim, got: obs.ncols() });
        }
        if obs.nrows() != state.batch() {
            return Err(WorldModelError::ShapeMismatch { what: "observation rows", expected: state.batch(), got: obs.nrows() });
        }
        let h = self.recurrent(state, actions);
        let prior = self.prior_probs(&h);
        let posterior = self.posterior_probs(&h, &self.embed(obs));
        let z = sample_one_hot(&posterior, self.cfg.classes, rng);
        Ok((ModelState { h, z }, PriorPosteriorPair { prior, posterior }))
    }

    /// Observes the first frame of an episode from the initial state.
    pub fn observe_first<R: Rng + ?Sized>(
        &self,
        obs: &Array2<T>,
        rng: &mut R,
    ) -> Result<(ModelState<T>, PriorPosteriorPair<T>), WorldModelError> {
        let state = self.init_state(obs.nrows(), rng);
        let none = Array2::zeros((obs.nrows(), self.cfg.num_actions));
        self.observe_step(&state, &none, obs, rng)
    }

    /// Advances without an observation; `z'` comes from the prior.
    pub fn imagine_step<R: Rng + ?Sized>(
        &self,
        state: &ModelState<T>,
        actions: &Array2<T>,
        rng: &mut R,
    ) -> (ModelState<T>, Array2<T>) {
        let h = self.recurrent(state, actions);
        let prior = self.prior_probs(&h);
        let z = sample_one_hot(&prior, self.cfg.classes, rng);
        (ModelState { h, z }, prior)
    }

    pub fn predict_reward(&self, feature: &Array2<T>) -> Array2<T> {
        self.reward_head.forward(&self.params, feature)
    }

    pub fn predict_continue(&self, feature: &Array2<T>) -> Array2<T> {
        self.cont_head.forward(&self.params, feature).mapv(sigmoid)
    }

    pub fn predict_heads(&self, state: &ModelState<T>) -> HeadOutputs<T> {
        let f = state.feature();
        HeadOutputs {
            reward: self.predict_reward(&f),
            cont: self.predict_continue(&f),
            obs_recon: self.decoder.forward(&self.params, &f),
        }
    }

    fn check(&self, state: &ModelState<T>, actions: &Array2<T>) -> Result<(), WorldModelError> {
        if state.h.ncols() != self.cfg.deter {
            return Err(WorldModelError::ShapeMismatch { what: "deterministic state", expected: self.cfg.deter, got: state.h.ncols() });
        }
        if state.z.ncols() != self.cfg.stoch() {
            return Err(WorldModelError::ShapeMismatch { what: "latent", expected: self.cfg.stoch(), got: state.z.ncols() });
        }
        if actions.ncols() != self.cfg.num_actions {
            return Err(WorldModelError::ShapeMismatch { what: "action", expected: self.cfg.num_actions, got: actions.ncols() });
        }
        Ok(())
    }

    fn unimix_t(&self, tape: &mut Tape<T>, logits: Var) -> Var {
        let u = self.cfg.unimix_ratio;
        let probs = tape.softmax(logits, self.cfg.classes);
        let probs = tape.scale(probs, c(1.0 - u));
        tape.add_scalar(probs, c(u / self.cfg.classes as f64))
    }

    /// Builds the full training loss on `tape`. Returns the total loss var,
    /// the per-term report and the posterior states.
    pub fn loss_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &SequenceBatch<T>,
        rng: &mut R,
    ) -> Result<(Var, LossReport, ModelState<T>), WorldModelError> {
        let cfg = &self.cfg;
        let (b, steps) = (batch.batch, batch.steps);
        if batch.obs.ncols() != cfg.obs_dim {
            return Err(WorldModelError::ShapeMismatch { what: "observation", expected: cfg.obs_dim, got: batch.obs.ncols() });
        }
        if batch.actions.ncols() != cfg.num_actions {
            return Err(WorldModelError::ShapeMismatch { what: "action", expected: cfg.num_actions, got: batch.actions.ncols() });
        }
        if batch.obs.nrows() != b * steps {
            return Err(WorldModelError::ShapeMismatch { what: "sequence rows", expected: b * steps, got: batch.obs.nrows() });
        }

        let obs = tape.constant(batch.obs.clone());
        let embed_all = self.encoder.forward_t(tape, vars, obs);

        // Learned initial state, broadcast over lanes.
        let ones = tape.constant(Array2::ones((b, 1)));
        let h0 = tape.tanh(vars[self.init_h]);
        let h_init = tape.matmul(ones, h0);
        let prior_init = self.prior_head.forward_t(tape, vars, h_init);
        let prior_init = self.unimix_t(tape, prior_init);
        let z_init = self.latent_t(tape, prior_init, rng);

        let mut h = h_init;
        let mut z = z_init;
        let (mut feats, mut priors, mut posts) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
        for t in 0..steps {
            let rows = batch.rows(t);
            let first = batch.firsts.slice(s![rows.clone(), ..]).to_owned();
            let keep = first.mapv(|f| T::one() - f);
            let action = batch.actions.slice(s![rows.clone(), ..]).to_owned() * &keep;
            if first.iter().any(|f| *f > T::zero()) {
                let keep_v = tape.constant(keep);
                let first_v = tape.constant(first);
                let hk = tape.mul_col(h, keep_v);
                let hf = tape.mul_col(h_init, first_v);
                h = tape.add(hk, hf);
                let zk = tape.mul_col(z, keep_v);
                let zf = tape.mul_col(z_init, first_v);
                z = tape.add(zk, zf);
            }
            let a = tape.constant(action);
            let za = tape.concat(&[z, a]);
            let x = self.img_in.forward_t(tape, vars, za);
            let x = tape.silu(x);
            h = self.gru.forward_t(tape, vars, x, h);

            let prior_logits = self.prior_head.forward_t(tape, vars, h);
            let prior = self.unimix_t(tape, prior_logits);
            let emb = tape.slice_rows(embed_all, rows.start, rows.end);
            let he = tape.concat(&[h, emb]);
            let post_logits = self.posterior_head.forward_t(tape, vars, he);
            let post = self.unimix_t(tape, post_logits);
            z = self.latent_t(tape, post, rng);

            feats.push(tape.concat(&[h, z]));
            priors.push(prior);
            posts.push(post);
        }

        let feat = tape.concat_rows(&feats);
        let prior = tape.concat_rows(&priors);
        let post = tape.concat_rows(&posts);

        // Reconstruction: squared error summed over features, mean over rows.
        let recon = self.decoder.forward_t(tape, vars, feat);
        let diff = tape.sub(recon, obs);
        let sq = tape.square(diff);
        let per_row = tape.sum_cols(sq);
        let recon_loss = tape.mean(per_row);

        let reward_pred = self.reward_head.forward_t(tape, vars, feat);
        let reward_target = tape.constant(batch.rewards.clone());
        let rdiff = tape.sub(reward_pred, reward_target);
        let rsq = tape.square(rdiff);
        let reward_loss = tape.mean(rsq);

        // Binary cross-entropy with logits: softplus(l) - y l.
        let cont_logits = self.cont_head.forward_t(tape, vars, feat);
        let cont_target = tape.constant(batch.conts.clone());
        let sp = tape.softplus(cont_logits);
        let yl = tape.mul(cont_target, cont_logits);
        let bce = tape.sub(sp, yl);
        let cont_loss = tape.mean(bce);

        let (dyn_raw, dyn_loss) = self.kl_term(tape, post, prior, KlSide::Dynamics);
        let (_, rep_loss) = self.kl_term(tape, post, prior, KlSide::Representation);

        let total = tape.add(recon_loss, reward_loss);
        let total = tape.add(total, cont_loss);
        let total = tape.add(total, dyn_loss);
        let total = tape.add(total, rep_loss);

        let mut report = LossReport::default();
        for (name, v) in [
            ("recon", recon_loss),
            ("reward", reward_loss),
            ("cont", cont_loss),
            ("dyn", dyn_loss),
            ("rep", rep_loss),
            ("kl_raw", dyn_raw),
            ("total", total),
        ] {
            let value = tape.scalar(v).to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(WorldModelError::NonFiniteLoss { term: name.to_string() });
            }
            report.insert(name, value);
        }
        let prior_ent = row_entropies(tape.value(prior), cfg.classes);
        let post_ent = row_entropies(tape.value(post), cfg.classes);
        report.insert("prior_entropy", prior_ent.iter().sum::<f64>() / prior_ent.len() as f64);
        report.insert("post_entropy", post_ent.iter().sum::<f64>() / post_ent.len() as f64);

        let hs: Vec<_> = feats.iter().map(|f| tape.value(*f).slice(s![.., ..cfg.deter]).to_owned()).collect();
        let zs: Vec<_> = feats.iter().map(|f| tape.value(*f).slice(s![.., cfg.deter..]).to_owned()).collect();
        let stack = |xs: &[Array2<T>]| {
            let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
            concatenate(Axis(0), &views).expect("same width")
        };
        let states = ModelState { h: stack(&hs), z: stack(&zs) };
        Ok((total, report, states))
    }

    /// Straight-through sample: forward value is a one-hot draw, gradient
    /// flows through the probabilities.
    fn latent_t<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, probs: Var, rng: &mut R) -> Var {
        if self.cfg.relaxed_latents {
            return probs;
        }
        let p = tape.value(probs);
        let sample = sample_one_hot(p, self.cfg.classes, rng);
        let offset = tape.constant(sample - p);
        tape.add(probs, offset)
    }

    /// Balanced KL with free bits. Returns (mean raw KL, scaled clipped loss).
    fn kl_term(&self, tape: &mut Tape<T>, post: Var, prior: Var, side: KlSide) -> (Var, Var) {
        let (q, p, scale) = match side {
            KlSide::Dynamics => (tape.detach(post), prior, self.cfg.dyn_scale),
            KlSide::Representation => {
                let p = tape.detach(prior);
                (post, p, self.cfg.rep_scale)
            }
        };
        let lq = tape.ln(q);
        let lp = tape.ln(p);
        let diff = tape.sub(lq, lp);
        let terms = tape.mul(q, diff);
        let kl = tape.sum_cols(terms);
        let raw = tape.mean(kl);
        let clipped = tape.max_scalar(kl, c(self.cfg.kl_free));
        let loss = tape.mean(clipped);
        (raw, tape.scale(loss, c(scale)))
    }

    /// One gradient update. Nothing is applied if any loss term or gradient
    /// is non-finite.
    pub fn train<R: Rng + ?Sized>(&mut self, batch: &SequenceBatch<T>, rng: &mut R) -> Result<TrainOutput<T>, WorldModelError> {
        let mut tape = Tape::new();
        let vars = tape.params(&self.params, 0);
        let (loss, mut report, states) = self.loss_on_tape(&mut tape, &vars, batch, rng)?;
        let grads = tape.backward(loss, &[(0, &self.params)]).remove(0);
        if !crate::nn::grads_finite(&grads) {
            return Err(WorldModelError::NonFiniteLoss { term: "gradient".into() });
        }
        let norm = self.opt.step(&mut self.params, &grads);
        report.insert("grad_norm", norm);
        if !self.params.all_finite() {
            return Err(WorldModelError::NonFiniteLoss { term: "parameters".into() });
        }
        Ok(TrainOutput { report, posterior_states: states })
    }
}

#[derive(Clone, Copy)]
enum KlSide {
    Dynamics,
    Representation,
}

pub fn one_hot<T: Real>(indices: &[usize], classes: usize) -> Array2<T> {
    let mut out = Array2::zeros((indices.len(), classes));
    for (r, &i) in indices.iter().enumerate() {
        out[[r, i]] = T::one();
    }
    out
}

/// Draws one class per group per row by inverse-CDF sampling.
pub fn sample_one_hot<T: Real, R: Rng + ?Sized>(probs: &Array2<T>, classes: usize, rng: &mut R) -> Array2<T> {
    let mut out = Array2::zeros(probs.raw_dim());
    for (prow, mut orow) in probs.rows().into_iter().zip(out.rows_mut()) {
        let ps = prow.as_slice().expect("row-major");
        let os = orow.as_slice_mut().expect("row-major");
        for (pg, og) in ps.chunks(classes).zip(os.chunks_mut(classes)) {
            let k = sample_index(pg, rng);
            og[k] = T::one();
        }
    }
    out
}

pub fn sample_index<T: Real, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p.to_f64().unwrap_or(0.0);
        if u < acc {
            return k;
        }
    }
    // Rounding left the cumulative sum just under 1.
    probs.iter().rposition(|p| *p > T::zero()).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(relaxed: bool) -> WorldModelConfig {
        WorldModelConfig {
            obs_dim: 5,
            num_actions: 3,
            deter: 8,
            hidden: 8,
            embed: 6,
            groups: 2,
            classes: 4,
            relaxed_latents: relaxed,
            ..WorldModelConfig::default()
        }
    }

    fn random_batch<T: Real>(cfg: &WorldModelConfig, steps: usize, batch: usize, rng: &mut ChaCha8Rng) -> SequenceBatch<T> {
        let n = steps * batch;
        let obs = Array2::from_shape_fn((n, cfg.obs_dim), |_| c(rng.random::<f64>() * 2.0 - 1.0));
        let acts: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_actions)).collect();
        let rewards = Array2::from_shape_fn((n, 1), |_| c(rng.random::<f64>()));
        let conts = Array2::from_shape_fn((n, 1), |_| if rng.random::<f64>() < 0.9 { T::one() } else { T::zero() });
        let firsts = Array2::from_shape_fn((n, 1), |(r, _)| if r < batch || rng.random::<f64>() < 0.1 { T::one() } else { T::zero() });
        SequenceBatch { steps, batch, obs, actions: one_hot(&acts, cfg.num_actions), rewards, conts, firsts }
    }

    #[test]
    fn init_state_broadcasts_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wm = WorldModel::<f32>::new(WorldModelConfig { obs_dim: 4, num_actions: 2, ..Default::default() }, &mut rng);
        let one = wm.init_state(1, &mut rng);
        assert_eq!(one.h.dim(), (1, 128));
        assert_eq!(one.z.dim(), (1, 64));
        let many = wm.init_state(16, &mut rng);
        for r in 1..16 {
            assert_eq!(many.h.row(r), many.h.row(0));
        }
        let a = wm.init_state(4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = wm.init_state(4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn observe_step_respects_unimix_floor_and_entropy_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = WorldModelConfig { obs_dim: 4, num_actions: 2, deter: 16, hidden: 16, embed: 16, ..Default::default() };
        let mut wm = WorldModel::<f32>::new(cfg.clone(), &mut rng);
        // Push logits far from uniform so the floor matters.
        for t in wm.params.tensors.iter_mut() {
            t.mapv_inplace(|v| v * 50.0);
        }
        let state = wm.init_state(3, &mut rng);
        let obs = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32);
        let acts = wm.one_hot_actions(&[0, 1, 0]);
        let (next, dists) = wm.observe_step(&state, &acts, &obs, &mut rng).unwrap();
        let floor = 0.01 / cfg.classes as f32;
        assert!(dists.prior.iter().chain(dists.posterior.iter()).all(|&p| p >= floor * 0.999));
        for e in row_entropies(&dists.posterior, cfg.classes) {
            assert!(e <= cfg.max_entropy() + 1e-6);
        }
        for row in next.z.rows() {
            for g in row.as_slice().unwrap().chunks(cfg.classes) {
                assert_eq!(g.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(g.iter().sum::<f32>(), 1.0);
            }
        }
        let again = wm.observe_step(&state, &acts, &obs, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let twice = wm.observe_step(&state, &acts, &obs, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(again.0, twice.0);
    }

    #[test]
    fn observe_step_rejects_wrong_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wm = WorldModel::<f32>::new(tiny(false), &mut rng);
        let state = wm.init_state(1, &mut rng);
        let acts = wm.one_hot_actions(&[0]);
        let bad_obs = Array2::zeros((1, 7));
        assert!(matches!(
            wm.observe_step(&state, &acts, &bad_obs, &mut rng),
            Err(WorldModelError::ShapeMismatch { what: "observation", expected: 5, got: 7 })
        ));
        let bad_act = Array2::zeros((1, 2));
        assert!(matches!(
            wm.observe_step(&state, &bad_act, &Array2::zeros((1, 5)), &mut rng),
            Err(WorldModelError::ShapeMismatch { what: "action", .. })
        ));
    }

    #[test]
    fn untrained_prior_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = WorldModelConfig { obs_dim: 10, num_actions: 4, groups: 4, classes: 8, ..Default::default() };
        let wm = WorldModel::<f32>::new(cfg.clone(), &mut rng);
        let max = 4.0 * 8f64.ln();
        assert!((max - 8.3177662).abs() < 1e-6);
        let mut state = wm.init_state(8, &mut rng);
        for step in 0..10 {
            let acts = wm.one_hot_actions(&[step % 4; 8]);
            let (next, prior) = wm.imagine_step(&state, &acts, &mut rng);
            for e in row_entropies(&prior, cfg.classes) {
                assert!(e <= max + 1e-6);
                assert!(e >= 0.95 * max, "entropy {e} vs {max}");
            }
            state = next;
        }
    }

    #[test]
    fn heads_are_pure_and_continue_is_a_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wm = WorldModel::<f32>::new(tiny(false), &mut rng);
        let state = ModelState {
            h: Array2::from_shape_fn((6, 8), |_| rng.random::<f32>() * 20.0 - 10.0),
            z: sample_one_hot(&Array2::from_elem((6, 8), 0.25f32), 4, &mut rng),
        };
        let a = wm.predict_heads(&state);
        let b = wm.predict_heads(&state);
        assert_eq!(a, b);
        assert!(a.cont.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(a.obs_recon.dim(), (6, 5));
    }

    /// Makes the posterior head compute exactly what the prior head does by
    /// copying its weights and zeroing the embedding inputs.
    fn tie_posterior_to_prior<T: Real>(wm: &mut WorldModel<T>) {
        let d = wm.cfg.deter;
        let (pl, ql) = (wm.prior_head.layers.clone(), wm.posterior_head.layers.clone());
        for (p, q) in pl.iter().zip(&ql) {
            let pw = wm.params[p.w].clone();
            let pb = wm.params[p.b].clone();
            let qw = &mut wm.params.tensors[q.w];
            qw.fill(T::zero());
            qw.slice_mut(s![..pw.nrows(), ..]).assign(&pw);
            wm.params.tensors[q.b].assign(&pb);
        }
        assert_eq!(wm.params[ql[0].w].nrows(), d + wm.cfg.embed);
    }

    #[test]
    fn free_bits_clip_kl_when_posterior_equals_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut wm = WorldModel::<f64>::new(tiny(false), &mut rng);
        tie_posterior_to_prior(&mut wm);
        let batch = random_batch::<f64>(&wm.cfg, 4, 3, &mut rng);
        let mut tape = Tape::new();
        let vars = tape.params(&wm.params, 0);
        let (_, report, _) = wm.loss_on_tape(&mut tape, &vars, &batch, &mut rng).unwrap();
        assert!(report.get("kl_raw").unwrap().abs() < 1e-12);
        assert!((report.get("dyn").unwrap() - 0.5 * 1.0).abs() < 1e-12);
        assert!((report.get("rep").unwrap() - 0.1 * 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_loss_matches_distmath() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = WorldModelConfig { kl_free: 0.0, dyn_scale: 1.0, rep_scale: 0.0, ..tiny(false) };
        let mut wm = WorldModel::<f64>::new(cfg.clone(), &mut rng);
        for t in wm.params.tensors.iter_mut() {
            t.mapv_inplace(|v| v * 30.0);
        }
        let batch = random_batch::<f64>(&cfg, 3, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = tape.params(&wm.params, 0);
        let (_, report, _) = wm.loss_on_tape(&mut tape, &vars, &batch, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();

        // Replay the same rollout with the inference path.
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let h0 = wm.initial_h(2);
        let z0 = sample_one_hot(&wm.prior_probs(&h0), cfg.classes, &mut r);
        let mut state = ModelState { h: h0.clone(), z: z0.clone() };
        let mut kls = Vec::new();
        for t in 0..3 {
            let rows = batch.rows(t);
            for b in 0..2 {
                if batch.firsts[[rows.start + b, 0]] == 1.0 {
                    state.h.row_mut(b).assign(&h0.row(b));
                    state.z.row_mut(b).assign(&z0.row(b));
                }
            }
            let keep = batch.firsts.slice(s![rows.clone(), ..]).mapv(|f| 1.0 - f);
            let acts = batch.actions.slice(s![rows.clone(), ..]).to_owned() * &keep;
            let obs = batch.obs.slice(s![rows.clone(), ..]).to_owned();
            let (next, dists) = wm.observe_step(&state, &acts, &obs, &mut r).unwrap();
            for b in 0..2 {
                let q = dists.posterior_dist(b, cfg.groups, cfg.classes);
                let p = dists.prior_dist(b, cfg.groups, cfg.classes);
                kls.push(distmath::kl_divergence(&q, &p).unwrap());
            }
            state = next;
        }
        let mean = kls.iter().sum::<f64>() / kls.len() as f64;
        assert!(mean > 0.01);
        assert!((report.get("dyn").unwrap() - mean).abs() < 1e-6);
        assert!((report.get("kl_raw").unwrap() - mean).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Free bits off so the KL terms contribute gradient. With equal dyn
        // and rep scales `s` the two stop-gradient halves sum to `s * grad KL`,
        // while the forward value carries `2s * KL`. Finite differences are
        // therefore taken on a copy that weights the KL once.
        let cfg = WorldModelConfig { kl_free: 0.0, dyn_scale: 0.3, rep_scale: 0.3, ..tiny(true) };
        let mut wm = WorldModel::<f64>::new(cfg.clone(), &mut rng);
        let mut probe = wm.clone();
        probe.cfg.rep_scale = 0.0;
        for t in wm.params.tensors.iter_mut() {
            t.mapv_inplace(|v| v + 0.3 * (rng.random::<f64>() - 0.5));
        }
        let batch = random_batch::<f64>(&cfg, 3, 2, &mut rng);
        let loss_of = |params: &Params<f64>| {
            let mut wm = probe.clone();
            wm.params = params.clone();
            let mut tape = Tape::new();
            let vars = tape.params(&wm.params, 0);
            let (l, _, _) = wm.loss_on_tape(&mut tape, &vars, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let vars = tape.params(&wm.params, 0);
        let (l, _, _) = wm.loss_on_tape(&mut tape, &vars, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grads = tape.backward(l, &[(0, &wm.params)]).remove(0);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..wm.params.tensors.len() {
            let shape = wm.params[i].dim();
            for r in 0..shape.0 {
                for col in 0..shape.1 {
                    let orig = wm.params[i][[r, col]];
                    wm.params.tensors[i][[r, col]] = orig + eps;
                    let up = loss_of(&wm.params);
                    wm.params.tensors[i][[r, col]] = orig - eps;
                    let down = loss_of(&wm.params);
                    wm.params.tensors[i][[r, col]] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let analytic = grads[i][[r, col]];
                    let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-4);
                    worst = worst.max(rel);
                    assert!(rel < 1e-3, "{} [{r},{col}]: numeric {numeric} analytic {analytic}", wm.params.names[i]);
                }
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn straight_through_passes_gradient_through_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny(false);
        let wm = WorldModel::<f64>::new(cfg.clone(), &mut rng);
        let mut tape = Tape::new();
        let vars = tape.params(&wm.params, 0);
        let h = tape.constant(Array2::from_elem((2, cfg.deter), 0.3));
        let logits = wm.prior_head.forward_t(&mut tape, &vars, h);
        let probs = wm.unimix_t(&mut tape, logits);
        let z = wm.latent_t(&mut tape, probs, &mut rng);
        // Forward is a one-hot sample.
        assert!(tape.value(z).iter().all(|&v| (v - 0.0).abs() < 1e-12 || (v - 1.0).abs() < 1e-12));
        let w = tape.constant(Array2::from_shape_fn((2, cfg.stoch()), |(_, j)| j as f64));
        let toy = tape.mul(z, w);
        let loss = tape.sum(toy);
        let grads = tape.backward(loss, &[(0, &wm.params)]).remove(0);
        let out = wm.prior_head.output_layer();
        assert!(grads[out.w].iter().any(|g| g.abs() > 1e-8));
    }

    #[test]
    fn reward_head_fits_a_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = WorldModelConfig { lr: 1e-3, ..tiny(false) };
        let mut wm = WorldModel::<f32>::new(cfg.clone(), &mut rng);
        let mut batch = random_batch::<f32>(&cfg, 6, 4, &mut rng);
        batch.rewards.fill(0.7);
        for _ in 0..300 {
            wm.train(&batch, &mut rng).unwrap();
        }
        let out = wm.train(&batch, &mut rng).unwrap();
        let preds = wm.predict_reward(&out.posterior_states.feature());
        let mean = preds.mean().unwrap();
        assert!((mean - 0.7).abs() < 0.07, "mean reward prediction {mean}");
    }

    #[test]
    fn non_finite_inputs_abort_the_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny(false);
        let mut wm = WorldModel::<f32>::new(cfg.clone(), &mut rng);
        let before = wm.params.clone();
        let mut batch = random_batch::<f32>(&cfg, 2, 2, &mut rng);
        batch.rewards[[0, 0]] = f32::NAN;
        let err = wm.train(&batch, &mut rng).unwrap_err();
        assert_eq!(err, WorldModelError::NonFiniteLoss { term: "reward".into() });
        assert_eq!(wm.params, before);
    }
}
