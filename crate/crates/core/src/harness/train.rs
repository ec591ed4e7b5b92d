//! The training loop: collect, replay, learn, and optionally plan.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{AblationMode, Config};
use super::metrics::{replan_stats, EpisodeRecord, JsonlSink, MetaUpdateRecord, MetricRecord, PlanCallRecord, UpdateRecord};
use super::replay::{ReplayBuffer, ReplayStep};
use super::rng::RunStreams;
use super::HarnessError;
use crate::agent::{ActMode, ActorCritic};
use crate::envs::{AnyEnv, Environment};
use crate::metaplanner::{MetaBuffer, MetaDecision, MetaObservation, MetaPolicy, MetaTransition, P_GRID};
use crate::nn::LossReport;
use crate::planner::{self, Plan, PlanStep};
use crate::worldmodel::{one_hot, row_entropies, ModelState, WorldModel};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_FILE: &str = "config.yaml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FAILURE_FILE: &str = "failure.json";

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub cfg: Config,
    pub run_id: String,
    pub step: u64,
    pub episode: u64,
    pub updates: u64,
    pub env: AnyEnv,
    pub wm: WorldModel<f32>,
    pub ac: ActorCritic<f32>,
    /// Absent without planning and in MPC mode.
    pub meta: Option<MetaPolicy<f32>>,
    pub meta_buffer: MetaBuffer,
    pub replay: ReplayBuffer,
    pub rng: RunStreams,
    /// Filtered model state after the latest observation.
    pub post: ModelState<f32>,
    pub obs: Vec<f32>,
    pub plan: Plan,
    pub episode_transitions: Vec<MetaTransition>,
    pub episode_return: f64,
    pub episode_raw_return: f64,
    pub episode_length: usize,
    /// Fractional updates owed at the configured train ratio.
    pub train_credit: f64,
    pub last_losses: LossReport,
}

struct Sinks {
    metrics: JsonlSink,
    timing: JsonlSink,
}

pub struct Trainer {
    pub state: TrainerState,
    /// Metric records emitted by this process, in order.
    pub records: Vec<MetricRecord>,
    pub timings: Vec<PlanCallRecord>,
    run_dir: Option<PathBuf>,
    sinks: Option<Sinks>,
}

fn row(v: &[f32]) -> Array2<f32> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn to_f64(a: &Array2<f32>) -> Vec<f64> {
    a.iter().map(|&v| f64::from(v)).collect()
}

impl Trainer {
    /// A fresh run kept in memory only.
    pub fn new(cfg: Config) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut rng = RunStreams::new(cfg.seed);
        let mut env = cfg.make_env(rng.env.random())?;
        let obs = env.reset();
        let (obs_dim, num_actions) = (env.obs_dim(), env.num_actions());
        let wm_cfg = cfg.world_model(obs_dim, num_actions);
        let feature_dim = wm_cfg.feature_dim();
        let wm = WorldModel::new(wm_cfg.clone(), &mut rng.model_init);
        let ac = ActorCritic::new(cfg.agent(), feature_dim, num_actions, &mut rng.model_init);
        let meta = (cfg.use_plan && cfg.ablation != AblationMode::Mpc)
            .then(|| MetaPolicy::new(cfg.meta(), MetaObservation::dim(wm_cfg.embed, feature_dim, num_actions), &mut rng.model_init));
        let (post, _) = wm.observe_first(&row(&obs), &mut rng.collect)?;
        let mut replay = ReplayBuffer::new(cfg.dataset_size, num_actions);
        replay.push(ReplayStep { obs: obs.clone(), action: 0, reward: 0.0, cont: 1.0, first: true });
        let state = TrainerState {
            run_id: cfg.resolved_run_id(),
            meta_buffer: MetaBuffer::new(cfg.buffer_size),
            cfg,
            step: 0,
            episode: 0,
            updates: 0,
            env,
            wm,
            ac,
            meta,
            replay,
            rng,
            post,
            obs,
            plan: Plan::default(),
            episode_transitions: Vec::new(),
            episode_return: 0.0,
            episode_raw_return: 0.0,
            episode_length: 0,
            train_credit: 0.0,
            last_losses: LossReport::default(),
        };
        Ok(Self { state, records: Vec::new(), timings: Vec::new(), run_dir: None, sinks: None })
    }

    /// A fresh run writing metrics, timings and checkpoints under `dir`.
    pub fn create(cfg: Config, dir: &Path) -> Result<Self, HarnessError> {
        let mut t = Self::new(cfg)?;
        std::fs::create_dir_all(dir)?;
        for f in [METRICS_FILE, TIMING_FILE] {
            let p = dir.join(f);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        std::fs::write(dir.join(CONFIG_FILE), t.state.cfg.to_text())?;
        t.attach(dir)?;
        Ok(t)
    }

    /// Continues from a checkpoint; with `dir`, records are appended there.
    pub fn resume(checkpoint_path: &Path, dir: Option<&Path>) -> Result<Self, HarnessError> {
        let state: TrainerState = checkpoint::load(checkpoint_path)?;
        let mut t = Self { state, records: Vec::new(), timings: Vec::new(), run_dir: None, sinks: None };
        if let Some(dir) = dir {
            t.attach(dir)?;
        }
        Ok(t)
    }

    fn attach(&mut self, dir: &Path) -> Result<(), HarnessError> {
        self.sinks = Some(Sinks { metrics: JsonlSink::append(&dir.join(METRICS_FILE))?, timing: JsonlSink::append(&dir.join(TIMING_FILE))? });
        self.run_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn save(&mut self, path: &Path) -> Result<(), HarnessError> {
        self.flush()?;
        checkpoint::save(path, &self.state)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), HarnessError> {
        if let Some(s) = self.sinks.as_mut() {
            s.metrics.flush()?;
            s.timing.flush()?;
        }
        Ok(())
    }

    fn emit(&mut self, record: MetricRecord) -> Result<(), HarnessError> {
        if let Some(s) = self.sinks.as_mut() {
            s.metrics.write(&record)?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Runs until `total` environment steps have been taken. Numeric
    /// failures leave a diagnostic dump in the run directory.
    pub fn run_until(&mut self, total: u64) -> Result<(), HarnessError> {
        let every = self.state.cfg.checkpoint_every as u64;
        while self.state.step < total {
            if let Err(e) = self.step() {
                if e.is_numeric() {
                    self.dump_failure(&e);
                }
                let _ = self.flush();
                return Err(e);
            }
            if every > 0 && self.state.step.is_multiple_of(every) {
                if let Some(dir) = self.run_dir.clone() {
                    self.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        self.flush()
    }

    fn dump_failure(&self, err: &HarnessError) {
        let Some(dir) = &self.run_dir else { return };
        let s = &self.state;
        let dump = serde_json::json!({
            "error": err.to_string(),
            "step": s.step,
            "updates": s.updates,
            "last_losses": s.last_losses.0,
            "world_model_finite": s.wm.params.all_finite(),
            "actor_finite": s.ac.actor_params.all_finite(),
            "critic_finite": s.ac.critic_params.all_finite(),
            "meta_finite": s.meta.as_ref().map(|m| m.actor_params.all_finite() && m.critic_params.all_finite()),
        });
        let _ = std::fs::write(dir.join(FAILURE_FILE), serde_json::to_string_pretty(&dump).unwrap_or_default());
    }

    fn in_prefill(&self) -> bool {
        self.state.step < self.state.cfg.prefill as u64
    }

    /// One environment step plus whatever learning it triggers.
    pub fn step(&mut self) -> Result<(), HarnessError> {
        let prefill = self.in_prefill();
        let num_actions = self.state.env.num_actions();
        let (action, meta) = if prefill {
            (self.state.rng.collect.random_range(0..num_actions), None)
        } else if self.state.cfg.use_plan {
            let (a, obs, decision) = self.plan_action()?;
            (a, Some((obs, decision)))
        } else {
            let s = &mut self.state;
            let mode = if s.cfg.expl_epsilon > 0.0 { ActMode::EpsilonGreedy(s.cfg.expl_epsilon) } else { ActMode::Sample };
            (s.ac.act(&s.post, mode, &mut s.rng.collect)[0], None)
        };

        let s = &mut self.state;
        let outcome = s.env.step(action)?;
        let actions = s.wm.one_hot_actions(&[action]);
        let (post, pair) = s.wm.observe_step(&s.post, &actions, &row(&outcome.obs), &mut s.rng.collect)?;
        let entropy = row_entropies(&pair.prior, s.wm.cfg.classes)[0];
        s.post = post;
        s.obs = outcome.obs.clone();
        s.step += 1;
        s.episode_return += outcome.reward;
        s.episode_raw_return += outcome.breakdown.total;
        s.episode_length += 1;
        s.replay.push(ReplayStep {
            obs: outcome.obs.clone(),
            action,
            reward: outcome.reward as f32,
            cont: if outcome.terminated { 0.0 } else { 1.0 },
            first: false,
        });
        if let Some((obs, d)) = meta {
            let t = MetaTransition {
                obs,
                action: d.p_index,
                log_prob: d.log_prob,
                implemented: d.replan,
                step_entropy: entropy,
                next_base_reward: outcome.reward,
                done: outcome.done(),
            };
            if s.meta.is_some() {
                s.meta_buffer.push(t.clone());
            }
            s.episode_transitions.push(t);
        }
        if outcome.done() {
            self.end_episode(outcome.terminated)?;
        }

        if self.state.step > self.state.cfg.prefill as u64 && self.state.replay.can_sample(self.state.cfg.batch_length) {
            let cfg = &self.state.cfg;
            self.state.train_credit += cfg.train_ratio / (cfg.batch_size * cfg.batch_length) as f64;
            while self.state.train_credit >= 1.0 {
                self.state.train_credit -= 1.0;
                self.update()?;
            }
        }
        self.maybe_update_meta()
    }

    fn end_episode(&mut self, terminated: bool) -> Result<(), HarnessError> {
        let s = &mut self.state;
        let record = EpisodeRecord {
            run_id: s.run_id.clone(),
            seed: s.cfg.seed,
            step: s.step,
            episode: s.episode,
            ret: s.episode_return,
            raw_return: s.episode_raw_return,
            length: s.episode_length,
            terminated,
            replan: if s.cfg.use_plan { replan_stats(&s.episode_transitions) } else { None },
        };
        s.episode += 1;
        s.episode_return = 0.0;
        s.episode_raw_return = 0.0;
        s.episode_length = 0;
        s.episode_transitions.clear();
        s.plan.deactivate();
        s.obs = s.env.reset();
        let (post, _) = s.wm.observe_first(&row(&s.obs), &mut s.rng.collect)?;
        s.post = post;
        s.replay.push(ReplayStep { obs: s.obs.clone(), action: 0, reward: 0.0, cont: 1.0, first: true });
        self.emit(MetricRecord::Episode(record))
    }

    /// Meta decision, planning when it calls for it, and the next plan action.
    fn plan_action(&mut self) -> Result<(usize, Vec<f32>, MetaDecision), HarnessError> {
        let s = &mut self.state;
        let feature = s.post.feature();
        let greedy = s.ac.act_on_features(&feature, ActMode::Greedy, &mut s.rng.collect)[0];
        let feature = to_f64(&feature);
        let obs = MetaObservation {
            embedding: to_f64(&s.wm.embed(&row(&s.obs))),
            final_feature: if s.plan.active { s.plan.final_feature.clone() } else { vec![0.0; feature.len()] },
            feature,
            step_normalized: s.env.steps() as f64 / s.env.time_limit() as f64,
            greedy_action: to_f64(&one_hot::<f32>(&[greedy], s.env.num_actions())),
            plan_position: s.plan.position_normalized(),
            in_plan: s.plan.active,
        }
        .to_vec();
        let decision = match &s.meta {
            Some(m) => m.decide(&obs, &mut s.rng.meta),
            None => MetaDecision { p_index: P_GRID.len() - 1, replan: true, log_prob: 0.0 },
        };
        // An exhausted plan forces a replan whatever the policy chose.
        let replan = decision.replan || !s.plan.active;
        if replan {
            let (plan, timing) = planner::plan(&s.wm, &s.ac, &s.post, &s.cfg.planner(), &mut s.rng.imagination)?;
            s.plan = plan;
            let rec = PlanCallRecord {
                run_id: s.run_id.clone(),
                seed: s.cfg.seed,
                step: s.step,
                horizon: timing.horizon,
                candidates: timing.candidates,
                seconds: timing.seconds,
            };
            if let Some(sinks) = self.sinks.as_mut() {
                sinks.timing.write(&rec)?;
            }
            self.timings.push(rec);
        }
        let s = &mut self.state;
        let action = match s.plan.advance() {
            PlanStep::Action(a) => a,
            PlanStep::Exhausted => greedy,
        };
        Ok((action, obs, MetaDecision { replan, ..decision }))
    }

    /// One world-model update on replayed sequences, then one actor-critic
    /// update on imagined rollouts from the resulting posterior states.
    pub fn update(&mut self) -> Result<(), HarnessError> {
        let s = &mut self.state;
        let batch = s.replay.sample::<f32, _>(s.cfg.batch_size, s.cfg.batch_length, &mut s.rng.replay);
        let out = s.wm.train(&batch, &mut s.rng.train)?;
        let traj = s.ac.imagine_rollout(&s.wm, &out.posterior_states, s.cfg.imag_horizon, None, &mut s.rng.train)?;
        let ac_report = s.ac.update_actor_critic(&traj)?;
        let mut report = LossReport::default();
        report.merge("wm", &out.report);
        report.merge("ac", &ac_report);
        s.updates += 1;
        s.last_losses = report.clone();
        if s.updates.is_multiple_of(s.cfg.log_every.max(1) as u64) {
            let rec = UpdateRecord { run_id: s.run_id.clone(), seed: s.cfg.seed, step: s.step, update: s.updates, losses: report.0 };
            self.emit(MetricRecord::Update(rec))?;
        }
        Ok(())
    }

    fn maybe_update_meta(&mut self) -> Result<(), HarnessError> {
        let s = &mut self.state;
        let Some(meta) = s.meta.as_mut() else { return Ok(()) };
        let every = s.cfg.plan_train_every.max(1) as u64;
        if !s.step.is_multiple_of(every) || s.meta_buffer.ready_len(s.cfg.seq_length) < s.cfg.buffer_minimum {
            return Ok(());
        }
        let batch = meta.prepare_batch(&s.meta_buffer, s.cfg.buffer_minimum)?;
        let report = meta.ppo_update(&batch, &mut s.rng.meta)?;
        let rec = MetaUpdateRecord { run_id: s.run_id.clone(), seed: s.cfg.seed, step: s.step, losses: report.0 };
        self.emit(MetricRecord::MetaUpdate(rec))
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter_map(|r| match r {
            MetricRecord::Episode(e) => Some(e),
            _ => None,
        })
    }
}

/// What a finished run reports back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
    /// Mean length of episodes that ended in the last 10% of steps.
    pub final_phase_length: Option<f64>,
    pub final_phase_return: Option<f64>,
}

/// Mean of `f` over episodes ending after `(1 − fraction)` of `total` steps.
pub fn final_phase_mean<'a>(episodes: impl Iterator<Item = &'a EpisodeRecord>, total: u64, fraction: f64, f: impl Fn(&EpisodeRecord) -> f64) -> Option<f64> {
    let cutoff = total as f64 * (1.0 - fraction);
    let xs: Vec<f64> = episodes.filter(|e| e.step as f64 > cutoff).map(f).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn summarize(trainer: &Trainer) -> RunSummary {
    let s = &trainer.state;
    RunSummary {
        run_id: s.run_id.clone(),
        steps: s.step,
        episodes: s.episode,
        updates: s.updates,
        final_phase_length: final_phase_mean(trainer.episodes(), s.step, 0.1, |e| e.length as f64),
        final_phase_return: final_phase_mean(trainer.episodes(), s.step, 0.1, |e| e.ret),
    }
}

/// Trains for `cfg.steps` steps in `dir` and leaves a final checkpoint.
pub fn run_train(cfg: Config, dir: &Path) -> Result<RunSummary, HarnessError> {
    let steps = cfg.steps as u64;
    let mut trainer = Trainer::create(cfg, dir)?;
    trainer.run_until(steps)?;
    trainer.save(&dir.join(CHECKPOINT_FILE))?;
    let summary = summarize(&trainer);
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap_or_default())?;
    Ok(summary)
}

/// The configuration an ablation mode runs with: MPC forces planning with
/// a replan every step on 90% of the step budget; the weighting modes set
/// plan-score and meta-reward weights.
pub fn ablation_config(mut cfg: Config, mode: AblationMode) -> Config {
    cfg.ablation = mode;
    cfg.use_plan = true;
    if mode == AblationMode::Mpc {
        cfg.steps = (cfg.steps as f64 * 0.9).round() as usize;
    }
    cfg
}

pub fn run_ablation(cfg: Config, mode: AblationMode, dir: &Path) -> Result<RunSummary, HarnessError> {
    run_train(ablation_config(cfg, mode), dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A model small enough to train for a few hundred steps in a test.
    pub(crate) fn tiny(seed: u64) -> Config {
        let mut cfg = Config::default();
        for (k, v) in [
            ("seed", seed.to_string()),
            ("steps", "300".into()),
            ("prefill", "50".into()),
            ("train_ratio", "32".into()),
            ("batch_size", "2".into()),
            ("batch_length", "8".into()),
            ("time_limit", "40".into()),
            ("maze_width", "4".into()),
            ("maze_height", "4".into()),
            ("dyn_hidden", "8".into()),
            ("dyn_deter", "8".into()),
            ("dyn_stoch", "2".into()),
            ("dyn_discrete", "4".into()),
            ("units", "8".into()),
            ("imag_horizon", "3".into()),
            ("plan_max_horizon", "3".into()),
            ("plan_choices", "4".into()),
            ("num_cells", "8".into()),
            ("num_epochs", "2".into()),
            ("buffer_minimum", "32".into()),
            ("plan_train_every", "16".into()),
            ("seq_length", "2".into()),
        ] {
            cfg.set(k, &v).unwrap();
        }
        cfg
    }

    #[test]
    fn no_update_before_prefill() {
        let mut t = Trainer::new(tiny(0)).unwrap();
        t.run_until(50).unwrap();
        assert_eq!(t.state.updates, 0);
        t.run_until(120).unwrap();
        assert!(t.state.updates > 0);
    }

    #[test]
    fn baseline_never_plans() {
        let cfg = Config { use_plan: false, ..tiny(1) };
        let mut t = Trainer::new(cfg).unwrap();
        t.run_until(200).unwrap();
        assert!(t.timings.is_empty());
        assert!(t.state.meta.is_none());
        assert!(t.episodes().all(|e| e.replan.is_none()));
    }

    #[test]
    fn mpc_replans_every_step() {
        let cfg = ablation_config(tiny(2), AblationMode::Mpc);
        assert_eq!(cfg.steps, 270);
        let mut t = Trainer::new(cfg).unwrap();
        t.run_until(200).unwrap();
        assert!(t.state.meta.is_none());
        let mut seen = 0;
        for e in t.episodes() {
            if let Some(r) = e.replan {
                let l = r.length_before_replan.unwrap();
                assert_eq!((l.mean, l.std, l.max), (1.0, 0.0, 1.0));
                assert_eq!(r.probability.mean, 1.0);
                seen += 1;
            }
        }
        assert!(seen > 0);
        assert_eq!(t.timings.len() as u64, 200 - 50);
    }

    #[test]
    fn planning_run_trains_the_meta_policy() {
        let mut t = Trainer::new(tiny(3)).unwrap();
        t.run_until(300).unwrap();
        assert!(t.records.iter().any(|r| matches!(r, MetricRecord::MetaUpdate(_))));
        assert!(t.episodes().any(|e| e.replan.is_some()));
        assert!(t.state.wm.params.all_finite());
    }

    #[test]
    fn final_phase_uses_episodes_in_the_last_tenth() {
        let ep = |step, length| EpisodeRecord { run_id: String::new(), seed: 0, step, episode: 0, ret: 0.0, raw_return: 0.0, length, terminated: true, replan: None };
        let eps = [ep(10, 100), ep(95, 10), ep(100, 20)];
        assert_eq!(final_phase_mean(eps.iter(), 100, 0.1, |e| e.length as f64), Some(15.0));
        assert_eq!(final_phase_mean(eps.iter(), 1000, 0.1, |e| e.length as f64), None);
    }
}
