//! Entropy-seeking planner: imagine `N` candidate rollouts from the current
//! state, score each by predicted reward plus prior entropy, and commit to
//! the best one as a plan.

use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ActorCritic, AgentError};
use crate::nn::Real;
use crate::worldmodel::{ModelState, WorldModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("candidate count must be at least 1")]
    NoCandidates,
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub num_candidates: usize,
    pub horizon: usize,
    pub reward_weight: f64,
    pub entropy_weight: f64,
    pub aggregate: Aggregate,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { num_candidates: 256, horizon: 16, reward_weight: 1.0, entropy_weight: 1.0, aggregate: Aggregate::Sum }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrajectory {
    pub actions: Vec<usize>,
    pub cum_reward: f64,
    pub cum_entropy: f64,
    pub score: f64,
    pub final_feature: Vec<f64>,
    /// Hash of the state the rollout started from.
    pub root: u64,
}

/// `λ_r · reward + λ_H · entropy`.
pub fn score_trajectory(cum_reward: f64, cum_entropy: f64, reward_weight: f64, entropy_weight: f64) -> f64 {
    reward_weight * cum_reward + entropy_weight * cum_entropy
}

/// Index of the highest score, lowest index on ties.
pub fn argmax_score(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn state_hash<T: Real>(state: &ModelState<T>) -> u64 {
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    for v in state.h.iter().chain(state.z.iter()) {
        v.to_f64().unwrap_or(f64::NAN).to_bits().hash(&mut hasher);
    }
    hasher.finish()
}

/// Imagines `N` rollouts of length `H` from a single-row `state`, batched as
/// `N` lanes of one model forward per step.
pub fn generate_candidates<T: Real, R: Rng + ?Sized>(
    wm: &WorldModel<T>,
    actor: &ActorCritic<T>,
    state: &ModelState<T>,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<Vec<ScoredTrajectory>, PlannerError> {
    if cfg.num_candidates == 0 {
        return Err(PlannerError::NoCandidates);
    }
    let root = state_hash(&state.row(0));
    let start = state.row(0).broadcast(cfg.num_candidates);
    let traj = actor.imagine_rollout(wm, &start, cfg.horizon, None, rng)?;
    let last = traj.states.last().expect("horizon >= 1").feature();
    let h = traj.horizon() as f64;
    let norm = match cfg.aggregate {
        Aggregate::Sum => 1.0,
        Aggregate::Mean => 1.0 / h,
    };
    Ok((0..cfg.num_candidates)
        .map(|lane| {
            let cum_reward = norm * traj.rewards.iter().map(|r| r[lane]).sum::<f64>();
            let cum_entropy = norm * traj.prior_entropies.iter().map(|e| e[lane]).sum::<f64>();
            ScoredTrajectory {
                actions: traj.actions.iter().map(|a| a[lane]).collect(),
                cum_reward,
                cum_entropy,
                score: score_trajectory(cum_reward, cum_entropy, cfg.reward_weight, cfg.entropy_weight),
                final_feature: last.row(lane).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                root,
            }
        })
        .collect())
}

pub fn select_plan(candidates: &[ScoredTrajectory]) -> Result<Plan, PlannerError> {
    let best = argmax_score(candidates.iter().map(|c| c.score)).ok_or(PlannerError::EmptyCandidates)?;
    let chosen = &candidates[best];
    Ok(Plan::new(chosen.actions.clone(), chosen.final_feature.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStep {
    Action(usize),
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Plan {
    pub actions: Vec<usize>,
    pub cursor: usize,
    pub final_feature: Vec<f64>,
    pub active: bool,
}

impl Plan {
    pub fn new(actions: Vec<usize>, final_feature: Vec<f64>) -> Self {
        let active = !actions.is_empty();
        Self { actions, cursor: 0, final_feature, active }
    }

    pub fn advance(&mut self) -> PlanStep {
        if !self.active || self.cursor >= self.actions.len() {
            self.active = false;
            return PlanStep::Exhausted;
        }
        let a = self.actions[self.cursor];
        self.cursor += 1;
        if self.cursor == self.actions.len() {
            self.active = false;
        }
        PlanStep::Action(a)
    }

    /// Ends the plan, e.g. at episode termination.
    pub fn deactivate(&mut self) {
        self.active = false;
    }

    pub fn position_normalized(&self) -> f64 {
        if self.actions.is_empty() {
            0.0
        } else {
            self.cursor as f64 / self.actions.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanTiming {
    pub candidates: usize,
    pub horizon: usize,
    pub seconds: f64,
}

/// Generates, scores and selects in one call, timing the whole step.
pub fn plan<T: Real, R: Rng + ?Sized>(
    wm: &WorldModel<T>,
    actor: &ActorCritic<T>,
    state: &ModelState<T>,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<(Plan, PlanTiming), PlannerError> {
    let start = Instant::now();
    let candidates = generate_candidates(wm, actor, state, cfg, rng)?;
    let plan = select_plan(&candidates)?;
    let elapsed: Duration = start.elapsed();
    Ok((plan, PlanTiming { candidates: cfg.num_candidates, horizon: cfg.horizon, seconds: elapsed.as_secs_f64() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::worldmodel::WorldModelConfig;
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn candidate(score: f64) -> ScoredTrajectory {
        ScoredTrajectory { actions: vec![0], cum_reward: score, cum_entropy: 0.0, score, final_feature: vec![], root: 0 }
    }

    fn models(rng: &mut ChaCha8Rng) -> (WorldModel<f32>, ActorCritic<f32>) {
        let cfg = WorldModelConfig { obs_dim: 4, num_actions: 6, deter: 16, hidden: 16, embed: 16, groups: 4, classes: 4, ..Default::default() };
        let wm = WorldModel::new(cfg.clone(), rng);
        let ac = ActorCritic::new(AgentConfig { hidden: 16, ..Default::default() }, cfg.feature_dim(), 6, rng);
        (wm, ac)
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_trajectory(2.0, 3.0, 1.0, 1.0), 5.0);
        assert_eq!(score_trajectory(2.0, 3.0, 1.0, 0.0), 2.0);
        assert_eq!(score_trajectory(2.0, 3.0, 0.0, 1.0), 3.0);
    }

    #[test]
    fn selection_examples() {
        let plan = select_plan(&[candidate(1.0), candidate(3.0), candidate(2.0)]).unwrap();
        assert_eq!(plan.actions, vec![0]);
        assert_eq!(argmax_score([1.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_score([2.0, 2.0, 2.0]), Some(0));
        assert_eq!(select_plan(&[]), Err(PlannerError::EmptyCandidates));
    }

    #[test]
    fn selection_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.random_range(1..50);
            // Coarse values so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8))).collect();
            let mut oracle = 0;
            for i in 1..n {
                if scores[i] > scores[oracle] {
                    oracle = i;
                }
            }
            assert_eq!(argmax_score(scores.iter().copied()), Some(oracle));
        }
    }

    proptest! {
        #[test]
        fn selection_ignores_positive_rescaling(
            scores in prop::collection::vec(-100.0f64..100.0, 1..40),
            scale in 1e-3f64..1e3,
        ) {
            prop_assert_eq!(argmax_score(scores.iter().copied()), argmax_score(scores.iter().map(|s| s * scale)));
        }

        #[test]
        fn strictly_highest_entropy_wins_at_equal_reward(
            entropies in prop::collection::vec(0.0f64..10.0, 1..30),
            winner in 0usize..30,
            reward in -5.0f64..5.0,
            entropy_weight in 0.01f64..5.0,
        ) {
            let winner = winner % entropies.len();
            let top = entropies.iter().cloned().fold(0.0, f64::max) + 0.5;
            let cands: Vec<ScoredTrajectory> = entropies
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let e = if i == winner { top } else { e };
                    ScoredTrajectory {
                        actions: vec![i],
                        cum_reward: reward,
                        cum_entropy: e,
                        score: score_trajectory(reward, e, 1.0, entropy_weight),
                        final_feature: vec![],
                        root: 0,
                    }
                })
                .collect();
            prop_assert_eq!(select_plan(&cands).unwrap().actions, vec![winner]);
        }
    }

    #[test]
    fn plan_advances_then_exhausts() {
        let mut plan = Plan::new(vec![4, 2, 1], vec![0.0]);
        assert!(plan.active);
        let mut positions = vec![plan.position_normalized()];
        for want in [4, 2, 1] {
            assert_eq!(plan.advance(), PlanStep::Action(want));
            positions.push(plan.position_normalized());
        }
        assert!(!plan.active);
        assert_eq!(plan.advance(), PlanStep::Exhausted);
        assert_eq!(plan.advance(), PlanStep::Exhausted);
        assert!(positions.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(positions, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);

        let mut ended = Plan::new(vec![1, 1], vec![]);
        ended.deactivate();
        assert_eq!(ended.advance(), PlanStep::Exhausted);
    }

    #[test]
    fn candidates_share_the_root_and_are_scored_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (wm, ac) = models(&mut rng);
        let state = wm.init_state(1, &mut rng);
        let cfg = PlannerConfig { num_candidates: 32, horizon: 5, reward_weight: 0.5, entropy_weight: 2.0, ..Default::default() };
        let wm_before = wm.params.clone();
        let cands = generate_candidates(&wm, &ac, &state, &cfg, &mut rng).unwrap();
        assert_eq!(wm.params, wm_before);
        assert_eq!(cands.len(), 32);
        let root = state_hash(&state);
        let max = wm.cfg.max_entropy() * 5.0;
        for c in &cands {
            assert_eq!(c.root, root);
            assert_eq!(c.actions.len(), 5);
            assert_eq!(c.final_feature.len(), wm.cfg.feature_dim());
            assert_eq!(c.score, 0.5 * c.cum_reward + 2.0 * c.cum_entropy);
            assert!(c.cum_entropy <= max + 1e-6);
        }
        let one = generate_candidates(&wm, &ac, &state, &PlannerConfig { num_candidates: 1, horizon: 3, ..Default::default() }, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn mean_aggregate_divides_by_horizon() {
        let (wm, ac) = models(&mut ChaCha8Rng::seed_from_u64(2));
        let state = wm.init_state(1, &mut ChaCha8Rng::seed_from_u64(3));
        let sum_cfg = PlannerConfig { num_candidates: 4, horizon: 4, ..Default::default() };
        let mean_cfg = PlannerConfig { aggregate: Aggregate::Mean, ..sum_cfg.clone() };
        let s = generate_candidates(&wm, &ac, &state, &sum_cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let m = generate_candidates(&wm, &ac, &state, &mean_cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (s, m) in s.iter().zip(&m) {
            assert!((s.cum_entropy / 4.0 - m.cum_entropy).abs() < 1e-9);
            assert!((s.cum_reward / 4.0 - m.cum_reward).abs() < 1e-9);
        }
    }

    #[test]
    fn plan_returns_the_best_candidate_with_timing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (wm, ac) = models(&mut rng);
        let state = wm.init_state(1, &mut rng);
        let cfg = PlannerConfig { num_candidates: 16, horizon: 6, ..Default::default() };
        let cands = generate_candidates(&wm, &ac, &state, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (plan, timing) = plan(&wm, &ac, &state, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let best = argmax_score(cands.iter().map(|c| c.score)).unwrap();
        assert_eq!(plan.actions, cands[best].actions);
        assert_eq!(plan.cursor, 0);
        assert_eq!((timing.candidates, timing.horizon), (16, 6));
        assert!(timing.seconds >= 0.0);
    }
}
