//! Two small tasks that isolate exploration failure modes: an irreducibly
//! random observation source, and a transition reached only through an
//! action that a reward-greedy policy never picks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, RewardBreakdown, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    NoisyTv,
    RareTransition,
}

impl std::str::FromStr for DiagnosticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noisy_tv" => Ok(Self::NoisyTv),
            "rare_transition" => Ok(Self::RareTransition),
            other => Err(format!("unknown diagnostic environment `{other}`")),
        }
    }
}

fn one_hot_into(out: &mut Vec<f32>, index: Option<usize>, len: usize) {
    out.extend((0..len).map(|i| if Some(i) == index { 1.0 } else { 0.0 }));
}

/// A corridor walked with {left, right, stay}. One seed-chosen cell shows a
/// fresh uniform symbol out of `symbols` on every step spent there; other
/// cells show no symbol. Reaching the far end pays +1 and ends the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyTv {
    pub length: usize,
    pub symbols: usize,
    pub tv_cell: usize,
    pub time_limit: usize,
    pub pos: usize,
    pub last_symbol: Option<usize>,
    steps: usize,
    finished: bool,
    rng: ChaCha8Rng,
}

impl NoisyTv {
    pub const LENGTH: usize = 8;
    pub const SYMBOLS: usize = 8;
    pub const TIME_LIMIT: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_layout(Self::LENGTH, Self::SYMBOLS, Self::TIME_LIMIT, seed)
    }

    pub fn with_layout(length: usize, symbols: usize, time_limit: usize, seed: u64) -> Self {
        assert!(length >= 3 && symbols >= 2, "corridor needs at least 3 cells and 2 symbols");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tv_cell = rng.random_range(1..length - 1);
        Self { length, symbols, tv_cell, time_limit, pos: 0, last_symbol: None, steps: 0, finished: false, rng }
    }

    fn observe(&mut self) -> Vec<f32> {
        self.last_symbol = (self.pos == self.tv_cell).then(|| self.rng.random_range(0..self.symbols));
        let mut obs = Vec::with_capacity(self.obs_dim());
        one_hot_into(&mut obs, Some(self.pos), self.length);
        one_hot_into(&mut obs, self.last_symbol, self.symbols);
        obs
    }
}

impl Environment for NoisyTv {
    fn obs_dim(&self) -> usize {
        self.length + self.symbols
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn time_limit(&self) -> usize {
        self.time_limit
    }

    fn reset(&mut self) -> Vec<f32> {
        self.pos = 0;
        self.steps = 0;
        self.finished = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if action >= 3 {
            return Err(EnvError::InvalidAction { action, num_actions: 3 });
        }
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        match action {
            0 => self.pos = self.pos.saturating_sub(1),
            1 => self.pos = (self.pos + 1).min(self.length - 1),
            _ => {}
        }
        self.steps += 1;
        let terminated = self.pos == self.length - 1;
        let truncated = !terminated && self.steps >= self.time_limit;
        self.finished = terminated || truncated;
        let breakdown = RewardBreakdown::new(0.0, 0.0, if terminated { 1.0 } else { 0.0 }, 0.0);
        Ok(Step { obs: self.observe(), reward: breakdown.total, breakdown, terminated, truncated })
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

/// A chain walked with {advance, stay, rare}. Advancing to the end of the
/// chain pays +1. The `rare` action costs 0.1 everywhere and does nothing,
/// except at one seed-chosen state where it moves deterministically into a
/// hidden branch whose end pays +10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareTransition {
    pub chain_length: usize,
    pub branch_length: usize,
    pub rare_state: usize,
    pub time_limit: usize,
    /// Position along the chain, or along the branch when `in_branch`.
    pub pos: usize,
    pub in_branch: bool,
    steps: usize,
    finished: bool,
}

impl RareTransition {
    pub const CHAIN: usize = 10;
    pub const BRANCH: usize = 4;
    pub const TIME_LIMIT: usize = 64;
    pub const RARE_COST: f64 = -0.1;
    pub const CHAIN_REWARD: f64 = 1.0;
    pub const BRANCH_REWARD: f64 = 10.0;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rare_state = rng.random_range(1..Self::CHAIN - 1);
        Self {
            chain_length: Self::CHAIN,
            branch_length: Self::BRANCH,
            rare_state,
            time_limit: Self::TIME_LIMIT,
            pos: 0,
            in_branch: false,
            steps: 0,
            finished: false,
        }
    }

    fn observe(&self) -> Vec<f32> {
        let mut obs = Vec::with_capacity(self.obs_dim());
        one_hot_into(&mut obs, (!self.in_branch).then_some(self.pos), self.chain_length);
        one_hot_into(&mut obs, self.in_branch.then_some(self.pos), self.branch_length);
        obs
    }
}

impl Environment for RareTransition {
    fn obs_dim(&self) -> usize {
        self.chain_length + self.branch_length
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn time_limit(&self) -> usize {
        self.time_limit
    }

    fn reset(&mut self) -> Vec<f32> {
        self.pos = 0;
        self.in_branch = false;
        self.steps = 0;
        self.finished = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if action >= 3 {
            return Err(EnvError::InvalidAction { action, num_actions: 3 });
        }
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        let mut base = 0.0;
        match action {
            0 => self.pos += 1,
            1 => {}
            _ => {
                base = Self::RARE_COST;
                if !self.in_branch && self.pos == self.rare_state {
                    self.in_branch = true;
                    self.pos = 0;
                }
            }
        }
        self.steps += 1;
        let end = if self.in_branch { self.branch_length } else { self.chain_length } - 1;
        self.pos = self.pos.min(end);
        let terminated = self.pos == end;
        let goal = match (terminated, self.in_branch) {
            (false, _) => 0.0,
            (true, false) => Self::CHAIN_REWARD,
            (true, true) => Self::BRANCH_REWARD,
        };
        let truncated = !terminated && self.steps >= self.time_limit;
        self.finished = terminated || truncated;
        let breakdown = RewardBreakdown::new(0.0, 0.0, goal, base);
        Ok(Step { obs: self.observe(), reward: breakdown.total, breakdown, terminated, truncated })
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noisy_tv_symbols_are_uniform() {
        let mut env = NoisyTv::with_layout(8, 8, usize::MAX, 3);
        env.reset();
        while env.pos < env.tv_cell {
            env.step(1).unwrap();
        }
        let visits = 10_000;
        let mut counts = vec![0usize; env.symbols];
        for _ in 0..visits {
            env.step(2).unwrap();
            counts[env.last_symbol.unwrap()] += 1;
        }
        let p = 1.0 / env.symbols as f64;
        let mean = visits as f64 * p;
        let sigma = (visits as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "count {c} vs mean {mean}");
        }
    }

    #[test]
    fn noisy_tv_is_quiet_elsewhere_and_pays_at_the_end() {
        let mut env = NoisyTv::new(1);
        let obs = env.reset();
        assert_eq!(obs.len(), env.obs_dim());
        assert!(obs[env.length..].iter().all(|&v| v == 0.0));
        let mut total = 0.0;
        loop {
            let step = env.step(1).unwrap();
            total += step.reward;
            if step.done() {
                assert!(step.terminated);
                break;
            }
        }
        assert_eq!(total, 1.0);
    }

    #[test]
    fn rare_branch_unreachable_by_advancing() {
        for seed in 0..50 {
            let mut env = RareTransition::new(seed);
            env.reset();
            let mut total = 0.0;
            loop {
                let step = env.step(0).unwrap();
                assert!(!env.in_branch);
                total += step.reward;
                if step.done() {
                    break;
                }
            }
            assert_eq!(total, RareTransition::CHAIN_REWARD);
        }
    }

    #[test]
    fn rare_action_enters_branch_only_at_its_state() {
        let mut env = RareTransition::new(7);
        env.reset();
        if env.rare_state > 0 {
            let step = env.step(2).unwrap();
            assert!(!env.in_branch);
            assert_eq!(step.reward, RareTransition::RARE_COST);
        }
        while env.pos < env.rare_state {
            env.step(0).unwrap();
        }
        env.step(2).unwrap();
        assert!(env.in_branch);
        let mut last = None;
        for _ in 0..env.branch_length {
            let s = env.step(0).unwrap();
            let done = s.done();
            last = Some(s);
            if done {
                break;
            }
        }
        assert_eq!(last.unwrap().breakdown.goal, RareTransition::BRANCH_REWARD);
    }

    #[test]
    fn layouts_are_seeded() {
        assert_eq!(NoisyTv::new(5).tv_cell, NoisyTv::new(5).tv_cell);
        assert_eq!(RareTransition::new(5), RareTransition::new(5));
        let tv: std::collections::BTreeSet<_> = (0..20).map(|s| NoisyTv::new(s).tv_cell).collect();
        assert!(tv.len() > 1);
        assert!(matches!(RareTransition::new(0).step(3), Err(EnvError::InvalidAction { .. })));
    }
}
