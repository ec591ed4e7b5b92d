//! Planning-call latency over a grid of horizons and candidate counts.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::metrics::Moments;
use super::rng::RunStreams;
use super::HarnessError;
use crate::agent::ActorCritic;
use crate::envs::Environment;
use crate::planner::{self, PlannerConfig};
use crate::worldmodel::WorldModel;

pub const DEFAULT_HORIZONS: [usize; 4] = [2, 4, 8, 16];
pub const DEFAULT_CHOICES: [usize; 8] = [2, 4, 8, 16, 32, 64, 128, 256];
pub const MIN_REPEATS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCell {
    pub horizon: usize,
    pub candidates: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub horizons: Vec<usize>,
    pub choices: Vec<usize>,
    /// Row-major over horizons, then choices.
    pub cells: Vec<TimingCell>,
}

impl TimingTable {
    pub fn get(&self, horizon: usize, candidates: usize) -> Option<&TimingCell> {
        self.cells.iter().find(|c| c.horizon == horizon && c.candidates == candidates)
    }

    /// Mean over all candidate counts of time(H = hi) / time(H = lo).
    pub fn horizon_ratio(&self, hi: usize, lo: usize) -> Option<f64> {
        let ratios: Vec<f64> = self
            .choices
            .iter()
            .filter_map(|&n| Some(self.get(hi, n)?.mean_seconds / self.get(lo, n)?.mean_seconds))
            .collect();
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }

    /// Relative change of mean time from `n_lo` to `n_hi` candidates at one horizon.
    pub fn candidate_change(&self, horizon: usize, n_lo: usize, n_hi: usize) -> Option<f64> {
        let (lo, hi) = (self.get(horizon, n_lo)?.mean_seconds, self.get(horizon, n_hi)?.mean_seconds);
        Some((hi - lo).abs() / lo)
    }

    /// Horizons as rows, candidate counts as columns, `mean ± std` in ms.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| H \\ N |");
        for n in &self.choices {
            let _ = write!(out, " {n} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.choices.len()));
        out.push('\n');
        for &h in &self.horizons {
            let _ = write!(out, "| {h} |");
            for &n in &self.choices {
                let c = self.get(h, n).expect("full grid");
                let _ = write!(out, " {:.2} ± {:.2} |", c.mean_seconds * 1e3, c.std_seconds * 1e3);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,candidates,mean_seconds,std_seconds,repeats\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.horizon, c.candidates, c.mean_seconds, c.std_seconds, c.repeats);
        }
        out
    }
}

/// Times `repeats` planning calls per grid cell on models built from `cfg`
/// (freshly initialized), from the state after the first observation.
pub fn run_bench(cfg: &Config, horizons: &[usize], choices: &[usize], repeats: usize) -> Result<TimingTable, HarnessError> {
    cfg.validate()?;
    let mut rng = RunStreams::new(cfg.seed);
    let mut env = cfg.make_env(rng.env.random())?;
    let obs = env.reset();
    let wm_cfg = cfg.world_model(env.obs_dim(), env.num_actions());
    let wm = WorldModel::<f32>::new(wm_cfg.clone(), &mut rng.model_init);
    let ac = ActorCritic::new(cfg.agent(), wm_cfg.feature_dim(), env.num_actions(), &mut rng.model_init);
    let x = Array2::from_shape_vec((1, obs.len()), obs).expect("row");
    let (state, _) = wm.observe_first(&x, &mut rng.collect)?;

    let mut cells = Vec::with_capacity(horizons.len() * choices.len());
    for &horizon in horizons {
        for &candidates in choices {
            let pc = PlannerConfig { num_candidates: candidates, horizon, ..cfg.planner() };
            // One untimed call to warm caches and the allocator.
            planner::plan(&wm, &ac, &state, &pc, &mut rng.imagination)?;
            let mut secs = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                secs.push(planner::plan(&wm, &ac, &state, &pc, &mut rng.imagination)?.1.seconds);
            }
            let m = Moments::of(&secs).unwrap_or(Moments { mean: 0.0, std: 0.0, max: 0.0 });
            cells.push(TimingCell { horizon, candidates, mean_seconds: m.mean, std_seconds: m.std, repeats });
        }
    }
    Ok(TimingTable { horizons: horizons.to_vec(), choices: choices.to_vec(), cells })
}
