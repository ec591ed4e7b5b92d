use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use foresight::distmath::{self, GroupedCategorical};
use foresight::envs::{connectivity_check, generate_maze, proximity_reward, Maze};
use foresight::harness::bench::{DEFAULT_CHOICES, DEFAULT_HORIZONS};
use foresight::harness::{export_plots, run_ablation, run_bench, run_train, AblationMode, Config, ConfigError, HarnessError};
use foresight::metaplanner::{compute_gae, replan_given, P_GRID};
use foresight::planner::{select_plan, ScoredTrajectory};

#[derive(Parser)]
#[command(name = "foresight", version, about = "World-model planning with a learned replan policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key: value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics, config and a checkpoint to `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Train one ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// mpc, entropy_only, reward_only or mixed.
        #[arg(long)]
        mode: String,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Time planning calls over a grid of horizons and candidate counts.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        choices: Option<Vec<usize>>,
        #[arg(long, default_value_t = 30)]
        repeats: usize,
        /// Directory for timing.md and timing.csv; stdout only if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a freshly generated maze as ASCII, or as a pixmap with `--out`.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run directories into CSV tables and curve images.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Fast self-checks of the exact math against direct computation.
    TestOracles,
}

fn load_config(common: &Common) -> Result<Config, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for spec in &common.overrides {
        cfg.apply_override(spec)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<AblationMode, ConfigError> {
    let mut probe = Config::default();
    probe.set("ablation", s)?;
    Ok(probe.ablation)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let summary = run_train(cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Ablate { common, mode, out } => {
            let cfg = load_config(&common)?;
            let summary = run_ablation(cfg, parse_mode(&mode)?, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Bench { common, horizons, choices, repeats, out } => {
            let cfg = load_config(&common)?;
            let horizons = horizons.unwrap_or_else(|| DEFAULT_HORIZONS.to_vec());
            let choices = choices.unwrap_or_else(|| DEFAULT_CHOICES.to_vec());
            let table = run_bench(&cfg, &horizons, &choices, repeats)?;
            print!("{}", table.to_markdown());
            if let Some(dir) = out {
                write_file(&dir.join("timing.md"), table.to_markdown().as_bytes())?;
                write_file(&dir.join("timing.csv"), table.to_csv().as_bytes())?;
            }
        }
        Command::Render { common, out } => {
            let cfg = load_config(&common)?;
            let maze = Maze::new(cfg.maze_spec(), cfg.seed);
            match out {
                Some(path) => write_file(&path, &maze.render_ppm())?,
                None => print!("{}", maze.render_ascii()),
            }
        }
        Command::Plot { runs, out } => {
            let report = export_plots(&runs, &out)?;
            println!("{} episode records", report.records);
            for f in report.files {
                println!("{}", f.display());
            }
        }
        Command::TestOracles => {
            let results = oracles();
            for (name, ok) in &results {
                println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
            }
            anyhow::ensure!(results.iter().all(|(_, ok)| *ok), "oracle check failed");
        }
    }
    Ok(())
}

fn direct_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

fn oracles() -> Vec<(&'static str, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();

    let uniform = GroupedCategorical::uniform(1, 4);
    let half = GroupedCategorical::new(1, 3, vec![0.5, 0.25, 0.25]).expect("valid");
    out.push((
        "entropy: uniform, one-hot and direct sum",
        (distmath::entropy(&uniform) - 4f64.ln()).abs() < 1e-9
            && distmath::entropy(&GroupedCategorical::new(1, 3, vec![1.0, 0.0, 0.0]).expect("valid")) == 0.0
            && (distmath::entropy(&half) - direct_entropy(&[0.5, 0.25, 0.25])).abs() < 1e-9,
    ));

    let q = GroupedCategorical::new(1, 2, vec![0.5, 0.5]).expect("valid");
    let p = GroupedCategorical::new(1, 2, vec![0.75, 0.25]).expect("valid");
    let kl_direct = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    out.push(("kl: direct sum", distmath::kl_divergence(&q, &p).is_ok_and(|v| (v - kl_direct).abs() < 1e-9)));

    let mut ig_ok = true;
    for _ in 0..200 {
        let mut joint = ndarray::Array2::<f64>::from_shape_fn((3, 4), |_| rng.random::<f64>());
        let s = joint.sum();
        joint /= s;
        let a = distmath::information_gain(&joint.view());
        let b = distmath::information_gain_expected_kl(&joint.view());
        ig_ok &= (a - b).abs() < 1e-9 && a >= -1e-12;
    }
    let diag = array![[0.4, 0.1], [0.1, 0.4]];
    let h_y = direct_entropy(&[0.5, 0.5]);
    let h_y_given_x = direct_entropy(&[0.8, 0.2]);
    ig_ok &= (distmath::information_gain(&diag.view()) - (h_y - h_y_given_x)).abs() < 1e-9;
    out.push(("information gain: both forms agree", ig_ok));

    let mut sel_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let cands: Vec<ScoredTrajectory> = (0..n)
            .map(|i| ScoredTrajectory {
                actions: vec![i],
                cum_reward: 0.0,
                cum_entropy: 0.0,
                score: rng.random_range(0..4) as f64,
                final_feature: vec![],
                root: 0,
            })
            .collect();
        let mut best = 0;
        for (i, c) in cands.iter().enumerate() {
            if c.score > cands[best].score {
                best = i;
            }
        }
        sel_ok &= select_plan(&cands).is_ok_and(|plan| plan.actions == vec![best]);
    }
    out.push(("plan selection: first maximum", sel_ok));

    let draws = 20_000;
    let rates_ok = (0..P_GRID.len()).all(|k| {
        let p2 = P_GRID[k] * P_GRID[k];
        let hits = (0..draws).filter(|_| replan_given(k, rng.random::<f64>())).count() as f64;
        let sigma = (p2 * (1.0 - p2) / draws as f64).sqrt();
        (hits / draws as f64 - p2).abs() <= 3.0 * sigma + 1e-12
    });
    out.push(("replan rate: u < p squared", rates_ok));

    let mut gae_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..12);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        let (g, l) = (0.99, 0.95);
        let (adv, _) = compute_gae(&r, &v, &d, g, l);
        for t in 0..n {
            let (mut acc, mut w) = (0.0, 1.0);
            for k in t..n {
                let live = if d[k] { 0.0 } else { 1.0 };
                acc += w * (r[k] + g * live * v[k + 1] - v[k]);
                if d[k] {
                    break;
                }
                w *= g * l;
            }
            gae_ok &= (acc - adv[t]).abs() < 1e-9;
        }
    }
    out.push(("gae: nested sum", gae_ok));

    let mut maze_ok = true;
    for seed in 0..50 {
        for porosity in [0.0, 0.5, 1.0] {
            let spec = foresight::envs::MazeSpec { porosity, ..Default::default() };
            maze_ok &= connectivity_check(&generate_maze(&spec, seed));
        }
    }
    maze_ok &= (proximity_reward(0.0, 0.0, 0.0, 0.0, 10.0, 0.03) - 3.0).abs() < 1e-12;
    out.push(("maze: connectivity and proximity", maze_ok));
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if err.downcast_ref::<ConfigError>().is_some()
                || matches!(err.downcast_ref::<HarnessError>(), Some(HarnessError::Config(_)))
            {
                2
            } else if err.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_numeric) {
                3
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
