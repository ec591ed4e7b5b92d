//! Metric records, the JSON-lines sink, and cross-seed aggregation.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metaplanner::{MetaTransition, P_GRID};

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("metrics i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed metrics line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Mean, population standard deviation and maximum of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Option<Moments> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Moments { mean, std, max })
    }
}

/// Replan behaviour within one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplanStats {
    /// Effective replan probability `p²` per step.
    pub probability: Moments,
    /// Steps between consecutive replans; absent with fewer than two.
    pub length_before_replan: Option<Moments>,
    pub replans: usize,
}

pub fn replan_stats(transitions: &[MetaTransition]) -> Option<ReplanStats> {
    let probs: Vec<f64> = transitions.iter().map(|t| P_GRID[t.action] * P_GRID[t.action]).collect();
    let replans: Vec<usize> = transitions.iter().enumerate().filter(|(_, t)| t.implemented).map(|(i, _)| i).collect();
    let gaps: Vec<f64> = replans.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    Some(ReplanStats { probability: Moments::of(&probs)?, length_before_replan: Moments::of(&gaps), replans: replans.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub run_id: String,
    pub seed: u64,
    /// Environment steps taken when the episode ended.
    pub step: u64,
    pub episode: u64,
    /// Sum of the rewards the agent received.
    pub ret: f64,
    /// Sum of the unscaled reward components.
    pub raw_return: f64,
    pub length: usize,
    pub terminated: bool,
    pub replan: Option<ReplanStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub update: u64,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaUpdateRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Episode(EpisodeRecord),
    Update(UpdateRecord),
    MetaUpdate(MetaUpdateRecord),
}

/// Wall-clock of one planning call; kept out of the metric stream so that
/// stream stays reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCallRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub horizon: usize,
    pub candidates: usize,
    pub seconds: f64,
}

#[derive(Serialize)]
struct Line<'a, R> {
    schema: u32,
    #[serde(flatten)]
    record: &'a R,
}

#[derive(Deserialize)]
struct OwnedLine<R> {
    schema: u32,
    #[serde(flatten)]
    record: R,
}

/// Append-only JSON-lines writer.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self { out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?) })
    }

    pub fn write<R: Serialize>(&mut self, record: &R) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, &Line { schema: METRICS_SCHEMA, record }).map_err(std::io::Error::other)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: OwnedLine<R> = serde_json::from_str(&line).map_err(|e| MetricsError::Parse { line: i + 1, reason: e.to_string() })?;
        if parsed.schema != METRICS_SCHEMA {
            return Err(MetricsError::Parse { line: i + 1, reason: format!("schema {} (expected {METRICS_SCHEMA})", parsed.schema) });
        }
        out.push(parsed.record);
    }
    Ok(out)
}

/// Trailing moving average over `max(1, round(fraction · n))` points.
pub fn rolling_mean(xs: &[f64], fraction: f64) -> Vec<f64> {
    let w = ((fraction * xs.len() as f64).round() as usize).max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// A per-episode curve across seeds: solid mean, band and dotted max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub band: Vec<f64>,
    pub max: Vec<f64>,
}

impl Curve {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn smoothed(&self, fraction: f64) -> Curve {
        Curve { mean: rolling_mean(&self.mean, fraction), band: rolling_mean(&self.band, fraction), max: rolling_mean(&self.max, fraction) }
    }

    /// Averages of each trace over all episodes.
    pub fn overall(&self) -> Moments {
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Moments { mean: avg(&self.mean), std: avg(&self.band), max: avg(&self.max) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    /// Episodes per seed used in the curves (the shortest seed's count).
    pub episodes: usize,
    /// Learning curves: mean, standard deviation and maximum across seeds.
    pub ret: Curve,
    pub length: Curve,
    /// Planner metrics: within-episode mean, std and max, each averaged
    /// across seeds.
    pub replan_probability: Option<Curve>,
    pub length_before_replan: Option<Curve>,
}

/// Groups episode records by seed, aligns them by episode order and
/// aggregates per episode index across seeds. Curves are unsmoothed; use
/// [`Curve::smoothed`] with 0.1 for the rolling-window view.
pub fn aggregate_metrics(records: &[EpisodeRecord]) -> Result<Summary, MetricsError> {
    let mut by_seed: BTreeMap<u64, Vec<&EpisodeRecord>> = BTreeMap::new();
    for r in records {
        by_seed.entry(r.seed).or_default().push(r);
    }
    let episodes = by_seed.values().map(Vec::len).min().ok_or(MetricsError::EmptyInput)?;
    if episodes == 0 {
        return Err(MetricsError::EmptyInput);
    }
    for eps in by_seed.values_mut() {
        eps.sort_by_key(|r| r.episode);
    }
    let across = |f: &dyn Fn(&EpisodeRecord) -> f64| -> Curve {
        let mut c = Curve { mean: vec![], band: vec![], max: vec![] };
        for i in 0..episodes {
            let xs: Vec<f64> = by_seed.values().map(|eps| f(eps[i])).collect();
            let m = Moments::of(&xs).expect("at least one seed");
            c.mean.push(m.mean);
            c.band.push(m.std);
            c.max.push(m.max);
        }
        c
    };
    // Within-episode moments averaged across seeds; episodes lacking the
    // statistic are skipped at that index.
    let planner = |f: &dyn Fn(&ReplanStats) -> Option<Moments>| -> Option<Curve> {
        let mut c = Curve { mean: vec![], band: vec![], max: vec![] };
        for i in 0..episodes {
            let ms: Vec<Moments> = by_seed.values().filter_map(|eps| eps[i].replan.as_ref().and_then(f)).collect();
            if ms.is_empty() {
                continue;
            }
            let n = ms.len() as f64;
            c.mean.push(ms.iter().map(|m| m.mean).sum::<f64>() / n);
            c.band.push(ms.iter().map(|m| m.std).sum::<f64>() / n);
            c.max.push(ms.iter().map(|m| m.max).sum::<f64>() / n);
        }
        (!c.is_empty()).then_some(c)
    };
    Ok(Summary {
        seeds: by_seed.keys().copied().collect(),
        episodes,
        ret: across(&|r| r.ret),
        length: across(&|r| r.length as f64),
        replan_probability: planner(&|s| Some(s.probability)),
        length_before_replan: planner(&|s| s.length_before_replan),
    })
}
