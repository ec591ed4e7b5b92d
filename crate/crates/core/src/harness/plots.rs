//! CSV and PPM export of learning curves and planner metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{aggregate_metrics, read_jsonl, Curve, EpisodeRecord, MetricRecord, MetricsError, Summary};
use super::train::METRICS_FILE;

/// Rolling-window fraction applied to exported curves.
pub const SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub records: usize,
    pub files: Vec<PathBuf>,
}

pub fn load_episodes(run_dirs: &[PathBuf]) -> Result<Vec<EpisodeRecord>, MetricsError> {
    let mut out = Vec::new();
    for dir in run_dirs {
        for r in read_jsonl::<MetricRecord>(&dir.join(METRICS_FILE))? {
            if let MetricRecord::Episode(e) = r {
                out.push(e);
            }
        }
    }
    Ok(out)
}

fn opt(v: Option<&super::metrics::ReplanStats>, f: impl Fn(&super::metrics::ReplanStats) -> Option<f64>) -> String {
    v.and_then(f).map(|x| x.to_string()).unwrap_or_default()
}

pub fn episodes_csv(episodes: &[EpisodeRecord]) -> String {
    let mut out = String::from(
        "run_id,seed,episode,step,return,raw_return,length,terminated,replan_p_mean,replan_p_std,replan_p_max,lbr_mean,lbr_std,lbr_max\n",
    );
    for e in episodes {
        let r = e.replan.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.run_id,
            e.seed,
            e.episode,
            e.step,
            e.ret,
            e.raw_return,
            e.length,
            e.terminated,
            opt(r, |s| Some(s.probability.mean)),
            opt(r, |s| Some(s.probability.std)),
            opt(r, |s| Some(s.probability.max)),
            opt(r, |s| s.length_before_replan.map(|m| m.mean)),
            opt(r, |s| s.length_before_replan.map(|m| m.std)),
            opt(r, |s| s.length_before_replan.map(|m| m.max)),
        );
    }
    out
}

/// One row per episode index: `mean, band, max` for each smoothed curve.
pub fn curves_csv(summary: &Summary) -> String {
    let curves: Vec<(&str, Option<Curve>)> = vec![
        ("return", Some(summary.ret.smoothed(SMOOTHING))),
        ("length", Some(summary.length.smoothed(SMOOTHING))),
        ("replan_p", summary.replan_probability.as_ref().map(|c| c.smoothed(SMOOTHING))),
        ("lbr", summary.length_before_replan.as_ref().map(|c| c.smoothed(SMOOTHING))),
    ];
    let mut out = String::from("index");
    for (name, _) in &curves {
        let _ = write!(out, ",{name}_mean,{name}_band,{name}_max");
    }
    out.push('\n');
    let rows = curves.iter().filter_map(|(_, c)| c.as_ref().map(Curve::len)).max().unwrap_or(0);
    for i in 0..rows {
        let _ = write!(out, "{i}");
        for (_, c) in &curves {
            match c.as_ref().filter(|c| i < c.len()) {
                Some(c) => {
                    let _ = write!(out, ",{},{},{}", c.mean[i], c.band[i], c.max[i]);
                }
                None => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    out
}

const W: usize = 480;
const H: usize = 240;
const MARGIN: usize = 12;

/// Line chart: shaded `mean ± band`, solid mean, dotted max.
pub fn render_curve(curve: &Curve) -> Vec<u8> {
    let mut px = vec![[255u8; 3]; W * H];
    let n = curve.len();
    let lo = curve.mean.iter().zip(&curve.band).map(|(m, b)| m - b).fold(f64::INFINITY, f64::min);
    let hi = curve.mean.iter().zip(&curve.band).map(|(m, b)| m + b).chain(curve.max.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if n == 0 || !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let (pw, ph) = (W - 2 * MARGIN, H - 2 * MARGIN);
    let xpix = |i: usize| MARGIN + if n <= 1 { 0 } else { i * (pw - 1) / (n - 1) };
    let ypix = |v: f64| {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        MARGIN + ph - 1 - (t * (ph - 1) as f64).round() as usize
    };
    for x in MARGIN..W - MARGIN {
        px[(H - MARGIN) * W + x] = [0, 0, 0];
    }
    for y in MARGIN..=H - MARGIN {
        px[y * W + MARGIN - 1] = [0, 0, 0];
    }
    for i in 0..n {
        let x = xpix(i);
        let x_next = if i + 1 < n { xpix(i + 1) } else { x + 1 };
        let (top, bottom) = (ypix(curve.mean[i] + curve.band[i]), ypix(curve.mean[i] - curve.band[i]));
        for xx in x..x_next.min(W - MARGIN) {
            for y in top..=bottom {
                px[y * W + xx] = [190, 210, 240];
            }
        }
    }
    let mut line = |ys: &[f64], color: [u8; 3], dotted: bool| {
        for i in 0..n {
            let (x0, y0) = (xpix(i) as i64, ypix(ys[i]) as i64);
            let (x1, y1) = if i + 1 < n { (xpix(i + 1) as i64, ypix(ys[i + 1]) as i64) } else { (x0, y0) };
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for k in 0..=steps {
                if dotted && (x0 + k * (x1 - x0) / steps) % 4 >= 2 {
                    continue;
                }
                let x = x0 + k * (x1 - x0) / steps;
                let y = y0 + k * (y1 - y0) / steps;
                px[y as usize * W + x as usize] = color;
            }
        }
    };
    line(&curve.max, [200, 40, 40], true);
    line(&curve.mean, [20, 40, 160], false);
    let mut out = format!("P6\n{W} {H}\n255\n").into_bytes();
    for p in px {
        out.extend_from_slice(&p);
    }
    out
}

/// Aggregates the episode records of `run_dirs` (one run per seed) and
/// writes `episodes.csv`, `curves.csv` and one image per curve to `out`.
pub fn export_plots(run_dirs: &[PathBuf], out: &Path) -> Result<ExportReport, MetricsError> {
    let episodes = load_episodes(run_dirs)?;
    let summary = aggregate_metrics(&episodes)?;
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> Result<(), MetricsError> {
        let p = out.join(name);
        std::fs::write(&p, bytes)?;
        files.push(p);
        Ok(())
    };
    write("episodes.csv", episodes_csv(&episodes).as_bytes())?;
    write("curves.csv", curves_csv(&summary).as_bytes())?;
    write("learning_curve_length.ppm", &render_curve(&summary.length.smoothed(SMOOTHING)))?;
    write("learning_curve_return.ppm", &render_curve(&summary.ret.smoothed(SMOOTHING)))?;
    if let Some(c) = &summary.replan_probability {
        write("replan_probability.ppm", &render_curve(&c.smoothed(SMOOTHING)))?;
    }
    if let Some(c) = &summary.length_before_replan {
        write("length_before_replan.ppm", &render_curve(&c.smoothed(SMOOTHING)))?;
    }
    Ok(ExportReport { records: episodes.len(), files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::{JsonlSink, Moments, ReplanStats};

    fn write_run(dir: &Path, seed: u64, n: u64) {
        std::fs::create_dir_all(dir).unwrap();
        let mut sink = JsonlSink::append(&dir.join(METRICS_FILE)).unwrap();
        for i in 0..n {
            let m = Moments { mean: 0.1 * i as f64, std: 0.05, max: 0.5 };
            let rec = EpisodeRecord {
                run_id: format!("r{seed}"),
                seed,
                step: 10 * i,
                episode: i,
                ret: (i + seed) as f64,
                raw_return: 0.0,
                length: (100 - i) as usize,
                terminated: true,
                replan: Some(ReplanStats { probability: m, length_before_replan: Some(m), replans: 2 }),
            };
            sink.write(&MetricRecord::Episode(rec)).unwrap();
        }
        sink.flush().unwrap();
    }

    #[test]
    fn export_is_lossless_deterministic_and_matches_aggregation() {
        let tmp = tempfile::tempdir().unwrap();
        let runs: Vec<PathBuf> = (0..3).map(|s| tmp.path().join(format!("run{s}"))).collect();
        for (s, dir) in runs.iter().enumerate() {
            write_run(dir, s as u64, 20);
        }
        let out = tmp.path().join("plots");
        let report = export_plots(&runs, &out).unwrap();
        assert_eq!(report.records, 60);
        let episodes = std::fs::read_to_string(out.join("episodes.csv")).unwrap();
        assert_eq!(episodes.lines().count(), 61);

        let first: Vec<Vec<u8>> = report.files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        let again = export_plots(&runs, &out).unwrap();
        let second: Vec<Vec<u8>> = again.files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(report.files.len(), 6);

        let summary = aggregate_metrics(&load_episodes(&runs).unwrap()).unwrap();
        let length = summary.length.smoothed(SMOOTHING);
        let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
        for (i, line) in curves.lines().skip(1).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[4].parse::<f64>().unwrap(), length.mean[i]);
            assert_eq!(cols[5].parse::<f64>().unwrap(), length.band[i]);
        }
    }

    #[test]
    fn flat_and_empty_curves_render() {
        let flat = Curve { mean: vec![1.0; 5], band: vec![0.0; 5], max: vec![1.0; 5] };
        assert_eq!(render_curve(&flat).len(), 15 + W * H * 3);
        let empty = Curve { mean: vec![], band: vec![], max: vec![] };
        assert_eq!(render_curve(&empty), render_curve(&empty));
    }
}
