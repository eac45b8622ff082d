//! Episode statistics and their text forms.

use serde::Serialize;

use super::{EpisodeSpec, EvalConfig};

/// Mean and 95% half-width `1.96·σ/√n`, with `σ` the sample standard
/// deviation. A single episode gives a zero half-width.
pub fn episode_stats(accs: &[f64]) -> (f64, f64) {
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    if accs.len() < 2 {
        return (mean, 0.0);
    }
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// One run's summary, emitted as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run: usize,
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub mode: &'static str,
    pub mean: f64,
    pub ci95: f64,
    /// Median of the run means over all runs of the evaluation.
    pub median_of_runs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<MetricsRecord>,
    /// Per-run episode accuracies in episode order.
    pub accuracies: Vec<Vec<f64>>,
    pub median: f64,
}

impl EvalReport {
    pub fn from_runs(runs: Vec<Vec<f64>>, spec: &EpisodeSpec, cfg: &EvalConfig) -> Self {
        let stats: Vec<(f64, f64)> = runs.iter().map(|a| episode_stats(a)).collect();
        let med = median(&stats.iter().map(|s| s.0).collect::<Vec<_>>());
        let records = stats
            .iter()
            .enumerate()
            .map(|(run, &(mean, ci95))| MetricsRecord {
                run,
                episodes: runs[run].len(),
                ways: spec.ways,
                shots: spec.shots,
                queries: spec.queries,
                mode: cfg.mode.name(),
                mean,
                ci95,
                median_of_runs: med,
            })
            .collect();
        Self {
            records,
            accuracies: runs,
            median: med,
        }
    }

    /// Mean accuracy of the first run.
    pub fn mean(&self) -> f64 {
        self.records[0].mean
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("run,episodes,ways,shots,queries,mode,mean,ci95,median_of_runs\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.run,
                r.episodes,
                r.ways,
                r.shots,
                r.queries,
                r.mode,
                r.mean,
                r.ci95,
                r.median_of_runs
            ));
        }
        out
    }
}
