//! Sample-set metrics and their CSV/JSONL records.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::frames::Frames;
use crate::sampler::Counters;
use crate::stats::mean;
use crate::synthdata::{reward, LatentSequence, RewardWeights, World};
use crate::{Error, Result};

pub const CSV_HEADER: &str = "step,objective,fidelity,reward,reg,diversity,dynamic_degree,nfe,verify_count,wall_ms";

/// One row of a metrics file. Training rows leave the sample-set fields
/// empty; evaluation rows carry the mean oracle log-lik as `fidelity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub objective: String,
    pub fidelity: f64,
    pub reward: f64,
    pub reg: Option<f64>,
    pub diversity: Option<f64>,
    pub dynamic_degree: Option<f64>,
    pub nfe: u64,
    pub verify_count: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.objective,
            self.fidelity,
            self.reward,
            cell(self.reg),
            cell(self.diversity),
            cell(self.dynamic_degree),
            self.nfe,
            self.verify_count,
            self.wall_ms
        )
    }

    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.fidelity.is_finite() && self.reward.is_finite() && self.wall_ms.is_finite() && opt(self.reg) && opt(self.diversity) && opt(self.dynamic_degree)
    }
}

/// Appends records to `path` (header written when the file is new).
pub fn append(path: &Path, format: Format, records: &[MetricsRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    match format {
        Format::Csv => {
            if fresh {
                buf.push_str(CSV_HEADER);
                buf.push('\n');
            }
            for r in records {
                buf.push_str(&r.csv_row());
                buf.push('\n');
            }
        }
        Format::Jsonl => {
            for r in records {
                buf.push_str(&serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?);
                buf.push('\n');
            }
        }
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean pairwise cosine similarity within groups of equal condition
/// (lower is more diverse). `None` when no condition has two samples.
pub fn diversity(samples: &[LatentSequence]) -> Option<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    let mut seen = vec![false; samples.len()];
    for i in 0..samples.len() {
        if seen[i] {
            continue;
        }
        let group: Vec<usize> = (i..samples.len()).filter(|&j| samples[j].condition == samples[i].condition).collect();
        group.iter().for_each(|&j| seen[j] = true);
        let flat: Vec<Vec<f64>> = group.iter().map(|&j| samples[j].flatten()).collect();
        for a in 0..flat.len() {
            for b in a + 1..flat.len() {
                sum += cosine(&flat[a], &flat[b]);
                pairs += 1;
            }
        }
    }
    (pairs > 0).then(|| sum / pairs as f64)
}

/// Mean L2 distance between frames `interval` apart.
pub fn dynamic_degree(video: &Frames, interval: usize) -> Result<f64> {
    if interval == 0 || interval >= video.rows {
        return Err(Error::Invalid(format!("interval {interval} for {} frames", video.rows)));
    }
    let n = video.rows - interval;
    let total: f64 = (0..n)
        .map(|t| {
            video
                .row(t + interval)
                .iter()
                .zip(video.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Summary of a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub loglik: f64,
    pub reward: f64,
    pub diversity: f64,
    pub dynamic_degree: f64,
}

pub fn eval_metrics(samples: &[LatentSequence], world: &World, w: &RewardWeights, interval: usize) -> Result<SampleMetrics> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty sample set".into()));
    }
    let ll: Vec<f64> = samples.iter().map(|s| world.oracle_loglik(s)).collect::<Result<_>>()?;
    let rw: Vec<f64> = samples.iter().map(|s| reward(s, w)).collect::<Result<_>>()?;
    let dd: Vec<f64> = samples.iter().map(|s| dynamic_degree(&s.to_frames(), interval)).collect::<Result<_>>()?;
    let div = diversity(samples).ok_or_else(|| Error::Invalid("diversity needs two samples of one condition".into()))?;
    let m = SampleMetrics {
        loglik: mean(&ll),
        reward: mean(&rw),
        diversity: div,
        dynamic_degree: mean(&dd),
    };
    if ![m.loglik, m.reward, m.diversity, m.dynamic_degree].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(m)
}

/// Evaluation row from sample metrics and the sampler's counters.
pub fn eval_record(step: u64, objective: &str, m: &SampleMetrics, counters: &Counters, wall_ms: f64) -> MetricsRecord {
    MetricsRecord {
        step,
        objective: objective.to_string(),
        fidelity: m.loglik,
        reward: m.reward,
        reg: None,
        diversity: Some(m.diversity),
        dynamic_degree: Some(m.dynamic_degree),
        nfe: counters.nfe(),
        verify_count: counters.verify,
        wall_ms,
    }
}
