use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Method;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "epoch,phase,loss_c,loss_s,loss_d,loss_gd,loss_D,loss_f,eval_acc,diversity_semantic,diversity_raw,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Source classifier applied without adaptation.
    Evaluate,
    /// Head retraining of the fine-tuning baseline.
    FineTune,
    /// Generator updates before the diversity term is switched on.
    GenPretrain,
    Generate,
    /// Final epochs in which the classifier and discriminator are updated.
    Adapt,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Evaluate => "evaluate",
            Phase::FineTune => "fine_tune",
            Phase::GenPretrain => "gen_pretrain",
            Phase::Generate => "generate",
            Phase::Adapt => "adapt",
        }
    }
}

/// One metrics row. Losses not computed in an epoch are `None` and written
/// as empty cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_c: Option<f64>,
    pub loss_s: Option<f64>,
    pub loss_d: Option<f64>,
    pub loss_gd: Option<f64>,
    /// Discriminator loss; for the adaptation epochs, after its update.
    pub loss_disc: Option<f64>,
    pub loss_f: Option<f64>,
    pub eval_acc: f64,
    pub diversity_semantic: Option<f64>,
    pub diversity_raw: Option<f64>,
    pub wall_ms: u64,
}

impl EpochMetrics {
    pub fn new(epoch: usize, phase: Phase, eval_acc: f64) -> Self {
        Self {
            epoch,
            phase,
            loss_c: None,
            loss_s: None,
            loss_d: None,
            loss_gd: None,
            loss_disc: None,
            loss_f: None,
            eval_acc,
            diversity_semantic: None,
            diversity_raw: None,
            wall_ms: 0,
        }
    }

    fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase.name(),
            cell(self.loss_c),
            cell(self.loss_s),
            cell(self.loss_d),
            cell(self.loss_gd),
            cell(self.loss_disc),
            cell(self.loss_f),
            self.eval_acc,
            cell(self.diversity_semantic),
            cell(self.diversity_raw),
            self.wall_ms
        )
    }
}

/// Everything measured in one (config, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    pub labeled_per_class: usize,
    pub source_train_accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Accuracy of the final classifier on the held-out target set.
    pub final_accuracy: f64,
    /// Accuracy of the final classifier on the labeled target points.
    pub labeled_accuracy: f64,
    /// Mean diversity of generated semantic features over fresh batches.
    pub final_diversity_semantic: Option<f64>,
    pub final_diversity_raw: Option<f64>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.epochs.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for row in &self.epochs {
            let _ = writeln!(out, "{}", row.csv_row());
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub median: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            median: median(values),
            values: values.to_vec(),
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Across-seed summary of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub labeled_per_class: usize,
    pub seeds: Vec<u64>,
    pub accuracy: Stat,
    pub source_train_accuracy: Stat,
    pub diversity_semantic: Option<Stat>,
    pub diversity_raw: Option<Stat>,
}

impl Summary {
    pub fn from_runs(runs: &[RunMetrics]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::invalid("summary of zero runs"))?;
        let collect = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Option<Stat> {
            let v: Option<Vec<f64>> = runs.iter().map(f).collect();
            v.and_then(|v| Stat::of(&v))
        };
        Ok(Self {
            method: first.method,
            labeled_per_class: first.labeled_per_class,
            seeds: runs.iter().map(|r| r.seed).collect(),
            accuracy: collect(&|r| Some(r.final_accuracy)).expect("non-empty"),
            source_train_accuracy: collect(&|r| Some(r.source_train_accuracy)).expect("non-empty"),
            diversity_semantic: collect(&|r| r.final_diversity_semantic),
            diversity_raw: collect(&|r| r.final_diversity_raw),
        })
    }

    pub fn file_stem(&self) -> String {
        format!("summary_{}_ml{}", self.method, self.labeled_per_class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.median, 2.5);
        assert_eq!(Stat::of(&[0.7]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn empty_losses_are_blank_cells() {
        let row = EpochMetrics::new(3, Phase::Evaluate, 0.5);
        assert_eq!(row.csv_row(), "3,evaluate,,,,,,,0.5,,,0");
        assert_eq!(row.csv_row().split(',').count(), METRICS_HEADER.split(',').count());
    }
}
