use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ShiftSpec, FEW_SHOT_MAX_PER_CLASS};
use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::losses::{G4Sign, LossWeights};
use crate::models::Architecture;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    /// Source classifier applied to the target as is.
    Wa,
    /// Head retrained on the labeled target points, encoder frozen.
    Ft,
    Degnet,
    DegnetNoDiversity,
    /// One generator per class, no diversity term.
    SeparateGen,
    /// Adds a supervised term on generated data during adaptation.
    DegnetGenSupervised,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Wa,
        Method::Ft,
        Method::Degnet,
        Method::DegnetNoDiversity,
        Method::SeparateGen,
        Method::DegnetGenSupervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wa => "WA",
            Method::Ft => "FT",
            Method::Degnet => "DEGNET",
            Method::DegnetNoDiversity => "DEGNET_NO_DIVERSITY",
            Method::SeparateGen => "SEPARATE_GEN",
            Method::DegnetGenSupervised => "DEGNET_GEN_SUPERVISED",
        }
    }

    pub fn is_generative(self) -> bool {
        !matches!(self, Method::Wa | Method::Ft)
    }

    /// Whether the method can put the diversity term on the generator loss.
    pub fn uses_diversity(self) -> bool {
        matches!(self, Method::Degnet | Method::DegnetGenSupervised)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic source/target task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub shift: ShiftSpec,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            dim: 2,
            spread: 0.6,
            source_per_class: 200,
            target_per_class: 200,
            shift: ShiftSpec::default(),
        }
    }
}

/// Cross-entropy training of the source classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Training stops once train accuracy reaches this.
    pub target_accuracy: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_epochs: 1000,
            target_accuracy: 0.98,
        }
    }
}

/// Declarative description of one experiment over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::labeled_per_class")]
    pub labeled_per_class: usize,
    /// Total generator epochs.
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::gen_pretrain_epochs")]
    pub gen_pretrain_epochs: usize,
    #[serde(default = "defaults::disc_pretrain_epochs")]
    pub disc_pretrain_epochs: usize,
    /// Number of final epochs in which the classifier is adapted.
    #[serde(default = "defaults::adaptation_steps")]
    pub adaptation_steps: usize,
    /// Generated samples per class per epoch.
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr_gen")]
    pub lr_gen: f64,
    #[serde(default = "defaults::lr_gen")]
    pub lr_disc: f64,
    #[serde(default = "defaults::lr_classifier")]
    pub lr_classifier: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub g4_sign: G4Sign,
    #[serde(default)]
    pub similarity_class_restricted: bool,
    #[serde(default)]
    pub pretrain_with_diversity: bool,
    #[serde(default)]
    pub freeze_generator_in_adaptation: bool,
    /// Generated samples per class in the supervised adaptation term.
    #[serde(default)]
    pub generated_per_class: usize,
    #[serde(default = "defaults::pairs_per_group")]
    pub pairs_per_group: usize,
    /// Batches averaged for the final diversity measurement.
    #[serde(default = "defaults::diversity_batches")]
    pub diversity_batches: usize,
    /// Head-retraining steps of the fine-tuning baseline.
    #[serde(default = "defaults::ft_steps")]
    pub ft_steps: usize,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub architecture: Architecture,
    /// Write measured per-epoch wall time instead of 0. Off by default so
    /// that metrics files are reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
}

mod defaults {
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2, 3, 4]
    }
    pub fn labeled_per_class() -> usize {
        5
    }
    pub fn epochs() -> usize {
        600
    }
    pub fn gen_pretrain_epochs() -> usize {
        300
    }
    pub fn disc_pretrain_epochs() -> usize {
        100
    }
    pub fn adaptation_steps() -> usize {
        50
    }
    pub fn batch() -> usize {
        32
    }
    pub fn lr_gen() -> f64 {
        1e-4
    }
    pub fn lr_classifier() -> f64 {
        1e-3
    }
    pub fn pairs_per_group() -> usize {
        32
    }
    pub fn diversity_batches() -> usize {
        50
    }
    pub fn ft_steps() -> usize {
        200
    }
}

impl ExperimentConfig {
    /// All defaults for `method`.
    pub fn for_method(method: Method) -> Self {
        serde_json::from_value(serde_json::json!({ "method": method })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.classes < 2 {
            return Err(Error::config("task.classes", "needs at least 2 classes"));
        }
        if t.dim < 2 {
            return Err(Error::config("task.dim", "needs at least 2 dimensions"));
        }
        if !(t.spread >= 0.0 && t.spread.is_finite()) {
            return Err(Error::config("task.spread", "must be a finite value >= 0"));
        }
        if t.source_per_class == 0 {
            return Err(Error::config("task.source_per_class", "must be positive"));
        }
        t.shift.validate(t.dim)?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "needs at least one seed"));
        }
        if self.labeled_per_class == 0 {
            return Err(Error::config("labeled_per_class", "must be at least 1"));
        }
        if t.target_per_class < self.labeled_per_class + 10 {
            return Err(Error::config(
                "task.target_per_class",
                format!(
                    "needs at least labeled_per_class + 10 = {}",
                    self.labeled_per_class + 10
                ),
            ));
        }
        for (field, v) in [
            ("lr_gen", self.lr_gen),
            ("lr_disc", self.lr_disc),
            ("lr_classifier", self.lr_classifier),
            ("source.learning_rate", self.source.learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be > 0, got {v}")));
            }
        }
        if !(self.source.target_accuracy > 0.0 && self.source.target_accuracy <= 1.0) {
            return Err(Error::config("source.target_accuracy", "must be in (0, 1]"));
        }
        self.weights.validate()?;
        self.kernel.validate()?;
        self.architecture.validate()?;
        if self.method.is_generative() {
            if self.epochs == 0 {
                return Err(Error::config("epochs", "must be positive"));
            }
            if self.adaptation_steps == 0 || self.adaptation_steps > self.epochs {
                return Err(Error::config(
                    "adaptation_steps",
                    format!("must be in 1..={} (epochs)", self.epochs),
                ));
            }
            if self.batch < 2 {
                return Err(Error::config("batch", "needs at least 2 samples per class"));
            }
            if self.pairs_per_group == 0 {
                return Err(Error::config("pairs_per_group", "must be positive"));
            }
            if self.diversity_batches == 0 {
                return Err(Error::config("diversity_batches", "must be positive"));
            }
            if self.generated_per_class > self.batch {
                return Err(Error::config(
                    "generated_per_class",
                    format!("cannot exceed batch = {}", self.batch),
                ));
            }
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.labeled_per_class > FEW_SHOT_MAX_PER_CLASS {
            out.push(format!(
                "labeled_per_class = {} exceeds the few-shot setting of at most {FEW_SHOT_MAX_PER_CLASS} labeled samples per class",
                self.labeled_per_class
            ));
        }
        if self.method.is_generative() && self.gen_pretrain_epochs > self.epochs - self.adaptation_steps {
            out.push("generator pretraining overlaps the adaptation phase".into());
        }
        if self.generated_per_class > 0 && self.method != Method::DegnetGenSupervised {
            out.push(format!("generated_per_class is ignored by {}", self.method));
        }
        out
    }

    /// Effective diversity weight for `method` at `epoch`.
    pub(crate) fn diversity_active(&self, epoch: usize) -> bool {
        self.method.uses_diversity()
            && self.weights.beta > 0.0
            && (epoch >= self.gen_pretrain_epochs || self.pretrain_with_diversity)
    }
}
