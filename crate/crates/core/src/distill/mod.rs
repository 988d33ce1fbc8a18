//! Distribution-matching distillation over palette-condensed synthetic images.

mod dm;
mod eval;
mod metrics;
mod set;

pub use dm::{
    class_mean_gap, distill_run, dm_task_loss, mean_features, DistillOutput, Prepared, StepLog, ZcaLayer,
};
pub use eval::{accuracy, evaluate, evaluate_quantized, train_classifier, EvalConfig, EvalResult};
pub use metrics::export_metrics;
pub use set::{posthoc_quantize, raw_quantized, read_synthetic_dir, PosthocMethod, SyntheticSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the synthetic set is initialized from the real training images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    GraphCutQuantized,
    GraphCutReal,
    RandomReal,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph-cut-quantized" => Ok(Self::GraphCutQuantized),
            "graph-cut-real" => Ok(Self::GraphCutReal),
            "random-real" => Ok(Self::RandomReal),
            _ => Err(Error::Parameter(format!("unknown init method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub ipc: usize,
    pub iterations: usize,
    pub image_lr: f64,
    pub image_momentum: f64,
    /// Real images sampled per class each iteration.
    pub real_batch: usize,
    /// Synthetic images per class entering each iteration; `None` uses all.
    pub synthetic_batch: Option<usize>,
    pub net_width: usize,
    pub net_depth: usize,
    pub zca: bool,
    pub zca_eps: f64,
    pub seed: u64,
    pub log_every: usize,
    pub init: InitMethod,
    /// Graph-cut coverage weight.
    pub lambda: f64,
    /// Colors of the joint Median Cut applied before scoring; `None` uses `palette.k`.
    pub init_colors: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            iterations: 2000,
            image_lr: 1.0,
            image_momentum: 0.5,
            real_batch: 256,
            synthetic_batch: None,
            net_width: 64,
            net_depth: 3,
            zca: true,
            zca_eps: crate::io::DEFAULT_ZCA_EPS,
            seed: 0,
            log_every: 10,
            init: InitMethod::GraphCutQuantized,
            lambda: 1.0,
            init_colors: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ipc == 0 || self.real_batch == 0 || self.net_width == 0 || self.net_depth == 0 || self.log_every == 0 {
            return bad("distill counts (ipc, real_batch, net_width, net_depth, log_every) must be positive".into());
        }
        if let Some(b) = self.synthetic_batch {
            if b == 0 || b > self.ipc {
                return bad(format!("distill.synthetic_batch {b} not in 1..=ipc"));
            }
        }
        if !(self.image_lr > 0.0) {
            return bad(format!("distill.image_lr must be positive, got {}", self.image_lr));
        }
        if !(0.0..1.0).contains(&self.image_momentum) {
            return bad(format!("distill.image_momentum {} outside [0, 1)", self.image_momentum));
        }
        if !(self.zca_eps > 0.0) || !(self.lambda > 0.0) {
            return bad("distill.zca_eps and distill.lambda must be positive".into());
        }
        if let Some(k) = self.init_colors {
            if k == 0 || k > crate::quantize::MAX_COLORS {
                return bad(format!("distill.init_colors {k} not in 1..=256"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
