//! Bilevel meta-training: MAML, task-specific distillation from an adapted
//! teacher, the Reptile variant, teacher pretraining and meta-test adaptation.
//!
//! Per episode, the teacher `ψ` takes `S` gradient steps on the support set to
//! give `ψ'`. The student `θ` then takes `S` steps on cross-entropy plus a
//! distillation loss against `ψ'` (whose outputs are constants), giving `θ'`.
//! Both adapted models are scored on the query set with plain cross-entropy,
//! and those query losses, summed over the batch, drive the outer updates of
//! `ψ` and `θ`.

mod adapt;
mod optim;
mod pretrain;
mod step;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::nets::NetworkSpec;
use crate::params::ParamSet;

pub use adapt::{adapt, distill_targets, inner_adapt_student, inner_adapt_teacher, maml_inner, AdaptMode, AdaptResult};
pub use optim::{OptimState, OptimizerConfig, OptimizerKind};
pub use pretrain::{pretrain_teacher, EpochStats, PretrainConfig, Pretrainer};
pub use step::{
    maml_meta_gradient, maml_meta_step, meta_test_adapt, meta_test_plain, reptile_step, tsmd_meta_gradient,
    tsmd_meta_step, EpisodeGradient, StepMetrics, TestOutcome,
};
pub use trainer::{derive_seed, test_episode, Best, MetaTrainer, Method, TrainRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// The teacher is adapted per task and meta-trained alongside the student.
    #[default]
    Trainable,
    /// The pretrained teacher is frozen: no inner or outer teacher updates.
    Fixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Teacher and student meta-trained with unrolled MAML-style gradients.
    #[default]
    Tsmd,
    /// The student alone, plain MAML.
    #[serde(rename = "maml")]
    MamlOnly,
    /// Teacher-guided student meta-trained with Reptile interpolation.
    Reptile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Teacher inner learning rate.
    pub alpha: f64,
    /// Student inner learning rate.
    pub lambda: f64,
    /// Teacher outer learning rate.
    pub beta: f64,
    /// Student outer learning rate.
    pub eta: f64,
    pub inner_steps: usize,
    /// Inner steps at meta-test time; `inner_steps` when unset.
    pub test_inner_steps: Option<usize>,
    pub tasks_per_batch: usize,
    pub first_order: bool,
    pub teacher_mode: TeacherMode,
    pub variant: Variant,
    pub reptile_epsilon: f64,
    pub optimizer: OptimizerConfig,
    pub precision: Precision,
    /// Number of outer updates.
    pub meta_steps: usize,
    /// Validate every this many outer steps; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.02,
            lambda: 0.05,
            beta: 1e-3,
            eta: 1e-3,
            inner_steps: 5,
            test_inner_steps: None,
            tasks_per_batch: 4,
            first_order: false,
            teacher_mode: TeacherMode::Trainable,
            variant: Variant::Tsmd,
            reptile_epsilon: 0.1,
            optimizer: OptimizerConfig::default(),
            precision: Precision::F64,
            meta_steps: 300,
            val_every: 50,
            val_episodes: 100,
            patience: None,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("eta", self.eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite rate >= 0, got {v}")));
            }
        }
        if self.inner_steps == 0 || self.test_inner_steps == Some(0) {
            return Err(Error::invalid("inner steps must be >= 1"));
        }
        if self.tasks_per_batch == 0 {
            return Err(Error::invalid("tasks_per_batch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.reptile_epsilon) {
            return Err(Error::invalid(format!(
                "reptile_epsilon must lie in [0, 1], got {}",
                self.reptile_epsilon
            )));
        }
        if self.val_every > 0 && self.val_episodes < 1 {
            return Err(Error::invalid("validation needs at least one episode"));
        }
        self.optimizer.validate()
    }

    pub fn test_steps(&self) -> usize {
        self.test_inner_steps.unwrap_or(self.inner_steps)
    }

    pub fn train_mode(&self) -> AdaptMode {
        if self.first_order {
            AdaptMode::FirstOrder
        } else {
            AdaptMode::SecondOrder
        }
    }
}

/// A network being meta-learned, with its own inner and outer learning rates
/// and outer optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub optim: OptimState,
    pub inner_lr: f64,
    pub outer_lr: f64,
}

impl Learner {
    pub fn new(spec: NetworkSpec, params: ParamSet, inner_lr: f64, outer_lr: f64) -> Result<Self> {
        crate::nets::check_params(&spec, &params)?;
        Ok(Learner {
            spec,
            params,
            optim: OptimState::default(),
            inner_lr,
            outer_lr,
        })
    }

    /// Uses the teacher rates `alpha` / `beta`.
    pub fn teacher(spec: NetworkSpec, params: ParamSet, cfg: &MetaConfig) -> Result<Self> {
        Learner::new(spec, params, cfg.alpha, cfg.beta)
    }

    /// Uses the student rates `lambda` / `eta`.
    pub fn student(spec: NetworkSpec, params: ParamSet, cfg: &MetaConfig) -> Result<Self> {
        Learner::new(spec, params, cfg.lambda, cfg.eta)
    }
}

#[cfg(test)]
mod tests;
