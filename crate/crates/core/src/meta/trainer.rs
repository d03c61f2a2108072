use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::episodes::{Episode, Split, TaskDistribution};
use crate::error::{Error, Result};
use crate::losses::KdConfig;
use crate::params::ParamSet;

use super::step::{
    maml_meta_step, meta_test_adapt, meta_test_plain, reptile_step, tsmd_meta_step, StepMetrics, TestOutcome,
};
use super::{Learner, MetaConfig, TeacherMode};

/// Mixes `tag` into `seed` (splitmix64 finalizer) to get independent
/// sub-seeds for the different episode streams of one run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outer-loop algorithm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Unrolled meta-gradients; with a teacher this is the distillation
    /// method, without one it is plain MAML.
    #[default]
    Maml,
    Reptile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub student_loss: f64,
    pub student_acc: f64,
    pub teacher_loss: Option<f64>,
    pub teacher_acc: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Best validation result so far.
#[derive(Clone, Debug)]
pub struct Best {
    pub step: usize,
    pub val_acc: f64,
    pub teacher: Option<ParamSet>,
    pub student: ParamSet,
}

/// Meta-training loop with periodic meta-validation.
///
/// Training episode `j` of outer step `s` is episode `s·M + j` of the
/// training stream, so a run resumed at step `s` sees exactly the episodes
/// an uninterrupted run would.
#[derive(Clone, Debug)]
pub struct MetaTrainer {
    pub teacher: Option<Learner>,
    pub student: Learner,
    pub kd: KdConfig,
    pub method: Method,
    pub cfg: MetaConfig,
    pub train: TaskDistribution,
    pub val: TaskDistribution,
    pub seed: u64,
    pub step: usize,
    pub best: Option<Best>,
    /// Validations since the last improvement.
    pub stale: usize,
    pub history: Vec<TrainRecord>,
    frozen: Option<ParamSet>,
}

/// Adapts on the support set and classifies the query set, with or without
/// a teacher.
pub fn test_episode(
    teacher: Option<(&Learner, &KdConfig)>,
    student: &Learner,
    episode: &Episode,
    cfg: &MetaConfig,
) -> Result<TestOutcome> {
    match teacher {
        Some((t, kd)) => meta_test_adapt(t, student, episode, kd, cfg),
        None => meta_test_plain(student, episode, cfg),
    }
}

impl MetaTrainer {
    pub fn new(
        teacher: Option<Learner>,
        student: Learner,
        kd: KdConfig,
        method: Method,
        cfg: MetaConfig,
        dist: &TaskDistribution,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        kd.validate()?;
        if let Some(t) = &teacher {
            crate::nets::check_teacher_student(&t.spec, &student.spec)?;
        }
        let frozen = match (&teacher, cfg.teacher_mode) {
            (Some(t), TeacherMode::Fixed) => Some(t.params.clone()),
            _ => None,
        };
        Ok(MetaTrainer {
            teacher,
            student,
            kd,
            method,
            cfg,
            train: dist.clone().with_split(Split::MetaTrain),
            val: dist.clone().with_split(Split::MetaVal),
            seed,
            step: 0,
            best: None,
            stale: 0,
            history: Vec::new(),
            frozen,
        })
    }

    pub fn train_episodes(&self, step: usize) -> Result<Vec<Episode>> {
        let m = self.cfg.tasks_per_batch as u64;
        let seed = derive_seed(self.seed, 1);
        (0..m).map(|j| self.train.episode(seed, step as u64 * m + j)).collect()
    }

    fn check_frozen(&self) -> Result<()> {
        match (&self.frozen, &self.teacher) {
            (Some(f), Some(t)) if !f.bits_eq(&t.params) => Err(Error::FixedTeacherMutated),
            _ => Ok(()),
        }
    }

    /// Mean query accuracy over the fixed meta-validation episodes.
    pub fn validate(&self) -> Result<f64> {
        let seed = derive_seed(self.seed, 2);
        let teacher = self.teacher.as_ref().map(|t| (t, &self.kd));
        let accs = (0..self.cfg.val_episodes as u64)
            .into_par_iter()
            .map(|i| Ok(test_episode(teacher, &self.student, &self.val.episode(seed, i)?, &self.cfg)?.accuracy))
            .collect::<Result<Vec<f64>>>()?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    fn outer_step(&mut self, episodes: &[Episode]) -> Result<StepMetrics> {
        match (self.method, self.teacher.as_mut()) {
            (Method::Maml, Some(t)) => tsmd_meta_step(t, &mut self.student, episodes, &self.kd, &self.cfg),
            (Method::Maml, None) => maml_meta_step(&mut self.student, episodes, &self.cfg),
            (Method::Reptile, Some(t)) => reptile_step(Some((t, &self.kd)), &mut self.student, episodes, &self.cfg),
            (Method::Reptile, None) => reptile_step(None, &mut self.student, episodes, &self.cfg),
        }
    }

    /// Whether early stopping has triggered.
    pub fn stopped(&self) -> bool {
        matches!(self.cfg.patience, Some(p) if self.stale >= p)
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.meta_steps || self.stopped()
    }

    /// One outer update, plus validation when due.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let episodes = self.train_episodes(self.step)?;
        let m = self.outer_step(&episodes)?;
        self.check_frozen()?;
        self.step += 1;
        let val_acc = if self.cfg.val_every > 0 && self.step.is_multiple_of(self.cfg.val_every) {
            let acc = self.validate()?;
            if self.best.as_ref().is_none_or(|b| acc > b.val_acc) {
                self.best = Some(Best {
                    step: self.step,
                    val_acc: acc,
                    teacher: self.teacher.as_ref().map(|t| t.params.clone()),
                    student: self.student.params.clone(),
                });
                self.stale = 0;
            } else {
                self.stale += 1;
            }
            Some(acc)
        } else {
            None
        };
        let record = TrainRecord {
            step: self.step,
            student_loss: m.student_loss,
            student_acc: m.student_acc,
            teacher_loss: m.teacher_loss,
            teacher_acc: m.teacher_acc,
            val_acc,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `meta_steps` or early stopping.
    pub fn run(&mut self) -> Result<()> {
        while !self.done() {
            self.step()?;
        }
        Ok(())
    }

    /// Everything needed to resume: weights, optimizer moments, the step
    /// counter, early-stopping state and the seed.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        if let Some(t) = &self.teacher {
            ck.set_group("teacher", t.params.clone());
            ck.set_optim("teacher", &t.optim);
        }
        ck.set_group("student", self.student.params.clone());
        ck.set_optim("student", &self.student.optim);
        ck.set_u64("meta_step", self.step as u64);
        ck.set_u64("seed", self.seed);
        ck.set_u64("stale", self.stale as u64);
        if let Some(b) = &self.best {
            ck.set_u64("best_step", b.step as u64);
            ck.set_f64("best_val_acc", b.val_acc);
            if let Some(t) = &b.teacher {
                ck.set_group("best.teacher", t.clone());
            }
            ck.set_group("best.student", b.student.clone());
        }
        ck
    }

    /// Restores the state saved by [`to_checkpoint`](Self::to_checkpoint).
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let seed = ck.require_u64("seed")?;
        if seed != self.seed {
            return Err(Error::invalid(format!(
                "checkpoint was trained with seed {seed}, not {}",
                self.seed
            )));
        }
        if let Some(t) = self.teacher.as_mut() {
            let params = ck.require("teacher")?.clone();
            crate::nets::check_params(&t.spec, &params)?;
            t.params = params;
            t.optim = ck.optim("teacher");
            if self.frozen.is_some() {
                self.frozen = Some(t.params.clone());
            }
        }
        let params = ck.require("student")?.clone();
        crate::nets::check_params(&self.student.spec, &params)?;
        self.student.params = params;
        self.student.optim = ck.optim("student");
        self.step = ck.require_u64("meta_step")? as usize;
        self.stale = ck.u64("stale").unwrap_or(0) as usize;
        self.best = match (ck.u64("best_step"), ck.f64("best_val_acc")) {
            (Some(step), Some(val_acc)) => Some(Best {
                step: step as usize,
                val_acc,
                teacher: ck.group("best.teacher").cloned(),
                student: ck.require("best.student")?.clone(),
            }),
            _ => None,
        };
        self.history.clear();
        Ok(())
    }

    /// Parameters to deploy: the best validated ones, or the current ones if
    /// validation never ran.
    pub fn best_models(&self) -> (Option<Learner>, Learner) {
        let mut teacher = self.teacher.clone();
        let mut student = self.student.clone();
        if let Some(b) = &self.best {
            if let (Some(t), Some(p)) = (teacher.as_mut(), &b.teacher) {
                t.params = p.clone();
            }
            student.params = b.student.clone();
        }
        (teacher, student)
    }
}
