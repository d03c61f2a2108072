use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor, Var};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_sum, KdConfig};
use crate::nets::{apply, apply_tensors, NetworkSpec};
use crate::params::{grad_params, ParamSet, ParamVars};

use super::adapt::{distill_targets, inner_adapt_student, maml_inner, AdaptMode};
use super::{Learner, MetaConfig, TeacherMode};

/// Meta-gradients and query metrics of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeGradient {
    /// `None` when the teacher is fixed.
    pub teacher: Option<ParamSet>,
    pub student: ParamSet,
    pub teacher_loss: Option<f64>,
    pub teacher_acc: Option<f64>,
    pub student_loss: f64,
    pub student_acc: f64,
}

/// Batch means of the per-episode query metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub student_loss: f64,
    pub student_acc: f64,
    pub teacher_loss: Option<f64>,
    pub teacher_acc: Option<f64>,
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax_rows()?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Query cross-entropy of (adapted) parameters. Takes no distillation config:
/// the outer objective is plain cross-entropy.
fn query_loss(spec: &NetworkSpec, params: &ParamVars, episode: &Episode) -> Result<(Var, f64)> {
    let g = params.vars()[0].graph().clone();
    let out = apply(spec, params, &g.constant(episode.query_x.clone())?)?;
    let acc = accuracy(&out.logits.value(), &episode.query_y)?;
    Ok((cross_entropy_sum(&out.logits, &episode.query_y)?, acc))
}

fn meta_grad_of(loss: &Var, wrt: &ParamVars) -> Result<ParamSet> {
    let grad = grad_params(loss, wrt, false)?.values();
    if !grad.is_finite() {
        return Err(Error::NonFinite { op: "meta_gradient" });
    }
    Ok(grad)
}

fn tag_episode(index: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteMetaGradient { episode: index },
        e => e,
    }
}

/// Adapts `learner` on the support set and differentiates its query loss
/// back to the initial parameters.
fn plain_gradient(learner: &Learner, episode: &Episode, cfg: &MetaConfig) -> Result<(ParamSet, f64, f64, ParamSet)> {
    let g = Graph::with_precision(cfg.precision);
    let init = learner.params.to_vars(&g)?;
    let adapted = maml_inner(
        &learner.spec,
        &init,
        &episode.support_x,
        &episode.support_y,
        learner.inner_lr,
        cfg.inner_steps,
        cfg.train_mode(),
    )?;
    let (loss, acc) = query_loss(&learner.spec, &adapted.params, episode)?;
    let grad = meta_grad_of(&loss, &init)?;
    Ok((grad, loss.value().item()?, acc, adapted.params.values()))
}

/// MAML meta-gradient of one episode: `∇_θ L(θ'; query)` through the inner
/// trajectory.
pub fn maml_meta_gradient(learner: &Learner, episode: &Episode, cfg: &MetaConfig) -> Result<EpisodeGradient> {
    let (student, student_loss, student_acc, _) = plain_gradient(learner, episode, cfg)?;
    Ok(EpisodeGradient {
        teacher: None,
        student,
        teacher_loss: None,
        teacher_acc: None,
        student_loss,
        student_acc,
    })
}

/// Meta-gradients of one episode for both models. The teacher's gradient
/// comes only from its own query loss; the student sees the adapted teacher
/// only through constant distillation targets.
pub fn tsmd_meta_gradient(
    teacher: &Learner,
    student: &Learner,
    episode: &Episode,
    kd: &KdConfig,
    cfg: &MetaConfig,
) -> Result<EpisodeGradient> {
    let (teacher_grad, teacher_loss, teacher_acc, adapted_teacher) = match cfg.teacher_mode {
        TeacherMode::Trainable => {
            let (grad, loss, acc, adapted) = plain_gradient(teacher, episode, cfg)?;
            (Some(grad), Some(loss), Some(acc), adapted)
        }
        TeacherMode::Fixed => (None, None, None, teacher.params.clone()),
    };
    let targets = distill_targets(&teacher.spec, &adapted_teacher, &episode.support_x)?;

    let g = Graph::with_precision(cfg.precision);
    let init = student.params.to_vars(&g)?;
    let adapted = inner_adapt_student(
        &student.spec,
        &init,
        &targets,
        &episode.support_x,
        &episode.support_y,
        kd,
        student.inner_lr,
        cfg.inner_steps,
        cfg.train_mode(),
    )?;
    let (loss, student_acc) = query_loss(&student.spec, &adapted.params, episode)?;
    Ok(EpisodeGradient {
        teacher: teacher_grad,
        student: meta_grad_of(&loss, &init)?,
        teacher_loss,
        teacher_acc,
        student_loss: loss.value().item()?,
        student_acc,
    })
}

fn per_episode<T, F>(episodes: &[Episode], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Episode) -> Result<T> + Sync,
{
    if episodes.is_empty() {
        return Err(Error::invalid("empty episode batch"));
    }
    // Collected in episode order, so the sequential reductions below do not
    // depend on scheduling.
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| f(ep).map_err(tag_episode(i)))
        .collect()
}

fn sum_in_order(sets: impl Iterator<Item = ParamSet>) -> Result<Option<ParamSet>> {
    let mut total: Option<ParamSet> = None;
    for s in sets {
        total = Some(match total {
            None => s,
            Some(t) => t.add(&s)?,
        });
    }
    Ok(total)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn metrics(grads: &[EpisodeGradient]) -> StepMetrics {
    let teacher = grads[0].teacher_loss.is_some();
    StepMetrics {
        student_loss: mean(grads.iter().map(|g| g.student_loss)),
        student_acc: mean(grads.iter().map(|g| g.student_acc)),
        teacher_loss: teacher.then(|| mean(grads.iter().filter_map(|g| g.teacher_loss))),
        teacher_acc: teacher.then(|| mean(grads.iter().filter_map(|g| g.teacher_acc))),
    }
}

/// One outer update of a single model on the summed query losses of the
/// batch.
pub fn maml_meta_step(learner: &mut Learner, episodes: &[Episode], cfg: &MetaConfig) -> Result<StepMetrics> {
    let grads = per_episode(episodes, |ep| maml_meta_gradient(learner, ep, cfg))?;
    let total = sum_in_order(grads.iter().map(|g| g.student.clone()))?.expect("non-empty batch");
    learner.params = learner
        .optim
        .update(&learner.params, &total, learner.outer_lr, &cfg.optimizer)?;
    Ok(metrics(&grads))
}

/// One outer update of teacher and student. With a fixed teacher, neither the
/// teacher's inner adaptation nor its outer update runs.
pub fn tsmd_meta_step(
    teacher: &mut Learner,
    student: &mut Learner,
    episodes: &[Episode],
    kd: &KdConfig,
    cfg: &MetaConfig,
) -> Result<StepMetrics> {
    let grads = per_episode(episodes, |ep| tsmd_meta_gradient(teacher, student, ep, kd, cfg))?;
    if let Some(total) = sum_in_order(grads.iter().filter_map(|g| g.teacher.clone()))? {
        teacher.params = teacher
            .optim
            .update(&teacher.params, &total, teacher.outer_lr, &cfg.optimizer)?;
    }
    let total = sum_in_order(grads.iter().map(|g| g.student.clone()))?.expect("non-empty batch");
    student.params = student
        .optim
        .update(&student.params, &total, student.outer_lr, &cfg.optimizer)?;
    Ok(metrics(&grads))
}

/// `(1 - ε) w + ε mean_i(w'_i)`.
fn interpolate(w: &ParamSet, adapted: &[ParamSet], epsilon: f64) -> Result<ParamSet> {
    if epsilon == 0.0 {
        return Ok(w.clone());
    }
    let n = adapted.len() as f64;
    let mean = sum_in_order(adapted.iter().cloned())?
        .expect("non-empty batch")
        .map(|v| v / n);
    if epsilon == 1.0 {
        return Ok(mean);
    }
    w.zip_map(&mean, |a, b| a + epsilon * (b - a))
}

fn detached_adapt(learner: &Learner, x: &Tensor, y: &[usize], steps: usize, cfg: &MetaConfig) -> Result<ParamSet> {
    let g = Graph::with_precision(cfg.precision);
    let r = maml_inner(
        &learner.spec,
        &learner.params.to_vars(&g)?,
        x,
        y,
        learner.inner_lr,
        steps,
        AdaptMode::Detached,
    )?;
    Ok(r.params.values())
}

fn detached_student(
    teacher: &Learner,
    adapted_teacher: &ParamSet,
    student: &Learner,
    episode: &Episode,
    kd: &KdConfig,
    steps: usize,
    cfg: &MetaConfig,
) -> Result<ParamSet> {
    let targets = distill_targets(&teacher.spec, adapted_teacher, &episode.support_x)?;
    let g = Graph::with_precision(cfg.precision);
    let r = inner_adapt_student(
        &student.spec,
        &student.params.to_vars(&g)?,
        &targets,
        &episode.support_x,
        &episode.support_y,
        kd,
        student.inner_lr,
        steps,
        AdaptMode::Detached,
    )?;
    Ok(r.params.values())
}

fn query_metrics(spec: &NetworkSpec, params: &ParamSet, episode: &Episode) -> Result<(f64, f64)> {
    let g = Graph::new();
    let (loss, acc) = query_loss(spec, &params.to_constants(&g)?, episode)?;
    Ok((loss.value().item()?, acc))
}

/// Reptile outer update: every model moves towards the batch mean of its
/// task-adapted parameters. With a teacher, the student's inner loop includes
/// distillation towards the adapted (or, when fixed, the frozen) teacher.
pub fn reptile_step(
    teacher: Option<(&mut Learner, &KdConfig)>,
    student: &mut Learner,
    episodes: &[Episode],
    cfg: &MetaConfig,
) -> Result<StepMetrics> {
    let steps = cfg.inner_steps;
    let teacher_ref = teacher.as_ref().map(|(t, kd)| (&**t, *kd));
    let student_ref = &*student;
    let outcomes = per_episode(episodes, |ep| {
        let (adapted_teacher, teacher_metrics) = match teacher_ref {
            Some((t, _)) if cfg.teacher_mode == TeacherMode::Trainable => {
                let a = detached_adapt(t, &ep.support_x, &ep.support_y, steps, cfg)?;
                let m = query_metrics(&t.spec, &a, ep)?;
                (Some(a), Some(m))
            }
            _ => (None, None),
        };
        let adapted_student = match teacher_ref {
            Some((t, kd)) => {
                let psi = adapted_teacher.as_ref().unwrap_or(&t.params);
                detached_student(t, psi, student_ref, ep, kd, steps, cfg)?
            }
            None => detached_adapt(student_ref, &ep.support_x, &ep.support_y, steps, cfg)?,
        };
        let student_metrics = query_metrics(&student_ref.spec, &adapted_student, ep)?;
        Ok((adapted_teacher, teacher_metrics, adapted_student, student_metrics))
    })?;

    let eps = cfg.reptile_epsilon;
    if let Some((t, _)) = teacher {
        if cfg.teacher_mode == TeacherMode::Trainable {
            let adapted: Vec<ParamSet> = outcomes.iter().filter_map(|o| o.0.clone()).collect();
            t.params = interpolate(&t.params, &adapted, eps)?;
        }
    }
    let adapted: Vec<ParamSet> = outcomes.iter().map(|o| o.2.clone()).collect();
    student.params = interpolate(&student.params, &adapted, eps)?;

    let has_teacher = outcomes[0].1.is_some();
    Ok(StepMetrics {
        student_loss: mean(outcomes.iter().map(|o| o.3 .0)),
        student_acc: mean(outcomes.iter().map(|o| o.3 .1)),
        teacher_loss: has_teacher.then(|| mean(outcomes.iter().filter_map(|o| o.1.map(|m| m.0)))),
        teacher_acc: has_teacher.then(|| mean(outcomes.iter().filter_map(|o| o.1.map(|m| m.1)))),
    })
}

/// Result of adapting on one meta-test episode.
#[derive(Clone, Debug)]
pub struct TestOutcome {
    pub student: ParamSet,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

fn classify(spec: &NetworkSpec, params: ParamSet, episode: &Episode) -> Result<TestOutcome> {
    let (logits, _) = apply_tensors(spec, &params, &episode.query_x)?;
    let predictions = logits.argmax_rows()?;
    let accuracy = accuracy(&logits, &episode.query_y)?;
    Ok(TestOutcome {
        student: params,
        predictions,
        accuracy,
    })
}

/// Meta-test with a teacher: adapt the teacher (unless fixed), adapt the
/// student with distillation, classify the query set with the student only.
pub fn meta_test_adapt(
    teacher: &Learner,
    student: &Learner,
    episode: &Episode,
    kd: &KdConfig,
    cfg: &MetaConfig,
) -> Result<TestOutcome> {
    let steps = cfg.test_steps();
    let adapted_teacher = match cfg.teacher_mode {
        TeacherMode::Trainable => detached_adapt(teacher, &episode.support_x, &episode.support_y, steps, cfg)?,
        TeacherMode::Fixed => teacher.params.clone(),
    };
    let adapted = detached_student(teacher, &adapted_teacher, student, episode, kd, steps, cfg)?;
    classify(&student.spec, adapted, episode)
}

/// Meta-test of a single model: plain fine-tuning on the support set.
pub fn meta_test_plain(learner: &Learner, episode: &Episode, cfg: &MetaConfig) -> Result<TestOutcome> {
    let adapted = detached_adapt(learner, &episode.support_x, &episode.support_y, cfg.test_steps(), cfg)?;
    classify(&learner.spec, adapted, episode)
}
