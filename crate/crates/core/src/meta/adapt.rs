use crate::autodiff::{Graph, Tensor, Var};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_sum, student_inner_loss, KdConfig, TeacherTargets};
use crate::nets::{apply, apply_tensors, NetworkSpec};
use crate::params::{grad_params, ParamSet, ParamVars};

use super::MetaConfig;

/// How much of the inner trajectory stays differentiable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    /// Every step is recorded, including the gradient computation itself, so
    /// the adapted parameters can be differentiated twice through.
    SecondOrder,
    /// Inner gradients are treated as constants: `dθ'/dθ = I`.
    FirstOrder,
    /// No link to the initial parameters; each step runs on a fresh graph.
    Detached,
}

#[derive(Clone, Debug)]
pub struct AdaptResult {
    pub params: ParamVars,
    /// Inner loss before each step.
    pub losses: Vec<f64>,
    /// Whether `params` can be differentiated back to the initial parameters.
    pub graph_retained: bool,
}

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteInner { step },
        e => e,
    }
}

fn graph_of(params: &ParamVars) -> Result<Graph> {
    params
        .iter()
        .next()
        .map(|(_, v)| v.graph().clone())
        .ok_or_else(|| Error::invalid("empty parameter set"))
}

/// `steps` full-batch gradient steps `p ← p - lr ∇ loss(p)`.
///
/// `loss` receives the graph the parameters live on. With `lr == 0` the
/// returned parameters are the inputs themselves.
pub fn adapt<F>(init: &ParamVars, lr: f64, steps: usize, mode: AdaptMode, loss: F) -> Result<AdaptResult>
where
    F: Fn(&Graph, &ParamVars) -> Result<Var>,
{
    let graph = graph_of(init)?;
    if lr == 0.0 {
        let l = loss(&graph, init).map_err(at_step(0))?.value().item()?;
        return Ok(AdaptResult {
            params: init.clone(),
            losses: vec![l; steps],
            graph_retained: mode != AdaptMode::Detached,
        });
    }
    let mut losses = Vec::with_capacity(steps);
    let mut current = init.clone();
    for step in 0..steps {
        let (g, p) = match mode {
            AdaptMode::Detached => {
                let g = Graph::with_precision(graph.precision());
                let p = current.values().to_vars(&g)?;
                (g, p)
            }
            _ => (graph.clone(), current),
        };
        let l = loss(&g, &p).map_err(at_step(step))?;
        losses.push(l.value().item()?);
        let grads = grad_params(&l, &p, mode == AdaptMode::SecondOrder).map_err(at_step(step))?;
        current = p.sgd_step(&grads.vars(), lr).map_err(at_step(step))?;
    }
    Ok(AdaptResult {
        params: current,
        losses,
        graph_retained: mode != AdaptMode::Detached,
    })
}

fn ce_loss<'a>(
    spec: &'a NetworkSpec,
    x: &'a Tensor,
    y: &'a [usize],
) -> impl Fn(&Graph, &ParamVars) -> Result<Var> + 'a {
    move |g, p| cross_entropy_sum(&apply(spec, p, &g.constant(x.clone())?)?.logits, y)
}

/// Plain MAML inner loop on summed support cross-entropy.
pub fn maml_inner(
    spec: &NetworkSpec,
    params: &ParamVars,
    x: &Tensor,
    y: &[usize],
    lr: f64,
    steps: usize,
    mode: AdaptMode,
) -> Result<AdaptResult> {
    adapt(params, lr, steps, mode, ce_loss(spec, x, y))
}

/// Teacher adaptation on the episode's support set with rate `alpha`.
pub fn inner_adapt_teacher(
    spec: &NetworkSpec,
    teacher: &ParamVars,
    episode: &Episode,
    cfg: &MetaConfig,
    mode: AdaptMode,
) -> Result<AdaptResult> {
    maml_inner(
        spec,
        teacher,
        &episode.support_x,
        &episode.support_y,
        cfg.alpha,
        cfg.inner_steps,
        mode,
    )
}

/// Outputs of the (adapted) teacher on `x`, as constants.
pub fn distill_targets(spec: &NetworkSpec, teacher: &ParamSet, x: &Tensor) -> Result<TeacherTargets> {
    let (logits, embedding) = apply_tensors(spec, teacher, x)?;
    Ok(TeacherTargets { logits, embedding })
}

/// Student adaptation on cross-entropy plus distillation towards fixed
/// `targets`. Gradients flow to the student only.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt_student(
    spec: &NetworkSpec,
    student: &ParamVars,
    targets: &TeacherTargets,
    x: &Tensor,
    y: &[usize],
    kd: &KdConfig,
    lr: f64,
    steps: usize,
    mode: AdaptMode,
) -> Result<AdaptResult> {
    if targets.logits.shape().first() != x.shape().first() {
        return Err(Error::ShapeMismatch {
            op: "inner_adapt_student",
            lhs: targets.logits.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    adapt(student, lr, steps, mode, |g, p| {
        let out = apply(spec, p, &g.constant(x.clone())?)?;
        student_inner_loss(&out, targets, y, kd)
    })
}
