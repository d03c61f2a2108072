//! Named finite-difference checks over every differentiable primitive, every
//! loss, both network families and the unrolled meta-gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{conv2d, finite_diff_check, huber, pairwise_distance, softmax_cross_entropy, Graph, Tensor, Var};
use crate::episodes::{blobs_family, Episode};
use crate::error::Result;
use crate::losses::{
    cross_entropy_sum, kd_kl, rkd_angle, rkd_distance, student_inner_loss, KdConfig, KdKind, TeacherTargets,
};
use crate::meta::{inner_adapt_student, maml_inner, AdaptMode};
use crate::nets::{apply, apply_tensors, init_params, NetworkSpec};
use crate::params::{ParamSet, ParamVars};

/// Tolerance for primitives, losses and single forward passes.
pub const PRIMITIVE_TOL: f64 = 1e-4;
/// Tolerance for gradients through an unrolled inner loop.
pub const META_TOL: f64 = 1e-3;
const H: f64 = 1e-5;

type LossFn = Box<dyn Fn(&Graph, &ParamVars) -> Result<Var>>;

pub struct Check {
    pub name: &'static str,
    pub tol: f64,
    pub params: ParamSet,
    pub loss: LossFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub tol: f64,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub passed: bool,
}

fn wave(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.731 + phase).sin())
}

fn one(name: &str, t: Tensor) -> ParamSet {
    ParamSet::new(vec![(name.to_string(), t)]).expect("single entry")
}

fn pair(a: Tensor, b: Tensor) -> ParamSet {
    ParamSet::new(vec![("a".into(), a), ("b".into(), b)]).expect("distinct names")
}

fn check(
    name: &'static str,
    tol: f64,
    params: ParamSet,
    loss: impl Fn(&Graph, &ParamVars) -> Result<Var> + 'static,
) -> Check {
    Check {
        name,
        tol,
        params,
        loss: Box::new(loss),
    }
}

fn prim(name: &'static str, params: ParamSet, loss: impl Fn(&Graph, &ParamVars) -> Result<Var> + 'static) -> Check {
    check(name, PRIMITIVE_TOL, params, loss)
}

/// Weighted sum so every output element gets a distinct cotangent.
fn project(y: &Var) -> Result<Var> {
    let w = y.graph().constant(wave(&y.shape(), 0.9))?;
    y.mul(&w)?.sum()
}

fn primitives() -> Vec<Check> {
    let x = || one("x", wave(&[3, 4], 0.2));
    vec![
        prim("add (broadcast)", pair(wave(&[3, 4], 0.1), wave(&[4], 1.3)), |_, v| {
            project(&v.get("a")?.add(v.get("b")?)?)
        }),
        prim("sub", pair(wave(&[3, 4], 0.1), wave(&[3, 4], 2.0)), |_, v| {
            project(&v.get("a")?.sub(v.get("b")?)?)
        }),
        prim(
            "mul (broadcast)",
            pair(wave(&[3, 4], 0.1), wave(&[3, 1], 1.0)),
            |_, v| project(&v.get("a")?.mul(v.get("b")?)?),
        ),
        prim(
            "div",
            pair(wave(&[2, 3], 0.1), wave(&[2, 3], 0.0).map(|v| v + 2.0)),
            |_, v| project(&v.get("a")?.div(v.get("b")?)?),
        ),
        prim("neg, scale", x(), |_, v| project(&v.get("x")?.neg()?.scale(2.5)?)),
        prim("relu", x(), |_, v| project(&v.get("x")?.relu()?)),
        prim("exp", x(), |_, v| project(&v.get("x")?.exp()?)),
        prim("log", one("x", wave(&[3, 4], 0.2).map(|v| v + 1.5)), |_, v| {
            project(&v.get("x")?.log()?)
        }),
        prim("sqrt", one("x", wave(&[3, 4], 0.2).map(|v| v + 1.5)), |_, v| {
            project(&v.get("x")?.sqrt()?)
        }),
        prim("safe_recip", one("x", wave(&[3, 4], 0.2).map(|v| v + 1.5)), |_, v| {
            project(&v.get("x")?.safe_recip()?)
        }),
        prim("clamp", x(), |_, v| project(&v.get("x")?.clamp(-0.8, 0.8)?)),
        prim("matmul", pair(wave(&[3, 4], 0.1), wave(&[4, 2], 0.7)), |_, v| {
            project(&v.get("a")?.matmul(v.get("b")?)?)
        }),
        prim(
            "batched matmul",
            pair(wave(&[2, 3, 4], 0.1), wave(&[2, 4, 2], 0.7)),
            |_, v| project(&v.get("a")?.matmul(v.get("b")?)?),
        ),
        prim("permute", one("x", wave(&[2, 3, 4], 0.4)), |_, v| {
            project(&v.get("x")?.permute(&[2, 0, 1])?)
        }),
        prim("transpose, reshape", x(), |_, v| {
            project(&v.get("x")?.transpose()?.reshape(&[2, 6])?)
        }),
        prim("broadcast_to, sum_to", one("x", wave(&[1, 4], 0.3)), |_, v| {
            project(&v.get("x")?.broadcast_to(&[3, 4])?.exp()?.sum_to(&[1, 4])?)
        }),
        prim("sum_axes, mean_axes", one("x", wave(&[2, 3, 4], 0.4)), |_, v| {
            let x = v.get("x")?.exp()?;
            project(&x.sum_axes(&[1])?)?.add(&project(&x.mean_axes(&[0, 2])?)?)
        }),
        prim("mean", x(), |_, v| v.get("x")?.exp()?.mean()),
        prim("log_softmax", x(), |_, v| project(&v.get("x")?.log_softmax()?)),
        prim("softmax", x(), |_, v| project(&v.get("x")?.softmax()?)),
        prim("softmax_cross_entropy", x(), |_, v| {
            softmax_cross_entropy(v.get("x")?, &[3, 0, 2])
        }),
        prim(
            "conv2d",
            pair(wave(&[2, 2, 5, 5], 0.3), wave(&[3, 2, 3, 3], 1.1)),
            |_, v| project(&conv2d(v.get("a")?, v.get("b")?, 2, 1)?),
        ),
        prim("pairwise_distance", one("x", wave(&[4, 3], 0.5)), |_, v| {
            project(&pairwise_distance(v.get("x")?)?)
        }),
        prim("huber", one("x", wave(&[3, 4], 0.2).scale_by(2.0)), |_, v| {
            project(&huber(v.get("x")?, 1.0)?)
        }),
    ]
}

trait ScaleBy {
    fn scale_by(self, c: f64) -> Tensor;
}

impl ScaleBy for Tensor {
    fn scale_by(self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }
}

fn losses() -> Vec<Check> {
    let emb = || one("s", wave(&[5, 3], 0.8));
    let teacher_emb = wave(&[5, 4], 2.1);
    let teacher_logits = wave(&[5, 3], 1.7).scale_by(3.0);
    let t1 = teacher_emb.clone();
    let t2 = teacher_emb.clone();
    let tl = teacher_logits.clone();
    let targets = TeacherTargets {
        logits: teacher_logits,
        embedding: teacher_emb,
    };
    let spec = NetworkSpec::mlp(3, &[4], 3);
    let x = wave(&[5, 3], 0.6);
    let combined = move |g: &Graph, v: &ParamVars| {
        let out = apply(&spec, v, &g.constant(x.clone())?)?;
        let kd = KdConfig {
            kind: KdKind::RkdDistanceAngle,
            ..KdConfig::default()
        };
        student_inner_loss(&out, &targets, &[0, 1, 2, 0, 1], &kd)
    };
    vec![
        prim("cross_entropy_sum", one("s", wave(&[5, 3], 0.8)), |_, v| {
            cross_entropy_sum(v.get("s")?, &[0, 1, 2, 2, 1])
        }),
        prim("kd_kl", one("s", wave(&[5, 3], 0.8)), move |_, v| {
            kd_kl(&tl, v.get("s")?, 4.0)
        }),
        prim("rkd_distance", emb(), move |_, v| rkd_distance(&t1, v.get("s")?, 1.0)),
        prim("rkd_angle", emb(), move |_, v| rkd_angle(&t2, v.get("s")?)),
        prim(
            "student_inner_loss",
            init_params(&NetworkSpec::mlp(3, &[4], 3), 2).expect("valid spec"),
            combined,
        ),
    ]
}

fn networks() -> Vec<Check> {
    let mlp = NetworkSpec::mlp(4, &[6, 5], 3);
    let conv = NetworkSpec::conv([1, 6, 6], &[2, 3], 3, 3);
    let mlp_p = init_params(&mlp, 11).expect("valid spec");
    let conv_p = init_params(&conv, 12).expect("valid spec");
    vec![
        prim("mlp forward", mlp_p, move |g, v| {
            cross_entropy_sum(&apply(&mlp, v, &g.constant(wave(&[4, 4], 0.4))?)?.logits, &[0, 1, 2, 1])
        }),
        prim("conv forward", conv_p, move |g, v| {
            cross_entropy_sum(
                &apply(&conv, v, &g.constant(wave(&[3, 1, 6, 6], 0.4))?)?.logits,
                &[2, 1, 0],
            )
        }),
    ]
}

/// A small blobs episode and a net of at most 50 parameters.
pub fn meta_fixture() -> (Episode, NetworkSpec, ParamSet) {
    let ep = blobs_family(4, 20, 1.0, 0.3)
        .and_then(|d| d.with_shape(3, 2, 2).episode(3, 0))
        .expect("valid fixture");
    let spec = NetworkSpec::mlp(4, &[4], 3);
    let params = init_params(&spec, 8).expect("valid spec");
    (ep, spec, params)
}

fn meta() -> Vec<Check> {
    let (ep, spec, params) = meta_fixture();
    let teacher = NetworkSpec::mlp(4, &[8], 3);
    let (logits, embedding) =
        apply_tensors(&teacher, &init_params(&teacher, 9).expect("valid spec"), &ep.support_x).expect("fixture shapes");
    let targets = TeacherTargets { logits, embedding };
    let query = move |spec: &NetworkSpec, g: &Graph, p: &ParamVars, ep: &Episode| {
        cross_entropy_sum(&apply(spec, p, &g.constant(ep.query_x.clone())?)?.logits, &ep.query_y)
    };
    let mut out = Vec::new();
    {
        let (ep, spec) = (ep.clone(), spec.clone());
        out.push(check(
            "maml meta-gradient (S=5)",
            META_TOL,
            params.clone(),
            move |g, v| {
                let r = maml_inner(&spec, v, &ep.support_x, &ep.support_y, 0.3, 5, AdaptMode::SecondOrder)?;
                query(&spec, g, &r.params, &ep)
            },
        ));
    }
    for (name, kind) in [
        ("student meta-gradient, kl (S=5)", KdKind::Kl),
        ("student meta-gradient, rkd (S=5)", KdKind::RkdDistanceAngle),
    ] {
        let (ep, spec, targets) = (ep.clone(), spec.clone(), targets.clone());
        let kd = KdConfig {
            kind,
            ..KdConfig::default()
        };
        out.push(check(name, META_TOL, params.clone(), move |g, v| {
            let r = inner_adapt_student(
                &spec,
                v,
                &targets,
                &ep.support_x,
                &ep.support_y,
                &kd,
                0.3,
                5,
                AdaptMode::SecondOrder,
            )?;
            query(&spec, g, &r.params, &ep)
        }));
    }
    out
}

/// Every check, primitives first.
pub fn suite() -> Vec<Check> {
    let mut all = primitives();
    all.extend(losses());
    all.extend(networks());
    all.extend(meta());
    all
}

pub fn run(check: &Check) -> Result<CheckOutcome> {
    let report = finite_diff_check(&check.loss, &check.params, H, check.tol)?;
    Ok(CheckOutcome {
        name: check.name.to_string(),
        tol: check.tol,
        max_rel_err: report.max_rel_err(),
        coordinates: check.params.num_scalars(),
        passed: report.passed(),
    })
}

pub fn run_suite() -> Result<Vec<CheckOutcome>> {
    suite().iter().map(run).collect()
}
