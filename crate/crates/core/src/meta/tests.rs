use std::sync::Arc;

use super::*;
use crate::autodiff::{finite_diff_check, grad, Graph, Tensor};
use crate::episodes::{Blobs, BlobsParams, Episode, Family, Split, TaskDistribution};
use crate::error::Error;
use crate::losses::{cross_entropy_sum, student_inner_loss, KdConfig, KdKind};
use crate::nets::{apply, init_params, reset_head, NetworkSpec};
use crate::params::{grad_params, ParamSet};

fn blobs_dist(d: usize, sigma: f64, rotation: f64) -> TaskDistribution {
    let params = BlobsParams {
        d_input: d,
        n_classes: 40,
        spread: 1.0,
        sigma,
        rotation,
        world_seed: 3,
    };
    TaskDistribution::new(Family::Blobs(Arc::new(Blobs::new(params).unwrap())))
}

fn episode(n_way: usize, k: usize, q: usize, index: u64) -> Episode {
    blobs_dist(4, 0.3, 1.0)
        .with_shape(n_way, k, q)
        .episode(17, index)
        .unwrap()
}

fn tiny_student() -> NetworkSpec {
    NetworkSpec::mlp(4, &[5], 3)
}

fn tiny_teacher() -> NetworkSpec {
    NetworkSpec::mlp(4, &[12, 12], 3)
}

fn sgd_cfg() -> MetaConfig {
    MetaConfig {
        alpha: 0.1,
        lambda: 0.1,
        beta: 0.01,
        eta: 0.01,
        inner_steps: 3,
        tasks_per_batch: 2,
        optimizer: OptimizerConfig::sgd(),
        val_every: 0,
        ..MetaConfig::default()
    }
}

fn learners(cfg: &MetaConfig) -> (Learner, Learner) {
    let t = Learner::teacher(tiny_teacher(), init_params(&tiny_teacher(), 1).unwrap(), cfg).unwrap();
    let s = Learner::student(tiny_student(), init_params(&tiny_student(), 2).unwrap(), cfg).unwrap();
    (t, s)
}

fn support_ce<'a>(
    spec: &'a NetworkSpec,
    ep: &'a Episode,
) -> impl Fn(&Graph, &crate::params::ParamVars) -> crate::Result<crate::autodiff::Var> + 'a {
    move |g, p| {
        cross_entropy_sum(
            &apply(spec, p, &g.constant(ep.support_x.clone()).unwrap())?.logits,
            &ep.support_y,
        )
    }
}

#[test]
fn quadratic_inner_step_by_hand() {
    let g = Graph::new();
    let w = ParamSet::new(vec![("w".into(), Tensor::scalar(0.0))])
        .unwrap()
        .to_vars(&g)
        .unwrap();
    let r = adapt(&w, 0.1, 1, AdaptMode::SecondOrder, |g, p| {
        let d = p.get("w")?.sub(&g.constant(Tensor::scalar(3.0))?)?;
        d.mul(&d)
    })
    .unwrap();
    assert!((r.params.values().get("w").unwrap().item().unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(r.losses, vec![9.0]);
    assert!(r.graph_retained);
}

#[test]
fn zero_inner_rate_is_identity() {
    let ep = episode(3, 2, 2, 0);
    let spec = tiny_student();
    let p = init_params(&spec, 0).unwrap();
    for mode in [AdaptMode::SecondOrder, AdaptMode::FirstOrder, AdaptMode::Detached] {
        let g = Graph::new();
        let r = maml_inner(
            &spec,
            &p.to_vars(&g).unwrap(),
            &ep.support_x,
            &ep.support_y,
            0.0,
            5,
            mode,
        )
        .unwrap();
        assert!(r.params.values().bits_eq(&p));
        assert_eq!(r.losses.len(), 5);
    }
}

#[test]
fn single_step_matches_finite_difference_gradient() {
    let ep = episode(3, 2, 2, 1);
    let spec = tiny_teacher();
    let p = init_params(&spec, 4).unwrap();
    let cfg = MetaConfig {
        inner_steps: 1,
        alpha: 0.07,
        ..sgd_cfg()
    };
    let g = Graph::new();
    let adapted = inner_adapt_teacher(&spec, &p.to_vars(&g).unwrap(), &ep, &cfg, AdaptMode::SecondOrder)
        .unwrap()
        .params
        .values();
    // Independent oracle: central differences of the support loss.
    let eval = |q: &ParamSet| {
        let g = Graph::new();
        support_ce(&spec, &ep)(&g, &q.to_constants(&g).unwrap())
            .unwrap()
            .value()
            .item()
            .unwrap()
    };
    let h = 1e-6;
    for (name, t) in p.iter() {
        for i in 0..t.numel() {
            let bump = |delta: f64| {
                let mut data = t.data().to_vec();
                data[i] += delta;
                p.clone()
                    .with(name, Tensor::new(t.shape().to_vec(), data).unwrap())
                    .unwrap()
            };
            let fd = (eval(&bump(h)) - eval(&bump(-h))) / (2.0 * h);
            let want = t.data()[i] - 0.07 * fd;
            let got = adapted.get(name).unwrap().data()[i];
            assert!((got - want).abs() < 1e-8, "{name}[{i}]: {got} vs {want}");
        }
    }
}

#[test]
fn trajectory_matches_reference_loop() {
    let ep = episode(3, 2, 2, 2);
    let spec = tiny_teacher();
    let p0 = init_params(&spec, 5).unwrap();
    let g = Graph::new();
    let r = maml_inner(
        &spec,
        &p0.to_vars(&g).unwrap(),
        &ep.support_x,
        &ep.support_y,
        0.05,
        5,
        AdaptMode::SecondOrder,
    )
    .unwrap();

    let mut p = p0.clone();
    let mut losses = Vec::new();
    for _ in 0..5 {
        let g = Graph::new();
        let v = p.to_vars(&g).unwrap();
        let loss = support_ce(&spec, &ep)(&g, &v).unwrap();
        losses.push(loss.value().item().unwrap());
        let grads = grad_params(&loss, &v, false).unwrap().values();
        p = p.zip_map(&grads, |w, d| w - d * 0.05).unwrap();
    }
    assert_eq!(r.losses, losses);
    assert!(r.params.values().max_abs_diff(&p).unwrap() < 1e-14);
}

#[test]
fn convex_fixture_inner_loss_is_monotone() {
    let dist = blobs_dist(6, 0.05, 0.0).with_shape(4, 5, 1);
    let spec = NetworkSpec::mlp(6, &[], 4);
    for i in 0..5 {
        let ep = dist.episode(0, i).unwrap();
        let g = Graph::new();
        let p = init_params(&spec, i).unwrap().to_vars(&g).unwrap();
        let r = maml_inner(&spec, &p, &ep.support_x, &ep.support_y, 0.01, 20, AdaptMode::Detached).unwrap();
        assert!(r.losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.losses);
        assert!(r.losses[19] < r.losses[0]);
    }
}

#[test]
fn diverging_inner_loop_reports_the_step() {
    let ep = episode(3, 2, 2, 3);
    let spec = tiny_student();
    let p = init_params(&spec, 0).unwrap().map(|v| v * 30.0);
    let g = Graph::new();
    let err = maml_inner(
        &spec,
        &p.to_vars(&g).unwrap(),
        &ep.support_x,
        &ep.support_y,
        1e140,
        5,
        AdaptMode::Detached,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteInner { step } if step > 0), "{err:?}");
}

fn targets_from(spec: &NetworkSpec, params: &ParamSet, ep: &Episode) -> crate::losses::TeacherTargets {
    distill_targets(spec, params, &ep.support_x).unwrap()
}

#[test]
fn zero_kd_weight_reduces_to_maml_inner() {
    let ep = episode(3, 2, 2, 4);
    let (t, s) = learners(&sgd_cfg());
    let targets = targets_from(&t.spec, &t.params, &ep);
    let kd = KdConfig {
        weight: 0.0,
        ..KdConfig::default()
    };
    let g = Graph::new();
    let v = s.params.to_vars(&g).unwrap();
    let a = inner_adapt_student(
        &s.spec,
        &v,
        &targets,
        &ep.support_x,
        &ep.support_y,
        &kd,
        0.1,
        5,
        AdaptMode::SecondOrder,
    )
    .unwrap();
    let b = maml_inner(
        &s.spec,
        &v,
        &ep.support_x,
        &ep.support_y,
        0.1,
        5,
        AdaptMode::SecondOrder,
    )
    .unwrap();
    assert!(a.params.values().bits_eq(&b.params.values()));
    assert_eq!(a.losses, b.losses);
}

#[test]
fn self_distillation_adds_no_gradient() {
    // The teacher is the student itself, so at the first step the KL term and
    // its gradient vanish.
    let ep = episode(3, 2, 2, 5);
    let (_, s) = learners(&sgd_cfg());
    let targets = targets_from(&s.spec, &s.params, &ep);
    let g = Graph::new();
    let v = s.params.to_vars(&g).unwrap();
    let zero = KdConfig {
        weight: 0.0,
        ..KdConfig::default()
    };
    let run = |kd: &KdConfig| {
        inner_adapt_student(
            &s.spec,
            &v,
            &targets,
            &ep.support_x,
            &ep.support_y,
            kd,
            0.1,
            1,
            AdaptMode::Detached,
        )
        .unwrap()
        .params
        .values()
    };
    assert!(run(&KdConfig::default()).max_abs_diff(&run(&zero)).unwrap() < 1e-14);
}

#[test]
fn student_step_matches_finite_difference_of_combined_loss() {
    let ep = episode(3, 2, 2, 6);
    let (t, s) = learners(&sgd_cfg());
    let targets = targets_from(&t.spec, &t.params, &ep);
    for kind in [KdKind::Kl, KdKind::RkdDistance, KdKind::RkdDistanceAngle] {
        let kd = KdConfig {
            kind,
            ..KdConfig::default()
        };
        let g = Graph::new();
        let adapted = inner_adapt_student(
            &s.spec,
            &s.params.to_vars(&g).unwrap(),
            &targets,
            &ep.support_x,
            &ep.support_y,
            &kd,
            0.1,
            1,
            AdaptMode::SecondOrder,
        )
        .unwrap()
        .params
        .values();
        let loss = |g: &Graph, p: &crate::params::ParamVars| {
            let out = apply(&s.spec, p, &g.constant(ep.support_x.clone())?)?;
            student_inner_loss(&out, &targets, &ep.support_y, &kd)
        };
        let report = finite_diff_check(loss, &s.params, 1e-6, 1e-5).unwrap();
        assert!(report.passed(), "{kind:?}: {report:?}");
        // The analytic gradient passed the check; recover it from the step.
        let step = s.params.sub(&adapted).unwrap().scale(1.0 / 0.1);
        let g = Graph::new();
        let v = s.params.to_vars(&g).unwrap();
        let direct = grad_params(&loss(&g, &v).unwrap(), &v, false).unwrap().values();
        assert!(step.max_abs_diff(&direct).unwrap() < 1e-12);
    }
}

#[test]
fn unrolled_meta_gradient_matches_finite_differences() {
    let ep = episode(3, 2, 3, 7);
    let spec = NetworkSpec::mlp(4, &[4], 3);
    assert!(spec.param_count() <= 50);
    let p = init_params(&spec, 8).unwrap();
    let meta_loss = |g: &Graph, v: &crate::params::ParamVars| {
        let r = maml_inner(&spec, v, &ep.support_x, &ep.support_y, 0.3, 3, AdaptMode::SecondOrder)?;
        cross_entropy_sum(
            &apply(&spec, &r.params, &g.constant(ep.query_x.clone())?)?.logits,
            &ep.query_y,
        )
    };
    let report = finite_diff_check(meta_loss, &p, 1e-5, 1e-3).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_rel_err() < 1e-3);

    // And through the distillation-augmented student loop.
    let (t, _) = learners(&sgd_cfg());
    let targets = targets_from(&t.spec, &t.params, &ep);
    let kd = KdConfig::default();
    let meta_loss = |g: &Graph, v: &crate::params::ParamVars| {
        let r = inner_adapt_student(
            &spec,
            v,
            &targets,
            &ep.support_x,
            &ep.support_y,
            &kd,
            0.3,
            3,
            AdaptMode::SecondOrder,
        )?;
        cross_entropy_sum(
            &apply(&spec, &r.params, &g.constant(ep.query_x.clone())?)?.logits,
            &ep.query_y,
        )
    };
    let report = finite_diff_check(meta_loss, &p, 1e-5, 1e-3).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn first_order_approaches_second_order_as_alpha_shrinks() {
    // Small inputs keep α·‖H‖ < 1 across the sweep.
    let mut ep = episode(3, 2, 3, 8);
    ep.support_x = ep.support_x.map(|v| v * 0.25);
    ep.query_x = ep.query_x.map(|v| v * 0.25);
    let spec = NetworkSpec::mlp(4, &[6], 3);
    let p = init_params(&spec, 9).unwrap();
    let meta_grad = |alpha: f64, mode: AdaptMode| {
        let g = Graph::new();
        let v = p.to_vars(&g).unwrap();
        let r = maml_inner(&spec, &v, &ep.support_x, &ep.support_y, alpha, 3, mode).unwrap();
        let loss = cross_entropy_sum(
            &apply(&spec, &r.params, &g.constant(ep.query_x.clone()).unwrap())
                .unwrap()
                .logits,
            &ep.query_y,
        )
        .unwrap();
        grad_params(&loss, &v, false).unwrap().values()
    };
    let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&a| {
            meta_grad(a, AdaptMode::SecondOrder)
                .sub(&meta_grad(a, AdaptMode::FirstOrder))
                .unwrap()
                .l2_norm()
        })
        .collect();
    assert!(gaps[0] > 0.0);
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

#[test]
fn detached_adaptation_has_no_path_to_initial_parameters() {
    let ep = episode(3, 2, 2, 9);
    let spec = tiny_student();
    let g = Graph::new();
    let v = init_params(&spec, 0).unwrap().to_vars(&g).unwrap();
    let r = maml_inner(&spec, &v, &ep.support_x, &ep.support_y, 0.1, 2, AdaptMode::Detached).unwrap();
    assert!(!r.graph_retained);
    let first = r.params.vars()[0].clone();
    // The adapted tensor lives on another graph.
    assert!(matches!(
        grad(&first.sum().unwrap(), &[v.vars()[0].clone()], false),
        Err(Error::GraphMismatch)
    ));
}

fn batch(indices: &[u64]) -> Vec<Episode> {
    indices.iter().map(|&i| episode(3, 2, 2, 100 + i)).collect()
}

#[test]
fn zero_outer_rates_are_identity() {
    let cfg = MetaConfig {
        beta: 0.0,
        eta: 0.0,
        ..sgd_cfg()
    };
    let (mut t, mut s) = learners(&cfg);
    let (t0, s0) = (t.params.clone(), s.params.clone());
    let m = tsmd_meta_step(&mut t, &mut s, &batch(&[0, 1]), &KdConfig::default(), &cfg).unwrap();
    assert!(t.params.bits_eq(&t0) && s.params.bits_eq(&s0));
    assert!(m.teacher_acc.is_some());
    maml_meta_step(&mut s, &batch(&[2]), &cfg).unwrap();
    assert!(s.params.bits_eq(&s0));
}

#[test]
fn degenerate_inner_loop_gives_plain_query_gradients() {
    let cfg = MetaConfig {
        alpha: 0.0,
        lambda: 0.0,
        ..sgd_cfg()
    };
    let (t, s) = learners(&cfg);
    let ep = episode(3, 2, 2, 10);
    let got = tsmd_meta_gradient(&t, &s, &ep, &KdConfig::default(), &cfg).unwrap();
    let direct = |l: &Learner| {
        let g = Graph::new();
        let v = l.params.to_vars(&g).unwrap();
        let loss = cross_entropy_sum(
            &apply(&l.spec, &v, &g.constant(ep.query_x.clone()).unwrap())
                .unwrap()
                .logits,
            &ep.query_y,
        )
        .unwrap();
        grad_params(&loss, &v, false).unwrap().values()
    };
    assert!(got.teacher.unwrap().max_abs_diff(&direct(&t)).unwrap() < 1e-12);
    assert!(got.student.max_abs_diff(&direct(&s)).unwrap() < 1e-12);
}

#[test]
fn batch_gradient_is_sum_of_episode_gradients() {
    let cfg = MetaConfig {
        beta: 1.0,
        eta: 1.0,
        ..sgd_cfg()
    };
    let (t, s) = learners(&cfg);
    let eps = batch(&[3, 4]);
    let kd = KdConfig::default();
    let g0 = tsmd_meta_gradient(&t, &s, &eps[0], &kd, &cfg).unwrap();
    let g1 = tsmd_meta_gradient(&t, &s, &eps[1], &kd, &cfg).unwrap();
    let (mut t2, mut s2) = (t.clone(), s.clone());
    tsmd_meta_step(&mut t2, &mut s2, &eps, &kd, &cfg).unwrap();
    let want_s = s.params.sub(&g0.student.add(&g1.student).unwrap()).unwrap();
    let want_t = t
        .params
        .sub(&g0.teacher.unwrap().add(&g1.teacher.unwrap()).unwrap())
        .unwrap();
    assert!(s2.params.bits_eq(&want_s));
    assert!(t2.params.bits_eq(&want_t));
}

#[test]
fn distillation_with_zero_weight_and_fixed_teacher_is_maml() {
    let cfg = MetaConfig {
        teacher_mode: TeacherMode::Fixed,
        optimizer: OptimizerConfig::default(),
        ..sgd_cfg()
    };
    let kd = KdConfig {
        weight: 0.0,
        ..KdConfig::default()
    };
    let (mut t, mut s) = learners(&cfg);
    let mut plain = s.clone();
    let t0 = t.params.clone();
    for step in 0..3 {
        let eps = batch(&[2 * step, 2 * step + 1]);
        let m = tsmd_meta_step(&mut t, &mut s, &eps, &kd, &cfg).unwrap();
        assert!(m.teacher_acc.is_none());
        maml_meta_step(&mut plain, &eps, &cfg).unwrap();
        assert!(s.params.bits_eq(&plain.params));
    }
    assert!(t.params.bits_eq(&t0));
    assert_eq!(s.optim, plain.optim);
}

#[test]
fn teacher_path_is_maml_on_the_teacher() {
    // The teacher's outer update uses only its own query loss.
    let cfg = MetaConfig {
        optimizer: OptimizerConfig::default(),
        ..sgd_cfg()
    };
    let (mut t, mut s) = learners(&cfg);
    let mut oracle = t.clone();
    for step in 0..2 {
        let eps = batch(&[10 + 2 * step, 11 + 2 * step]);
        tsmd_meta_step(&mut t, &mut s, &eps, &KdConfig::default(), &cfg).unwrap();
        maml_meta_step(&mut oracle, &eps, &cfg).unwrap();
    }
    assert!(t.params.bits_eq(&oracle.params));
}

#[test]
fn student_gradient_ignores_teacher_when_kd_is_off() {
    let cfg = sgd_cfg();
    let (t, s) = learners(&cfg);
    let other = Learner::teacher(tiny_teacher(), init_params(&tiny_teacher(), 77).unwrap(), &cfg).unwrap();
    let kd = KdConfig {
        weight: 0.0,
        ..KdConfig::default()
    };
    let ep = episode(3, 2, 2, 11);
    let a = tsmd_meta_gradient(&t, &s, &ep, &kd, &cfg).unwrap();
    let b = tsmd_meta_gradient(&other, &s, &ep, &kd, &cfg).unwrap();
    assert!(a.student.bits_eq(&b.student));
    let a = tsmd_meta_gradient(&t, &s, &ep, &KdConfig::default(), &cfg).unwrap();
    let b = tsmd_meta_gradient(&other, &s, &ep, &KdConfig::default(), &cfg).unwrap();
    assert!(!a.student.bits_eq(&b.student));
}

#[test]
fn non_finite_meta_gradient_names_the_episode() {
    let cfg = sgd_cfg();
    let (_, mut s) = learners(&cfg);
    let mut eps = batch(&[0, 1]);
    eps[1].query_x = eps[1].query_x.map(|_| 1e308);
    let err = maml_meta_step(&mut s, &eps, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFiniteMetaGradient { episode: 1 }), "{err:?}");
}

#[test]
fn reptile_identities() {
    let cfg = MetaConfig {
        reptile_epsilon: 0.0,
        ..sgd_cfg()
    };
    let (mut t, mut s) = learners(&cfg);
    let (t0, s0) = (t.params.clone(), s.params.clone());
    let kd = KdConfig::default();
    reptile_step(Some((&mut t, &kd)), &mut s, &batch(&[0, 1]), &cfg).unwrap();
    assert!(t.params.bits_eq(&t0) && s.params.bits_eq(&s0));

    let still = MetaConfig {
        alpha: 0.0,
        lambda: 0.0,
        reptile_epsilon: 0.5,
        ..sgd_cfg()
    };
    let (mut t, mut s) = learners(&still);
    reptile_step(Some((&mut t, &kd)), &mut s, &batch(&[2]), &still).unwrap();
    assert_eq!(t.params.max_abs_diff(&t0).unwrap(), 0.0);
    assert_eq!(s.params.max_abs_diff(&s0).unwrap(), 0.0);
}

#[test]
fn reptile_full_step_lands_on_adapted_parameters() {
    let cfg = MetaConfig {
        reptile_epsilon: 1.0,
        ..sgd_cfg()
    };
    let (_, mut s) = learners(&cfg);
    let ep = batch(&[5]);
    let adapted = meta_test_plain(
        &s,
        &ep[0],
        &MetaConfig {
            test_inner_steps: Some(cfg.inner_steps),
            ..cfg.clone()
        },
    )
    .unwrap()
    .student;
    reptile_step(None, &mut s, &ep, &cfg).unwrap();
    assert!(s.params.bits_eq(&adapted));
}

#[test]
fn reptile_with_fixed_teacher_leaves_it_untouched() {
    let cfg = MetaConfig {
        teacher_mode: TeacherMode::Fixed,
        reptile_epsilon: 0.5,
        ..sgd_cfg()
    };
    let (mut t, mut s) = learners(&cfg);
    let (t0, s0) = (t.params.clone(), s.params.clone());
    let m = reptile_step(Some((&mut t, &KdConfig::rkd())), &mut s, &batch(&[0, 1]), &cfg).unwrap();
    assert!(t.params.bits_eq(&t0));
    assert!(!s.params.bits_eq(&s0));
    assert!(m.teacher_acc.is_none());
}

#[test]
fn adam_first_step_has_learning_rate_magnitude() {
    let p = ParamSet::new(vec![("w".into(), Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())]).unwrap();
    let g = ParamSet::new(vec![(
        "w".into(),
        Tensor::new(vec![3], vec![0.3, -40.0, 1e-3]).unwrap(),
    )])
    .unwrap();
    let mut state = OptimState::default();
    let next = state.update(&p, &g, 0.01, &OptimizerConfig::default()).unwrap();
    let delta = p.sub(&next).unwrap();
    for (d, s) in delta.get("w").unwrap().data().iter().zip([1.0, -1.0, 1.0]) {
        assert!((d - 0.01 * s).abs() < 1e-6, "{d}");
    }
    assert_eq!(state.step, 1);
    let mut sgd = OptimState::default();
    let next = sgd.update(&p, &g, 0.5, &OptimizerConfig::sgd()).unwrap();
    assert_eq!(next.get("w").unwrap().data(), &[1.0 - 0.15, -2.0 + 20.0, 0.5 - 0.0005]);
}

#[test]
fn config_validation() {
    assert!(MetaConfig::default().validate().is_ok());
    for bad in [
        MetaConfig {
            alpha: -1.0,
            ..MetaConfig::default()
        },
        MetaConfig {
            inner_steps: 0,
            ..MetaConfig::default()
        },
        MetaConfig {
            tasks_per_batch: 0,
            ..MetaConfig::default()
        },
        MetaConfig {
            reptile_epsilon: 2.0,
            ..MetaConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn untrained_student_is_at_chance() {
    let dist = blobs_dist(8, 0.5, 1.0).with_split(Split::MetaTest);
    let cfg = MetaConfig {
        alpha: 0.0,
        lambda: 0.0,
        ..MetaConfig::default()
    };
    let spec = NetworkSpec::mlp(8, &[16, 16], 5);
    let s = Learner::student(spec.clone(), init_params(&spec, 3).unwrap(), &cfg).unwrap();
    let n = 800;
    let mean = (0..n)
        .map(|i| {
            meta_test_plain(&s, &dist.episode(1, i).unwrap(), &cfg)
                .unwrap()
                .accuracy
        })
        .sum::<f64>()
        / n as f64;
    let sigma = (0.2f64 * 0.8 / (n as f64 * 75.0)).sqrt();
    // Predictions within an episode are correlated, so allow the 3σ band on
    // the episode count rather than the query count.
    let episode_sigma = (0.2f64 * 0.8 / n as f64).sqrt();
    assert!(sigma < episode_sigma);
    assert!((mean - 0.2).abs() < 3.0 * episode_sigma, "{mean}");
}

#[test]
fn fixed_teacher_unchanged_by_meta_test() {
    let cfg = MetaConfig {
        teacher_mode: TeacherMode::Fixed,
        ..sgd_cfg()
    };
    let (t, s) = learners(&cfg);
    let t0 = t.params.clone();
    let out = meta_test_adapt(&t, &s, &episode(3, 2, 4, 12), &KdConfig::rkd(), &cfg).unwrap();
    assert!(t.params.bits_eq(&t0));
    assert_eq!(out.predictions.len(), 12);
}

fn small_trainer(method: Method, teacher: bool, cfg: MetaConfig, seed: u64) -> MetaTrainer {
    let dist = blobs_dist(4, 0.3, 1.0).with_shape(3, 1, 3);
    let (t, s) = learners(&cfg);
    MetaTrainer::new(teacher.then_some(t), s, KdConfig::default(), method, cfg, &dist, seed).unwrap()
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = MetaConfig {
        meta_steps: 4,
        val_every: 2,
        val_episodes: 5,
        optimizer: OptimizerConfig::default(),
        ..sgd_cfg()
    };
    for method in [Method::Maml, Method::Reptile] {
        let mut a = small_trainer(method, true, cfg.clone(), 9);
        a.run().unwrap();
        let mut b = small_trainer(method, true, cfg.clone(), 9);
        b.step().unwrap();
        b.step().unwrap();
        let mut resumed = b.clone();
        resumed.run().unwrap();
        assert!(a.student.params.bits_eq(&resumed.student.params));
        assert!(a
            .teacher
            .as_ref()
            .unwrap()
            .params
            .bits_eq(&resumed.teacher.as_ref().unwrap().params));
        assert_eq!(a.history, resumed.history);
        assert_eq!(a.history.iter().filter(|r| r.val_acc.is_some()).count(), 2);
    }
}

#[test]
fn early_stopping_keeps_the_best_student() {
    let cfg = MetaConfig {
        meta_steps: 40,
        val_every: 1,
        val_episodes: 4,
        patience: Some(2),
        ..sgd_cfg()
    };
    let mut tr = small_trainer(Method::Maml, false, cfg, 1);
    tr.run().unwrap();
    let best = tr.best.clone().unwrap();
    let vals: Vec<f64> = tr.history.iter().filter_map(|r| r.val_acc).collect();
    assert_eq!(best.val_acc, vals.iter().cloned().fold(f64::MIN, f64::max));
    if tr.step < 40 {
        assert!(tr.stopped());
    }
    let (_, student) = tr.best_models();
    assert!(student.params.bits_eq(&best.student));
}

#[test]
fn fixed_teacher_is_bit_identical_after_training() {
    let cfg = MetaConfig {
        teacher_mode: TeacherMode::Fixed,
        meta_steps: 3,
        ..sgd_cfg()
    };
    let mut tr = small_trainer(Method::Maml, true, cfg, 2);
    let t0 = tr.teacher.as_ref().unwrap().params.clone();
    tr.run().unwrap();
    assert!(tr.teacher.as_ref().unwrap().params.bits_eq(&t0));
}

#[test]
fn meta_training_solves_noiseless_blobs() {
    let dist = blobs_dist(8, 1e-6, 1.0);
    let spec = NetworkSpec::mlp(8, &[32, 32], 5);
    let cfg = MetaConfig {
        lambda: 0.1,
        meta_steps: 150,
        val_every: 0,
        ..MetaConfig::default()
    };
    let s = Learner::student(spec.clone(), init_params(&spec, 0).unwrap(), &cfg).unwrap();
    let mut tr = MetaTrainer::new(None, s, KdConfig::default(), Method::Maml, cfg.clone(), &dist, 0).unwrap();
    tr.run().unwrap();
    let test = dist.with_split(Split::MetaTest);
    let mean = (0..100)
        .map(|i| {
            meta_test_plain(&tr.student, &test.episode(5, i).unwrap(), &cfg)
                .unwrap()
                .accuracy
        })
        .sum::<f64>()
        / 100.0;
    assert!(mean > 0.97, "{mean}");
}

#[test]
fn pretraining_contracts() {
    let dist = blobs_dist(6, 0.2, 1.0);
    let spec = NetworkSpec::mlp(6, &[16], 5);
    let cfg = PretrainConfig {
        epochs: 0,
        per_class: 20,
        batch_size: 16,
        lr: 1e-2,
    };
    let (p, stats) = pretrain_teacher(&spec, &dist.family, &cfg, 4).unwrap();
    let pooled = spec.with_classes(dist.family.pool(Split::MetaTrain).len());
    assert!(stats.is_empty());
    assert!(p.bits_eq(&init_params(&pooled, 4).unwrap()));

    let cfg = PretrainConfig { epochs: 4, ..cfg };
    let mut trainer = Pretrainer::new(&spec, &dist.family, &cfg, 4).unwrap();
    let mut accs = vec![trainer.accuracy().unwrap()];
    for _ in 0..4 {
        accs.push(trainer.run_epoch().unwrap().accuracy);
    }
    assert!(accs.windows(2).take(3).all(|w| w[1] > w[0]), "{accs:?}");
    let (again, _) = pretrain_teacher(&spec, &dist.family, &cfg, 4).unwrap();
    assert!(again.bits_eq(&trainer.params));

    let head = reset_head(&spec, &again).unwrap();
    assert!(head.get("head.weight").unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(head.get("head.weight").unwrap().shape(), &[16, 5]);
}

#[test]
fn resume_from_checkpoint_bytes_matches_uninterrupted_run() {
    let cfg = MetaConfig {
        meta_steps: 6,
        val_every: 2,
        val_episodes: 4,
        patience: Some(5),
        optimizer: OptimizerConfig::default(),
        ..sgd_cfg()
    };
    for fixed in [false, true] {
        let cfg = MetaConfig {
            teacher_mode: if fixed {
                TeacherMode::Fixed
            } else {
                TeacherMode::Trainable
            },
            ..cfg.clone()
        };
        let mut whole = small_trainer(Method::Maml, true, cfg.clone(), 4);
        whole.run().unwrap();

        let mut first = small_trainer(Method::Maml, true, cfg.clone(), 4);
        for _ in 0..3 {
            first.step().unwrap();
        }
        let bytes = first.to_checkpoint().to_bytes();
        let mut resumed = small_trainer(Method::Maml, true, cfg.clone(), 4);
        resumed
            .restore(&crate::checkpoint::Checkpoint::from_bytes(&bytes).unwrap())
            .unwrap();
        assert_eq!(resumed.step, 3);
        resumed.run().unwrap();
        assert!(resumed.student.params.bits_eq(&whole.student.params));
        assert!(resumed
            .teacher
            .as_ref()
            .unwrap()
            .params
            .bits_eq(&whole.teacher.as_ref().unwrap().params));
        assert_eq!(resumed.student.optim, whole.student.optim);
        let (rb, wb) = (resumed.best.clone().unwrap(), whole.best.clone().unwrap());
        assert_eq!((rb.step, rb.val_acc), (wb.step, wb.val_acc));
        assert!(rb.student.bits_eq(&wb.student));
        assert_eq!(
            resumed.to_checkpoint().to_bytes().len(),
            whole.to_checkpoint().to_bytes().len()
        );
    }
    let other = small_trainer(Method::Maml, true, cfg.clone(), 5);
    let mut wrong_seed = small_trainer(Method::Maml, true, cfg, 4);
    assert!(wrong_seed.restore(&other.to_checkpoint()).is_err());
}
