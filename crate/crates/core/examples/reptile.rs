//! First-order Reptile outer updates, for the student alone and with a
//! jointly trained teacher distilling into it.

use tsmd::episodes::{blobs_family, Split};
use tsmd::eval::{evaluate, paired_difference, EvalOptions};
use tsmd::losses::KdConfig;
use tsmd::meta::{Learner, MetaConfig, MetaTrainer, Method, Variant};
use tsmd::nets::{init_params, NetworkSpec};

fn main() -> tsmd::Result<()> {
    let dist = blobs_family(16, 60, 1.0, 0.8)?.with_shape(5, 1, 10);
    let teacher_spec = NetworkSpec::mlp(16, &[96, 96], 5);
    let student_spec = NetworkSpec::mlp(16, &[16, 16], 5);
    let cfg = MetaConfig {
        variant: Variant::Reptile,
        reptile_epsilon: 0.1,
        meta_steps: 150,
        val_every: 0,
        ..MetaConfig::default()
    };
    let student_init = init_params(&student_spec, 1)?;
    let test = dist.clone().with_split(Split::MetaTest);
    let opts = EvalOptions {
        n_episodes: 300,
        seed: 5,
        ..EvalOptions::default()
    };
    let silent = KdConfig {
        weight: 0.0,
        ..KdConfig::default()
    };

    let student = Learner::student(student_spec.clone(), student_init.clone(), &cfg)?;
    let mut alone = MetaTrainer::new(None, student, silent, Method::Reptile, cfg.clone(), &dist, 0)?;
    alone.run()?;
    let alone = evaluate(None, &alone.student, &test, &cfg, &opts)?.named("reptile_student");

    let teacher = Learner::teacher(teacher_spec.clone(), init_params(&teacher_spec, 2)?, &cfg)?;
    let student = Learner::student(student_spec, student_init, &cfg)?;
    let mut joint = MetaTrainer::new(
        Some(teacher),
        student,
        KdConfig::default(),
        Method::Reptile,
        cfg.clone(),
        &dist,
        0,
    )?;
    joint.run()?;
    let ours = evaluate(
        joint.teacher.as_ref().map(|t| (t, &joint.kd)),
        &joint.student,
        &test,
        &cfg,
        &opts,
    )?
    .named("reptile_ours");

    print!(
        "{}",
        tsmd::eval::format_table(&[alone.clone(), ours.clone()], &[paired_difference(&ours, &alone)?])
    );
    Ok(())
}
