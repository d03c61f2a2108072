//! Joint teacher/student meta-training against student-only MAML on a small
//! blobs problem, evaluated on shared meta-test episodes.

use tsmd::episodes::{blobs_family, Split};
use tsmd::eval::{evaluate, paired_difference, EvalOptions};
use tsmd::losses::KdConfig;
use tsmd::meta::{Learner, MetaConfig, MetaTrainer, Method};
use tsmd::nets::{init_params, NetworkSpec};

fn main() -> tsmd::Result<()> {
    let dist = blobs_family(16, 60, 1.0, 0.8)?.with_shape(5, 1, 10);
    let teacher_spec = NetworkSpec::mlp(16, &[96, 96], 5);
    let student_spec = NetworkSpec::mlp(16, &[16, 16], 5);
    println!(
        "teacher {} parameters, student {}",
        teacher_spec.param_count(),
        student_spec.param_count()
    );
    let cfg = MetaConfig {
        meta_steps: 150,
        val_every: 50,
        ..MetaConfig::default()
    };
    let student_init = init_params(&student_spec, 1)?;
    let teacher_init = init_params(&teacher_spec, 2)?;
    let opts = EvalOptions {
        n_episodes: 300,
        seed: 5,
        ..EvalOptions::default()
    };
    let test = dist.clone().with_split(Split::MetaTest);

    let student = Learner::student(student_spec.clone(), student_init.clone(), &cfg)?;
    let silent = KdConfig {
        weight: 0.0,
        ..KdConfig::default()
    };
    let mut maml = MetaTrainer::new(None, student, silent, Method::Maml, cfg.clone(), &dist, 0)?;
    maml.run()?;
    let (_, s) = maml.best_models();
    let baseline = evaluate(None, &s, &test, &cfg, &opts)?.named("student");

    let teacher = Learner::teacher(teacher_spec, teacher_init, &cfg)?;
    let student = Learner::student(student_spec, student_init, &cfg)?;
    let mut joint = MetaTrainer::new(
        Some(teacher),
        student,
        KdConfig::default(),
        Method::Maml,
        cfg.clone(),
        &dist,
        0,
    )?;
    joint.run()?;
    for r in joint.history.iter().filter(|r| r.val_acc.is_some()) {
        println!(
            "step {:>4}  validation accuracy {:.3}",
            r.step,
            r.val_acc.unwrap_or_default()
        );
    }
    let (t, s) = joint.best_models();
    let ours = evaluate(t.as_ref().map(|t| (t, &joint.kd)), &s, &test, &cfg, &opts)?.named("ours");

    print!(
        "{}",
        tsmd::eval::format_table(
            &[baseline.clone(), ours.clone()],
            &[paired_difference(&ours, &baseline)?]
        )
    );
    Ok(())
}
