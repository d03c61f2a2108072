//! A pretrained, frozen teacher guiding the student through the RKD loss.
//! The teacher is never updated, in the inner loop or the outer loop.

use tsmd::episodes::blobs_family;
use tsmd::losses::KdConfig;
use tsmd::meta::{pretrain_teacher, Learner, MetaConfig, MetaTrainer, Method, PretrainConfig, TeacherMode};
use tsmd::nets::{init_params, reset_head, NetworkSpec};

fn main() -> tsmd::Result<()> {
    let dist = blobs_family(16, 60, 1.0, 0.8)?.with_shape(5, 1, 10);
    let teacher_spec = NetworkSpec::mlp(16, &[96, 96], 5);
    let student_spec = NetworkSpec::mlp(16, &[16, 16], 5);

    let pretrain = PretrainConfig {
        epochs: 3,
        ..PretrainConfig::default()
    };
    let (pooled, stats) = pretrain_teacher(&teacher_spec, &dist.family, &pretrain, 3)?;
    for s in &stats {
        println!(
            "pretrain epoch {}  loss {:.4}  accuracy {:.3}",
            s.epoch, s.loss, s.accuracy
        );
    }
    // The pretrained head covers every meta-train class; replace it with a
    // fresh 5-way head.
    let teacher_params = reset_head(&teacher_spec, &pooled)?;

    let cfg = MetaConfig {
        teacher_mode: TeacherMode::Fixed,
        meta_steps: 100,
        val_every: 25,
        ..MetaConfig::default()
    };
    let teacher = Learner::teacher(teacher_spec, teacher_params.clone(), &cfg)?;
    let student = Learner::student(student_spec.clone(), init_params(&student_spec, 1)?, &cfg)?;
    let mut trainer = MetaTrainer::new(Some(teacher), student, KdConfig::rkd(), Method::Maml, cfg, &dist, 0)?;
    trainer.run()?;

    let last = trainer.history.last().expect("at least one step");
    println!("student query accuracy at step {}: {:.3}", last.step, last.student_acc);
    let unchanged = trainer.teacher.as_ref().map(|t| t.params.bits_eq(&teacher_params));
    println!("teacher bit-identical after training: {unchanged:?}");
    Ok(())
}
