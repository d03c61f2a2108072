//! Checkpointed meta-training: stop after a few steps, resume from
//! `last.ckpt`, and get exactly the parameters of an uninterrupted run.

use tsmd::checkpoint::Checkpoint;
use tsmd::commands::meta_train;
use tsmd::config::ExperimentConfig;

const CONFIG: &str = r#"
[task]
n_way = 3
[task.family]
kind = "blobs"
d_input = 8
n_classes = 30
[teacher]
arch = { kind = "mlp", hidden = [32] }
[teacher.pretrain]
epochs = 1
[student]
arch = { kind = "mlp", hidden = [8] }
[meta]
meta_steps = 20
val_every = 5
val_episodes = 20
[io]
checkpoint_every = 5
"#;

fn main() -> tsmd::Result<()> {
    let root = std::env::temp_dir().join("tsmd-resume-example");
    let mut cfg = ExperimentConfig::from_toml(CONFIG)?;

    cfg.io.out_dir = root.join("uninterrupted");
    let whole = meta_train(&cfg, None)?;

    cfg.io.out_dir = root.join("interrupted");
    let mut short = cfg.clone();
    short.meta.meta_steps = 8;
    let stopped = meta_train(&short, None)?;
    println!("stopped after {} steps", stopped.steps);
    let resumed = meta_train(&cfg, Some(&stopped.last))?;
    println!("resumed to {} steps", resumed.steps);

    let a = Checkpoint::load(&whole.last)?;
    let b = Checkpoint::load(&resumed.last)?;
    let same = a.group_names().all(|g| match (a.group(g), b.group(g)) {
        (Some(x), Some(y)) => x.bits_eq(y),
        _ => false,
    });
    println!("bit-identical to the uninterrupted run: {same}");
    Ok(())
}
