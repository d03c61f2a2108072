//! A scaled-down run of the comparison table from `configs/table.toml`:
//! student, fixed teacher, jointly trained student and teacher-as-student.
//!
//! Pass a config path to run another experiment.

use tsmd::config::ExperimentConfig;

fn main() -> tsmd::Result<()> {
    let mut cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut cfg = ExperimentConfig::from_toml(include_str!("../../../configs/table.toml"))?;
            cfg.meta.meta_steps = 60;
            cfg.eval.n_episodes = 200;
            cfg.eval.seeds = 1;
            cfg
        }
    };
    cfg.io.out_dir = std::env::temp_dir().join("tsmd-compare-example");
    let out = tsmd::commands::compare(&cfg)?;
    println!("\nreport written to {}", cfg.io.out_dir.join(&cfg.io.report).display());
    for d in out.diffs.iter().filter(|d| d.significant()) {
        println!("significant: {} - {} = {:+.4}", d.a, d.b, d.mean);
    }
    Ok(())
}
