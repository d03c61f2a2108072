//! The five subcommands behind the `tsmd` binary. Each writes into
//! `io.out_dir`: the resolved config, logs, checkpoints and reports.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::episodes::Split;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, format_table, pooled_paired_difference, write_csv, EvalReport, Inits, PairedDiff, Row, RowResult,
};
use crate::gradcheck::{run_suite, CheckOutcome};
use crate::meta::{derive_seed, Learner, MetaTrainer, Method, Pretrainer, TeacherMode, TrainRecord, Variant};
use crate::nets::{check_params, reset_head};

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub episodes: Option<usize>,
    pub first_order: bool,
    pub teacher_mode: Option<TeacherMode>,
    pub variant: Option<Variant>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.task.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.io.out_dir = o.clone();
        }
        if let Some(n) = self.episodes {
            cfg.eval.n_episodes = n;
        }
        if self.first_order {
            cfg.meta.first_order = true;
        }
        if let Some(m) = self.teacher_mode {
            cfg.meta.teacher_mode = m;
        }
        if let Some(v) = self.variant {
            cfg.meta.variant = v;
        }
        cfg.validate()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Creates the run directory and echoes the resolved config into it.
fn prepare(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.io.out_dir.clone();
    create_dir(&dir)?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.resolved_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Keeps the header and the first `keep` data rows of a CSV log, creating it
/// with `header` if missing, and opens it for appending.
fn open_log(path: &Path, header: &str, keep: usize) -> Result<File> {
    let io = |e| Error::io(path, e);
    let mut lines = Vec::new();
    if path.exists() {
        let f = File::open(path).map_err(io)?;
        for line in BufReader::new(f).lines().take(keep + 1) {
            lines.push(line.map_err(io)?);
        }
    }
    if lines.is_empty() {
        lines.push(header.to_string());
    }
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(io)?;
    OpenOptions::new().append(true).open(path).map_err(io)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Supervised teacher pretraining on the pooled meta-train classes.
///
/// `teacher.ckpt` is rewritten after every epoch (weights with the pooled
/// head, Adam state, epoch) and doubles as the resume point.
pub fn pretrain(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let dir = prepare(cfg)?;
    let dist = cfg.distribution()?;
    let seed = derive_seed(cfg.task.seed, 5);
    let mut p = Pretrainer::new(&cfg.teacher_spec()?, &dist.family, &cfg.teacher.pretrain, seed)?;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        p.restore(
            ck.require("teacher")?.clone(),
            ck.optim("teacher"),
            ck.require_u64("epoch")? as usize,
        )?;
    }
    let save = |p: &Pretrainer| -> Result<PathBuf> {
        let mut ck = Checkpoint::new();
        ck.set_group("teacher", p.params.clone());
        ck.set_optim("teacher", &p.optim);
        ck.set_u64("epoch", p.epoch as u64);
        ck.set_u64("seed", seed);
        ck.set_u64("config_hash", cfg.hash_u64()?);
        let path = dir.join("teacher.ckpt");
        ck.save(&path)?;
        Ok(path)
    };
    let mut log = open_log(&dir.join("pretrain_log.csv"), "epoch,loss,accuracy", p.epoch)?;
    let mut path = save(&p)?;
    while p.epoch < cfg.teacher.pretrain.epochs {
        let s = p.run_epoch()?;
        writeln!(log, "{},{:.6},{:.6}", s.epoch, s.loss, s.accuracy).map_err(|e| Error::io(&dir, e))?;
        println!("epoch {:>3}  loss {:.4}  accuracy {:.4}", s.epoch, s.loss, s.accuracy);
        path = save(&p)?;
    }
    Ok(path)
}

fn variant_shape(v: Variant) -> (bool, Method) {
    match v {
        Variant::Tsmd => (true, Method::Maml),
        Variant::MamlOnly => (false, Method::Maml),
        Variant::Reptile => (true, Method::Reptile),
    }
}

/// Initial teacher (head reset for `n_way`) and student for meta-training.
fn initial_learners(cfg: &ExperimentConfig) -> Result<(Learner, Learner)> {
    let (tspec, sspec) = (cfg.teacher_spec()?, cfg.student_spec()?);
    let mut comparison = cfg.comparison(cfg.task.seed)?;
    if cfg.io.teacher_checkpoint.is_some() {
        comparison.pretrain.epochs = 0;
    }
    let mut inits = Inits::new(&comparison, cfg.task.seed)?;
    if let Some(path) = &cfg.io.teacher_checkpoint {
        let ck = Checkpoint::load(path)?;
        inits.teacher = reset_head(&tspec, ck.require("teacher")?)?;
    }
    Ok((
        Learner::teacher(tspec, inits.teacher, &cfg.meta)?,
        Learner::student(sspec, inits.student, &cfg.meta)?,
    ))
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub steps: usize,
    pub best_val_acc: Option<f64>,
}

const METRICS_HEADER: &str = "step,student_loss,student_acc,teacher_loss,teacher_acc,val_acc";

fn metrics_row(r: &TrainRecord) -> String {
    format!(
        "{},{:.6},{:.6},{},{},{}",
        r.step,
        r.student_loss,
        r.student_acc,
        opt(r.teacher_loss),
        opt(r.teacher_acc),
        opt(r.val_acc)
    )
}

/// Meta-training with periodic validation. Writes `metrics.csv` (one row
/// per step), `last.ckpt` and `best.ckpt`. On a non-finite loss the last
/// good state is saved before the error is returned.
pub fn meta_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<MetaTrainOutcome> {
    let dir = prepare(cfg)?;
    let (has_teacher, method) = variant_shape(cfg.meta.variant);
    let (teacher, student) = initial_learners(cfg)?;
    let dist = cfg.distribution()?;
    let mut trainer = MetaTrainer::new(
        has_teacher.then_some(teacher),
        student,
        cfg.kd.clone(),
        method,
        cfg.meta.clone(),
        &dist,
        cfg.task.seed,
    )?;
    if let Some(path) = resume {
        trainer.restore(&Checkpoint::load(path)?)?;
    }
    let hash = cfg.hash_u64()?;
    let last = dir.join("last.ckpt");
    let save_last = |t: &MetaTrainer| -> Result<()> {
        let mut ck = t.to_checkpoint();
        ck.set_u64("config_hash", hash);
        ck.save(&last)
    };
    let metrics_path = dir.join("metrics.csv");
    let mut log = open_log(&metrics_path, METRICS_HEADER, trainer.step)?;
    while !trainer.done() {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                save_last(&trainer)?;
                return Err(e);
            }
        };
        writeln!(log, "{}", metrics_row(&record)).map_err(|e| Error::io(&metrics_path, e))?;
        if let Some(v) = record.val_acc {
            println!(
                "step {:>5}  train acc {:.4}  val acc {:.4}",
                record.step, record.student_acc, v
            );
        }
        if cfg.io.checkpoint_every > 0 && trainer.step % cfg.io.checkpoint_every == 0 {
            save_last(&trainer)?;
        }
    }
    save_last(&trainer)?;
    let (teacher, student) = trainer.best_models();
    let mut best = Checkpoint::new();
    if let Some(t) = &teacher {
        best.set_group("teacher", t.params.clone());
    }
    best.set_group("student", student.params.clone());
    best.set_u64(
        "meta_step",
        trainer.best.as_ref().map_or(trainer.step, |b| b.step) as u64,
    );
    best.set_u64("seed", cfg.task.seed);
    best.set_u64("config_hash", hash);
    let best_path = dir.join("best.ckpt");
    best.save(&best_path)?;
    Ok(MetaTrainOutcome {
        last,
        best: best_path,
        steps: trainer.step,
        best_val_acc: trainer.best.as_ref().map(|b| b.val_acc),
    })
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Tsmd => "tsmd",
        Variant::MamlOnly => "maml",
        Variant::Reptile => "reptile",
    }
}

/// Adapts the checkpointed student on meta-test episodes and writes a
/// one-row report to `io.out_dir/io.report`.
pub fn meta_test(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let dir = prepare(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (tspec, sspec) = (cfg.teacher_spec()?, cfg.student_spec()?);
    let student = Learner::student(sspec, ck.require("student")?.clone(), &cfg.meta)?;
    let (has_teacher, _) = variant_shape(cfg.meta.variant);
    let teacher = match ck.group("teacher") {
        Some(p) if has_teacher => {
            let p = if check_params(&tspec, p).is_ok() {
                p.clone()
            } else {
                reset_head(&tspec, p)?
            };
            Some(Learner::teacher(tspec, p, &cfg.meta)?)
        }
        _ => None,
    };
    let test = cfg.distribution()?.with_split(Split::MetaTest);
    let report = evaluate(
        teacher.as_ref().map(|t| (t, &cfg.kd)),
        &student,
        &test,
        &cfg.meta,
        &cfg.eval_options(cfg.task.seed),
    )?
    .named(variant_name(cfg.meta.variant));
    write_csv(dir.join(&cfg.io.report), [&report])?;
    print!("{}", format_table(std::slice::from_ref(&report), &[]));
    Ok(report)
}

/// Pairs reported by `compare`, when both rows are present.
pub const PAIRS: [(Row, Row); 8] = [
    (Row::Ours, Row::Student),
    (Row::Oracle, Row::Student),
    (Row::FixedTeacher, Row::Student),
    (Row::Oracle, Row::Ours),
    (Row::Ours, Row::FixedTeacher),
    (Row::ReptileOurs, Row::ReptileStudent),
    (Row::ReptileFixedTeacher, Row::ReptileStudent),
    (Row::ReptileOurs, Row::ReptileFixedTeacher),
];

#[derive(Clone, Debug)]
pub struct ComparisonOutcome {
    /// One entry per seed, rows in config order.
    pub runs: Vec<Vec<RowResult>>,
    /// Per-row reports pooled over seeds.
    pub pooled: Vec<EvalReport>,
    pub diffs: Vec<PairedDiff>,
}

impl ComparisonOutcome {
    pub fn pooled(&self, row: Row) -> Option<&EvalReport> {
        self.pooled.iter().find(|r| r.variant == row.name())
    }

    pub fn diff(&self, a: Row, b: Row) -> Option<&PairedDiff> {
        self.diffs.iter().find(|d| d.a == a.name() && d.b == b.name())
    }
}

/// Concatenates one row's reports over seeds.
fn pool(reports: &[&EvalReport], cfg: &ExperimentConfig) -> Result<EvalReport> {
    let accs: Vec<f64> = reports.iter().flat_map(|r| r.accuracies.iter().copied()).collect();
    let first = reports[0];
    let opts = cfg.eval_options(first.seed);
    let interval = match opts.ci {
        crate::eval::CiMethod::Normal => crate::eval::ci95_normal(&accs)?,
        crate::eval::CiMethod::Bootstrap => {
            crate::eval::ci95_bootstrap(&accs, opts.bootstrap_resamples, derive_seed(first.seed, 7))?
        }
    };
    Ok(EvalReport {
        n_episodes: accs.len(),
        mean: crate::eval::mean(&accs),
        ci95: interval,
        accuracies: accs,
        stream_hash: reports
            .iter()
            .map(|r| r.stream_hash.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        seconds: reports.iter().map(|r| r.seconds).sum(),
        ..first.clone()
    })
}

/// Trains and evaluates every configured row for `eval.seeds` seeds, writes
/// all per-seed reports to the report CSV and prints the pooled table.
pub fn compare(cfg: &ExperimentConfig) -> Result<ComparisonOutcome> {
    let dir = prepare(cfg)?;
    let mut runs = Vec::with_capacity(cfg.eval.seeds);
    for k in 0..cfg.eval.seeds as u64 {
        let seed = cfg.task.seed + k;
        let results = crate::eval::run_comparison(&cfg.comparison(seed)?, seed)?;
        for r in &results {
            println!(
                "seed {seed}  {:<22} {:.4} ± {:.4}",
                r.report.variant, r.report.mean, r.report.ci95
            );
        }
        runs.push(results);
    }
    let reports: Vec<&EvalReport> = runs.iter().flatten().map(|r| &r.report).collect();
    write_csv(dir.join(&cfg.io.report), reports.iter().copied())?;

    let per_row = |row: Row| -> Vec<&EvalReport> {
        runs.iter()
            .flatten()
            .filter(|r| r.row == row)
            .map(|r| &r.report)
            .collect()
    };
    let pooled = cfg
        .eval
        .rows
        .iter()
        .map(|&row| pool(&per_row(row), cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut diffs = Vec::new();
    for (a, b) in PAIRS {
        let (ra, rb) = (per_row(a), per_row(b));
        if ra.is_empty() || rb.is_empty() {
            continue;
        }
        let pairs: Vec<(&EvalReport, &EvalReport)> = ra.into_iter().zip(rb).collect();
        diffs.push(pooled_paired_difference(&pairs, cfg.eval.ci)?);
    }
    print!("{}", format_table(&pooled, &diffs));
    let summary = dir.join("comparison.json");
    let json = serde_json::json!({ "pooled": pooled.iter().map(|r| serde_json::json!({
        "variant": r.variant, "mean": r.mean, "ci95": r.ci95, "n_episodes": r.n_episodes })).collect::<Vec<_>>(),
        "diffs": diffs });
    fs::write(&summary, serde_json::to_string_pretty(&json).expect("json values"))
        .map_err(|e| Error::io(&summary, e))?;
    Ok(ComparisonOutcome { runs, pooled, diffs })
}

/// Runs the finite-difference suite and prints one line per check.
pub fn gradcheck() -> Result<Vec<CheckOutcome>> {
    let outcomes = run_suite()?;
    for o in &outcomes {
        println!(
            "{:<4} {:<36} max rel err {:.2e}  (tol {:.0e}, {} coords)",
            if o.passed { "ok" } else { "FAIL" },
            o.name,
            o.max_rel_err,
            o.tol,
            o.coordinates
        );
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::invalid(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(outcomes)
}
