//! Meta-test evaluation: per-episode accuracies, 95% confidence intervals,
//! paired differences, and the Student / Fixed teacher / Ours / Oracle
//! comparison trained and tested on one shared episode stream.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::{stream_rng, Split, TaskDistribution};
use crate::error::{Error, Result};
use crate::losses::{KdConfig, KdKind};
use crate::meta::{
    derive_seed, pretrain_teacher, test_episode, Learner, MetaConfig, MetaTrainer, Method, PretrainConfig, TeacherMode,
    TrainRecord,
};
use crate::nets::{init_params, reset_head, NetworkSpec};
use crate::params::ParamSet;

const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// `1.96 · sd / sqrt(n)`.
    #[default]
    Normal,
    /// Half the width of the 2.5–97.5 percentile interval of resampled means.
    Bootstrap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub n_episodes: usize,
    /// Seed of the test episode stream.
    pub seed: u64,
    pub ci: CiMethod,
    pub bootstrap_resamples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_episodes: 800,
            seed: 0,
            ci: CiMethod::Normal,
            bootstrap_resamples: 2000,
        }
    }
}

impl EvalOptions {
    fn interval(&self, xs: &[f64]) -> Result<f64> {
        match self.ci {
            CiMethod::Normal => ci95_normal(xs),
            CiMethod::Bootstrap => ci95_bootstrap(xs, self.bootstrap_resamples, derive_seed(self.seed, 7)),
        }
    }
}

fn check_len(xs: &[f64]) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::invalid(format!(
            "a confidence interval needs at least 2 values, got {}",
            xs.len()
        )));
    }
    Ok(())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Normal-approximation half-width using the sample standard deviation.
pub fn ci95_normal(xs: &[f64]) -> Result<f64> {
    check_len(xs)?;
    if xs.iter().all(|&x| x == xs[0]) {
        return Ok(0.0);
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    Ok(Z95 * var.sqrt() / (xs.len() as f64).sqrt())
}

/// Percentile-bootstrap half-width.
pub fn ci95_bootstrap(xs: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    check_len(xs)?;
    if resamples < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 resamples"));
    }
    let mut rng = stream_rng(seed, 0);
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((at(0.975) - at(0.025)) / 2.0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short hash of everything that determines a variant's behaviour.
pub fn config_hash(cfg: &MetaConfig, kd: &KdConfig, dist: &TaskDistribution) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("plain struct"));
    h.update(serde_json::to_vec(kd).expect("plain struct"));
    h.update(dist.fingerprint());
    hex(&h.finalize()[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub n_episodes: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub config_hash: String,
    /// Hash of the fingerprints of every test episode, in order.
    pub stream_hash: String,
    pub seconds: f64,
}

impl EvalReport {
    pub fn named(mut self, variant: impl Into<String>) -> Self {
        self.variant = variant.into();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("eval report: {e}")))
    }
}

/// Adapts on `opts.n_episodes` meta-test episodes and scores the student on
/// each query set.
pub fn evaluate(
    teacher: Option<(&Learner, &KdConfig)>,
    student: &Learner,
    dist: &TaskDistribution,
    cfg: &MetaConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if dist.split != Split::MetaTest {
        return Err(Error::invalid(format!(
            "evaluation needs the meta-test split, got {:?}",
            dist.split
        )));
    }
    check_len(&vec![0.0; opts.n_episodes])?;
    let start = Instant::now();
    let per_episode = (0..opts.n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = dist.episode(opts.seed, i)?;
            Ok((test_episode(teacher, student, &ep, cfg)?.accuracy, ep.fingerprint()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut h = Sha256::new();
    for (_, f) in &per_episode {
        h.update(f);
    }
    let accuracies: Vec<f64> = per_episode.into_iter().map(|(a, _)| a).collect();
    let kd = teacher.map(|(_, kd)| kd.clone()).unwrap_or(KdConfig {
        weight: 0.0,
        ..KdConfig::default()
    });
    Ok(EvalReport {
        variant: String::new(),
        n_way: dist.n_way,
        k_shot: dist.k_shot,
        seed: opts.seed,
        n_episodes: opts.n_episodes,
        mean: mean(&accuracies),
        ci95: opts.interval(&accuracies)?,
        accuracies,
        config_hash: config_hash(cfg, &kd, dist),
        stream_hash: hex(&h.finalize()),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub a: String,
    pub b: String,
    pub n: usize,
    /// Mean of `a − b` per episode.
    pub mean: f64,
    pub ci95: f64,
}

impl PairedDiff {
    /// Whether the interval lies strictly above zero.
    pub fn significant(&self) -> bool {
        self.mean - self.ci95 > 0.0
    }
}

/// Paired difference `a − b` pooled over several (a, b) report pairs, each
/// pair evaluated on the same episode stream.
pub fn pooled_paired_difference(pairs: &[(&EvalReport, &EvalReport)], ci: CiMethod) -> Result<PairedDiff> {
    let mut diffs = Vec::new();
    for (a, b) in pairs {
        if a.stream_hash != b.stream_hash || a.accuracies.len() != b.accuracies.len() {
            return Err(Error::invalid(format!(
                "{} and {} were evaluated on different episode streams",
                a.variant, b.variant
            )));
        }
        diffs.extend(a.accuracies.iter().zip(&b.accuracies).map(|(x, y)| x - y));
    }
    let (a, b) = pairs.first().ok_or_else(|| Error::invalid("no report pairs"))?;
    let opts = EvalOptions {
        ci,
        seed: a.seed,
        ..EvalOptions::default()
    };
    Ok(PairedDiff {
        a: a.variant.clone(),
        b: b.variant.clone(),
        n: diffs.len(),
        mean: mean(&diffs),
        ci95: opts.interval(&diffs)?,
    })
}

pub fn paired_difference(a: &EvalReport, b: &EvalReport) -> Result<PairedDiff> {
    pooled_paired_difference(&[(a, b)], CiMethod::Normal)
}

/// Rows of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Row {
    /// MAML on the student alone.
    Student,
    /// Frozen pretrained teacher guiding the student through RKD.
    FixedTeacher,
    /// Jointly meta-trained teacher and student.
    Ours,
    /// MAML on the teacher network.
    Oracle,
    ReptileStudent,
    ReptileFixedTeacher,
    ReptileOurs,
}

impl Row {
    pub fn name(self) -> &'static str {
        match self {
            Row::Student => "student",
            Row::FixedTeacher => "fixed_teacher",
            Row::Ours => "ours",
            Row::Oracle => "oracle",
            Row::ReptileStudent => "reptile_student",
            Row::ReptileFixedTeacher => "reptile_fixed_teacher",
            Row::ReptileOurs => "reptile_ours",
        }
    }

    pub fn method(self) -> Method {
        match self {
            Row::ReptileStudent | Row::ReptileFixedTeacher | Row::ReptileOurs => Method::Reptile,
            _ => Method::Maml,
        }
    }

    pub fn uses_teacher(self) -> bool {
        !matches!(self, Row::Student | Row::Oracle | Row::ReptileStudent)
    }

    pub fn fixed(self) -> bool {
        matches!(self, Row::FixedTeacher | Row::ReptileFixedTeacher)
    }

    pub const TABLE: [Row; 4] = [Row::Student, Row::FixedTeacher, Row::Ours, Row::Oracle];
    pub const REPTILE: [Row; 3] = [Row::ReptileStudent, Row::ReptileFixedTeacher, Row::ReptileOurs];
}

/// One row's training configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    pub row: Row,
    pub meta: MetaConfig,
    pub kd: KdConfig,
}

impl VariantConfig {
    /// Fixed-teacher rows freeze the teacher and distill with RKD (the
    /// default RKD loss when `kd` is KL); the others use `kd` as given.
    pub fn standard(row: Row, meta: &MetaConfig, kd: &KdConfig) -> Self {
        let mut meta = meta.clone();
        let mut kd = kd.clone();
        if row.fixed() {
            meta.teacher_mode = TeacherMode::Fixed;
            if kd.kind == KdKind::Kl {
                kd = KdConfig {
                    weight: kd.weight,
                    ..KdConfig::rkd()
                };
            }
        }
        VariantConfig { row, meta, kd }
    }
}

#[derive(Clone, Debug)]
pub struct ComparisonConfig {
    /// Task distribution; its split is ignored.
    pub dist: TaskDistribution,
    pub teacher: NetworkSpec,
    pub student: NetworkSpec,
    pub pretrain: PretrainConfig,
    pub variants: Vec<VariantConfig>,
    pub eval: EvalOptions,
}

impl ComparisonConfig {
    pub fn standard(
        dist: TaskDistribution,
        teacher: NetworkSpec,
        student: NetworkSpec,
        rows: &[Row],
        meta: &MetaConfig,
        kd: &KdConfig,
    ) -> Self {
        ComparisonConfig {
            dist,
            teacher,
            student,
            pretrain: PretrainConfig::default(),
            variants: rows.iter().map(|&r| VariantConfig::standard(r, meta, kd)).collect(),
            eval: EvalOptions::default(),
        }
    }
}

/// Initial weights shared by every row of a comparison.
#[derive(Clone, Debug)]
pub struct Inits {
    /// Pretrained teacher with a fresh head.
    pub teacher: ParamSet,
    pub student: ParamSet,
}

impl Inits {
    pub fn new(cfg: &ComparisonConfig, seed: u64) -> Result<Self> {
        let (pre, _) = pretrain_teacher(&cfg.teacher, &cfg.dist.family, &cfg.pretrain, derive_seed(seed, 5))?;
        Ok(Inits {
            teacher: reset_head(&cfg.teacher, &pre)?,
            student: init_params(&cfg.student, derive_seed(seed, 4))?,
        })
    }
}

/// A trained row and its test report.
#[derive(Clone, Debug)]
pub struct RowResult {
    pub row: Row,
    pub report: EvalReport,
    pub history: Vec<TrainRecord>,
    pub teacher: Option<Learner>,
    pub student: Learner,
}

/// Meta-trains one row from the shared initialisation.
pub fn train_row(cfg: &ComparisonConfig, v: &VariantConfig, inits: &Inits, seed: u64) -> Result<MetaTrainer> {
    let teacher = Learner::teacher(cfg.teacher.clone(), inits.teacher.clone(), &v.meta)?;
    let (teacher, student) = match v.row {
        Row::Oracle => (None, teacher),
        r if r.uses_teacher() => (
            Some(teacher),
            Learner::student(cfg.student.clone(), inits.student.clone(), &v.meta)?,
        ),
        _ => (
            None,
            Learner::student(cfg.student.clone(), inits.student.clone(), &v.meta)?,
        ),
    };
    let mut trainer = MetaTrainer::new(
        teacher,
        student,
        v.kd.clone(),
        v.row.method(),
        v.meta.clone(),
        &cfg.dist,
        seed,
    )?;
    trainer.run()?;
    Ok(trainer)
}

/// Trains every row with training seed `seed` and evaluates all of them on
/// the same meta-test episodes.
pub fn run_comparison(cfg: &ComparisonConfig, seed: u64) -> Result<Vec<RowResult>> {
    let inits = Inits::new(cfg, seed)?;
    let test = cfg.dist.clone().with_split(Split::MetaTest);
    let mut out = Vec::with_capacity(cfg.variants.len());
    for v in &cfg.variants {
        let trainer = train_row(cfg, v, &inits, seed)?;
        let (teacher, student) = trainer.best_models();
        let report = evaluate(
            teacher.as_ref().map(|t| (t, &v.kd)),
            &student,
            &test,
            &v.meta,
            &cfg.eval,
        )?
        .named(v.row.name());
        out.push(RowResult {
            row: v.row,
            report,
            history: trainer.history,
            teacher,
            student,
        });
    }
    if let Some(first) = out.first() {
        for r in &out[1..] {
            if r.report.stream_hash != first.report.stream_hash {
                return Err(Error::invalid("comparison rows saw different test episodes"));
            }
        }
    }
    Ok(out)
}

/// Writes reports with the header
/// `variant,n_way,k_shot,mean_acc,ci95,n_episodes,seed,config_hash`.
pub fn write_csv<'a>(path: impl AsRef<Path>, reports: impl IntoIterator<Item = &'a EvalReport>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Config(format!("csv: {other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record([
        "variant",
        "n_way",
        "k_shot",
        "mean_acc",
        "ci95",
        "n_episodes",
        "seed",
        "config_hash",
    ])
    .map_err(io)?;
    for r in reports {
        w.write_record([
            r.variant.clone(),
            r.n_way.to_string(),
            r.k_shot.to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.ci95),
            r.n_episodes.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Human-readable table of accuracies (in percent) and paired differences.
pub fn format_table(reports: &[EvalReport], diffs: &[PairedDiff]) -> String {
    let mut s = String::new();
    let width = reports.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let _ = writeln!(s, "{:width$}  {:>15}  {:>8}", "variant", "accuracy (%)", "episodes");
    for r in reports {
        let _ = writeln!(
            s,
            "{:width$}  {:>7.2} ± {:<5.2}  {:>8}",
            r.variant,
            100.0 * r.mean,
            100.0 * r.ci95,
            r.n_episodes
        );
    }
    if !diffs.is_empty() {
        let _ = writeln!(s);
        for d in diffs {
            let _ = writeln!(
                s,
                "{} − {}: {:+.2} ± {:.2} (n = {}){}",
                d.a,
                d.b,
                100.0 * d.mean,
                100.0 * d.ci95,
                d.n,
                if d.significant() { " *" } else { "" }
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::blobs_family;

    #[test]
    fn constant_accuracies_have_zero_width() {
        let xs = vec![1.0; 10];
        assert_eq!(mean(&xs), 1.0);
        assert_eq!(ci95_normal(&xs).unwrap(), 0.0);
        assert_eq!(ci95_bootstrap(&xs, 100, 0).unwrap(), 0.0);
        let xs = vec![0.1; 3];
        assert_eq!(ci95_normal(&xs).unwrap(), 0.0);
    }

    #[test]
    fn two_point_fixture() {
        // sd of {0, 1} is 1/sqrt(2); 1.96 · 0.7071 / 1.4142 = 0.98.
        let ci = ci95_normal(&[0.0, 1.0]).unwrap();
        assert!((ci - 0.98).abs() < 1e-12, "{ci}");
        assert!(ci95_normal(&[0.5]).is_err());
        assert!(ci95_normal(&[]).is_err());
    }

    #[test]
    fn bootstrap_agrees_with_normal_for_large_n() {
        let xs: Vec<f64> = (0..400).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let a = ci95_normal(&xs).unwrap();
        let b = ci95_bootstrap(&xs, 4000, 3).unwrap();
        assert!((a - b).abs() / a < 0.1, "{a} {b}");
    }

    fn tiny_setup() -> (TaskDistribution, Learner, MetaConfig) {
        let dist = blobs_family(6, 30, 1.0, 0.3)
            .unwrap()
            .with_shape(3, 1, 2)
            .with_split(Split::MetaTest);
        let spec = NetworkSpec::mlp(6, &[8], 3);
        let cfg = MetaConfig {
            inner_steps: 1,
            ..MetaConfig::default()
        };
        let s = Learner::student(spec.clone(), init_params(&spec, 0).unwrap(), &cfg).unwrap();
        (dist, s, cfg)
    }

    #[test]
    fn report_mean_is_the_stored_mean_and_round_trips() {
        let (dist, s, cfg) = tiny_setup();
        let opts = EvalOptions {
            n_episodes: 20,
            ..EvalOptions::default()
        };
        let r = evaluate(None, &s, &dist, &cfg, &opts).unwrap().named("student");
        assert_eq!(r.mean, r.accuracies.iter().sum::<f64>() / 20.0);
        assert!((0.0..=1.0).contains(&r.mean) && r.ci95 >= 0.0);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let again = evaluate(None, &s, &dist, &cfg, &opts).unwrap().named("student");
        assert_eq!(again.accuracies, r.accuracies);
        assert_eq!(again.stream_hash, r.stream_hash);
        assert_eq!(again.config_hash, r.config_hash);
    }

    #[test]
    fn evaluation_contracts() {
        let (dist, s, cfg) = tiny_setup();
        let opts = EvalOptions {
            n_episodes: 1,
            ..EvalOptions::default()
        };
        assert!(evaluate(None, &s, &dist, &cfg, &opts).is_err());
        let opts = EvalOptions::default();
        assert_eq!(opts.n_episodes, 800);
        assert!(evaluate(None, &s, &dist.clone().with_split(Split::MetaTrain), &cfg, &opts).is_err());
    }

    #[test]
    fn paired_differences_need_the_same_stream() {
        let (dist, s, cfg) = tiny_setup();
        let opts = EvalOptions {
            n_episodes: 10,
            ..EvalOptions::default()
        };
        let a = evaluate(None, &s, &dist, &cfg, &opts).unwrap();
        let d = paired_difference(&a, &a).unwrap();
        assert_eq!((d.mean, d.ci95, d.n), (0.0, 0.0, 10));
        let other = EvalOptions { seed: 1, ..opts };
        let b = evaluate(None, &s, &dist, &cfg, &other).unwrap();
        assert!(paired_difference(&a, &b).is_err());
    }

    #[test]
    fn csv_layout() {
        let (dist, s, cfg) = tiny_setup();
        let opts = EvalOptions {
            n_episodes: 4,
            ..EvalOptions::default()
        };
        let r = evaluate(None, &s, &dist, &cfg, &opts).unwrap().named("student");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_csv(&path, [&r, &r]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "variant,n_way,k_shot,mean_acc,ci95,n_episodes,seed,config_hash"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("student,3,1,"));
        assert!(format_table(&[r], &[]).contains("student"));
    }

    #[test]
    fn fixed_rows_distill_with_rkd() {
        let meta = MetaConfig::default();
        let kl = KdConfig {
            weight: 3.0,
            ..KdConfig::default()
        };
        let v = VariantConfig::standard(Row::FixedTeacher, &meta, &kl);
        assert_eq!(v.meta.teacher_mode, TeacherMode::Fixed);
        assert_eq!((v.kd.kind, v.kd.weight), (KdKind::RkdDistance, 3.0));
        let with_angle = KdConfig {
            kind: KdKind::RkdDistanceAngle,
            ..KdConfig::rkd()
        };
        assert_eq!(
            VariantConfig::standard(Row::ReptileFixedTeacher, &meta, &with_angle).kd,
            with_angle
        );
        let ours = VariantConfig::standard(Row::Ours, &meta, &kl);
        assert_eq!((ours.kd, ours.meta), (kl, meta));
    }
}
