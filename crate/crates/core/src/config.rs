//! Experiment configuration, read from TOML.
//!
//! ```toml
//! [task]
//! n_way = 5
//! k_shot = 1
//! seed = 0
//! [task.family]
//! kind = "blobs"
//! d_input = 32
//!
//! [teacher]            # arch defaults to NetworkSpec::default_teacher
//! [teacher.pretrain]
//! epochs = 0
//! [student]
//! [meta]
//! beta = 1e-3
//! [kd]
//! [eval]
//! n_episodes = 800
//! [io]
//! out_dir = "runs/demo"
//! ```
//!
//! Every field has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::{FamilyConfig, TaskDistribution};
use crate::error::{Error, Result};
use crate::eval::{CiMethod, ComparisonConfig, EvalOptions, Row, VariantConfig};
use crate::losses::KdConfig;
use crate::meta::{derive_seed, MetaConfig, PretrainConfig};
use crate::nets::{Architecture, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Master seed; every other seed of a run is derived from it.
    pub seed: u64,
    pub family: FamilyConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_way: 5,
            k_shot: 1,
            q_queries: 15,
            seed: 0,
            family: FamilyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Unset means the family's default teacher.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Architecture>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_layer: Option<usize>,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    /// Unset means the family's default student.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<Architecture>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub ci: CiMethod,
    pub bootstrap_resamples: usize,
    /// Rows trained by `compare`.
    pub rows: Vec<Row>,
    /// `compare` repeats the experiment for seeds `seed, seed + 1, ...`.
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_episodes: 800,
            ci: CiMethod::Normal,
            bootstrap_resamples: 2000,
            rows: Row::TABLE.to_vec(),
            seeds: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Report file name inside `out_dir`.
    pub report: String,
    /// Pretrained teacher checkpoint for meta-training; pretrained in place
    /// when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Save `last.ckpt` every this many meta-steps (and at the end).
    pub checkpoint_every: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            out_dir: PathBuf::from("runs/default"),
            report: "report.csv".into(),
            teacher_checkpoint: None,
            checkpoint_every: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub meta: MetaConfig,
    pub kd: KdConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The config with architecture defaults filled in, as TOML.
    pub fn resolved_toml(&self) -> Result<String> {
        let mut cfg = self.clone();
        let (t, s) = (self.teacher_spec()?, self.student_spec()?);
        cfg.teacher.arch = Some(t.arch);
        cfg.student.arch = Some(s.arch);
        toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short hash of the resolved config, ignoring the `io` section.
    pub fn hash(&self) -> Result<String> {
        let cfg = ExperimentConfig {
            io: IoConfig::default(),
            ..self.clone()
        };
        let digest = Sha256::digest(cfg.resolved_toml()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn hash_u64(&self) -> Result<u64> {
        u64::from_str_radix(&self.hash()?, 16).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.kd.validate()?;
        if self.eval.n_episodes < 2 {
            return Err(Error::Config("eval.n_episodes must be >= 2".into()));
        }
        if self.eval.seeds == 0 || self.eval.rows.is_empty() {
            return Err(Error::Config("eval needs at least one seed and one row".into()));
        }
        Ok(())
    }

    pub fn distribution(&self) -> Result<TaskDistribution> {
        let t = &self.task;
        let dist = TaskDistribution::new(t.family.build()?).with_shape(t.n_way, t.k_shot, t.q_queries);
        dist.validate()?;
        Ok(dist)
    }

    fn input_shape(&self) -> Result<Vec<usize>> {
        Ok(match &self.task.family {
            FamilyConfig::Blobs(p) => vec![p.d_input],
            FamilyConfig::Patterns(p) => vec![1, p.image_size, p.image_size],
            FamilyConfig::File { .. } => self.distribution()?.input_shape(),
        })
    }

    fn spec(&self, arch: &Option<Architecture>, layer: Option<usize>, default: NetworkSpec) -> Result<NetworkSpec> {
        let spec = NetworkSpec {
            arch: arch.clone().unwrap_or(default.arch),
            embedding_layer: layer,
            ..default
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher_spec(&self) -> Result<NetworkSpec> {
        let default = NetworkSpec::default_teacher(&self.input_shape()?, self.task.n_way);
        self.spec(&self.teacher.arch, self.teacher.embedding_layer, default)
    }

    pub fn student_spec(&self) -> Result<NetworkSpec> {
        let default = NetworkSpec::default_student(&self.input_shape()?, self.task.n_way);
        self.spec(&self.student.arch, self.student.embedding_layer, default)
    }

    /// Options for evaluating runs trained with `seed`.
    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            n_episodes: self.eval.n_episodes,
            seed: derive_seed(seed, 3),
            ci: self.eval.ci,
            bootstrap_resamples: self.eval.bootstrap_resamples,
        }
    }

    pub fn comparison(&self, seed: u64) -> Result<ComparisonConfig> {
        Ok(ComparisonConfig {
            dist: self.distribution()?,
            teacher: self.teacher_spec()?,
            student: self.student_spec()?,
            pretrain: self.teacher.pretrain.clone(),
            variants: self
                .eval
                .rows
                .iter()
                .map(|&r| VariantConfig::standard(r, &self.meta, &self.kd))
                .collect(),
            eval: self.eval_options(seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::BlobsParams;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.eval.n_episodes, 800);
        assert_eq!(cfg.task.family, FamilyConfig::Blobs(BlobsParams::default()));
        let t = cfg.teacher_spec().unwrap();
        let s = cfg.student_spec().unwrap();
        assert!(t.param_count() >= 10 * s.param_count());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            "[task]\nn_wya = 5",
            "[meta]\nalpa = 0.1",
            "[bogus]\nx = 1",
            "[task.family]\nkind = \"blobs\"\nsigmaa = 1.0",
            "[kd]\nkind = \"nope\"",
        ] {
            let err = ExperimentConfig::from_toml(doc).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{doc}: {err:?}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let doc = r#"
            [task]
            n_way = 3
            seed = 9
            [task.family]
            kind = "patterns"
            image_size = 12
            [student]
            arch = { kind = "conv", channels = [4, 4], kernel = 3 }
            [meta]
            inner_steps = 2
            first_order = true
            teacher_mode = "fixed"
            [meta.optimizer]
            kind = "sgd"
            [kd]
            kind = "rkd_distance"
            [eval]
            rows = ["student", "ours"]
            ci = "bootstrap"
        "#;
        let cfg = ExperimentConfig::from_toml(doc).unwrap();
        assert_eq!(cfg.task.n_way, 3);
        assert!(cfg.meta.first_order);
        let text = cfg.resolved_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.resolved_toml().unwrap(), text);
        assert_eq!(back.teacher_spec().unwrap(), cfg.teacher_spec().unwrap());
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_ne!(ExperimentConfig::default().hash().unwrap(), cfg.hash().unwrap());
        let moved = ExperimentConfig {
            io: IoConfig {
                out_dir: "elsewhere".into(),
                ..IoConfig::default()
            },
            ..cfg.clone()
        };
        assert_eq!(moved.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[meta]\nalpha = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("[eval]\nn_episodes = 1").is_err());
        assert!(ExperimentConfig::from_toml("[kd]\ntemperature = 0.0").is_err());
    }
}
