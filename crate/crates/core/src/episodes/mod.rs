//! Task distributions and N-way K-shot episode sampling.
//!
//! Classes are split into disjoint meta-train / meta-val / meta-test pools.
//! An episode draws `n_way` classes from one pool, assigns them episode-local
//! labels in random order, and draws `k_shot` support and `q_queries` query
//! examples per class.
//!
//! ```
//! use tsmd::episodes::{blobs_family, Split};
//!
//! let dist = blobs_family(16, 40, 2.0, 0.3).unwrap().with_split(Split::MetaTest);
//! let ep = dist.episode(7, 0).unwrap();
//! assert_eq!(ep.support_x.shape(), &[5, 16]);
//! assert_eq!(ep.query_y.len(), 75);
//! assert_eq!(ep, dist.episode(7, 0).unwrap());
//! ```

mod blobs;
mod file;
mod patterns;

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use blobs::{Blobs, BlobsParams};
pub use file::Dataset;
pub use patterns::{Patterns, PatternsParams, MAX_GLYPHS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        Split::ALL.get(tag as usize).copied()
    }
}

/// 64% / 16% / 20% of `n_classes` in class-id order, every pool non-empty.
pub fn default_splits(n_classes: usize) -> Result<Vec<Split>> {
    if n_classes < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 classes to split, got {n_classes}"
        )));
    }
    let n_val = ((n_classes as f64 * 0.16).round() as usize).max(1);
    let n_train = ((n_classes as f64 * 0.64).round() as usize).clamp(1, n_classes - n_val - 1);
    Ok((0..n_classes)
        .map(|c| match c {
            c if c < n_train => Split::MetaTrain,
            c if c < n_train + n_val => Split::MetaVal,
            _ => Split::MetaTest,
        })
        .collect())
}

/// One few-shot classification task. Examples are stored label-major:
/// all of label 0, then label 1, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Global class id behind each episode-local label.
    pub classes: Vec<usize>,
}

impl Episode {
    /// Checks the count and label invariants.
    pub fn validate(&self) -> Result<()> {
        let check = |x: &Tensor, y: &[usize], per: usize, what: &str| -> Result<()> {
            if x.shape().first() != Some(&y.len()) || y.len() != self.n_way * per {
                return Err(Error::invalid(format!(
                    "{what}: {} rows for {} labels",
                    x.shape()[0],
                    y.len()
                )));
            }
            for label in 0..self.n_way {
                let count = y.iter().filter(|&&l| l == label).count();
                if count != per {
                    return Err(Error::invalid(format!("{what}: label {label} appears {count} times")));
                }
            }
            Ok(())
        };
        check(&self.support_x, &self.support_y, self.k_shot, "support")?;
        check(&self.query_x, &self.query_y, self.q_queries, "query")?;
        if self.classes.len() != self.n_way {
            return Err(Error::invalid("class list length differs from n_way"));
        }
        Ok(())
    }

    /// SHA-256 over shapes, labels, classes and the exact bits of every value.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (x, y) in [(&self.support_x, &self.support_y), (&self.query_x, &self.query_y)] {
            for &d in x.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in x.data() {
                h.update(v.to_bits().to_le_bytes());
            }
            for &l in y {
                h.update((l as u64).to_le_bytes());
            }
        }
        for &c in &self.classes {
            h.update((c as u64).to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Source of examples for each global class.
#[derive(Clone, Debug)]
pub enum Family {
    Blobs(Arc<Blobs>),
    Patterns(Arc<Patterns>),
    File(Arc<Dataset>),
}

/// Per-episode nuisance shared by every example of one task.
enum TaskStyle {
    Blobs(Tensor),
    Patterns { contrast: f64, flip: bool },
    File,
}

impl Family {
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Family::Blobs(b) => vec![b.params.d_input],
            Family::Patterns(p) => vec![1, p.params.image_size, p.params.image_size],
            Family::File(d) => d.input_shape.clone(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.splits().len()
    }

    pub fn splits(&self) -> &[Split] {
        match self {
            Family::Blobs(b) => &b.splits,
            Family::Patterns(p) => &p.splits,
            Family::File(d) => &d.splits,
        }
    }

    /// Global class ids belonging to `split`, ascending.
    pub fn pool(&self, split: Split) -> Vec<usize> {
        self.splits()
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(c, _)| c)
            .collect()
    }

    fn task_style<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskStyle {
        match self {
            Family::Blobs(b) => TaskStyle::Blobs(b.task_transform(rng)),
            Family::Patterns(_) => TaskStyle::Patterns {
                contrast: rng.random_range(0.5..=1.0),
                flip: rng.random_bool(0.5),
            },
            Family::File(_) => TaskStyle::File,
        }
    }

    /// Appends `count` examples of `class` to `out`.
    fn draw<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        class: usize,
        count: usize,
        style: &TaskStyle,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        match (self, style) {
            (Family::Blobs(b), TaskStyle::Blobs(r)) => b.draw(rng, class, count, Some(r), out),
            (Family::Blobs(b), _) => b.draw(rng, class, count, None, out),
            (Family::Patterns(p), &TaskStyle::Patterns { contrast, flip }) => {
                p.draw(rng, class, count, contrast, flip, out)
            }
            (Family::Patterns(p), _) => p.draw(rng, class, count, 1.0, false, out),
            (Family::File(d), _) => return d.draw(rng, class, count, out),
        }
        Ok(())
    }

    /// Conventional supervised data for a whole pool in the canonical frame
    /// (no per-task transform): `per_class` examples of each pool class,
    /// labelled by position in [`Family::pool`]. File families ignore
    /// `per_class` and return every stored example.
    pub fn pool_examples(&self, split: Split, per_class: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
        let pool = self.pool(split);
        if pool.is_empty() {
            return Err(Error::invalid(format!("{split:?} pool is empty")));
        }
        let mut rng = stream_rng(seed, u64::MAX);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (label, &class) in pool.iter().enumerate() {
            let count = match self {
                Family::File(d) => d.class_count(class),
                _ => per_class,
            };
            match self {
                Family::File(d) => d.extend_all(class, &mut data),
                _ => self.draw(&mut rng, class, count, &TaskStyle::File, &mut data)?,
            }
            labels.extend(std::iter::repeat_n(label, count));
        }
        let mut shape = vec![labels.len()];
        shape.extend(self.input_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// The episode RNG for `(seed, stream)`. Distinct streams are independent,
/// so episode `i` can be regenerated without drawing episodes `0..i`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct TaskDistribution {
    pub family: Family,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub split: Split,
}

impl TaskDistribution {
    /// 5-way 1-shot, 15 queries per class, meta-train split.
    pub fn new(family: Family) -> Self {
        TaskDistribution {
            family,
            n_way: 5,
            k_shot: 1,
            q_queries: 15,
            split: Split::MetaTrain,
        }
    }

    pub fn with_shape(mut self, n_way: usize, k_shot: usize, q_queries: usize) -> Self {
        self.n_way = n_way;
        self.k_shot = k_shot;
        self.q_queries = q_queries;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.family.input_shape()
    }

    pub fn pool(&self) -> Vec<usize> {
        self.family.pool(self.split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.q_queries == 0 {
            return Err(Error::invalid(format!(
                "need n_way >= 2, k_shot >= 1, q_queries >= 1; got {}-way {}-shot q={}",
                self.n_way, self.k_shot, self.q_queries
            )));
        }
        let pool = self.pool().len();
        if pool < self.n_way {
            return Err(Error::invalid(format!(
                "{:?} pool has {pool} classes, fewer than n_way = {}",
                self.split, self.n_way
            )));
        }
        Ok(())
    }

    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Episode> {
        self.validate()?;
        let pool = self.pool();
        // `index::sample` returns the chosen positions in random order, which
        // doubles as the class-to-label shuffle.
        let classes: Vec<usize> = index::sample(rng, pool.len(), self.n_way)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let style = self.family.task_style(rng);
        let width: usize = self.input_shape().iter().product();
        let (k, q) = (self.k_shot, self.q_queries);
        let mut support = Vec::with_capacity(self.n_way * k * width);
        let mut query = Vec::with_capacity(self.n_way * q * width);
        let mut both = Vec::with_capacity((k + q) * width);
        for &class in &classes {
            both.clear();
            self.family.draw(rng, class, k + q, &style, &mut both)?;
            support.extend_from_slice(&both[..k * width]);
            query.extend_from_slice(&both[k * width..]);
        }
        let shape = |rows: usize| {
            let mut s = vec![rows];
            s.extend(self.input_shape());
            s
        };
        let labels = |per: usize| (0..self.n_way).flat_map(|l| std::iter::repeat_n(l, per)).collect();
        Ok(Episode {
            support_x: Tensor::new(shape(self.n_way * k), support)?,
            support_y: labels(k),
            query_x: Tensor::new(shape(self.n_way * q), query)?,
            query_y: labels(q),
            n_way: self.n_way,
            k_shot: k,
            q_queries: q,
            classes,
        })
    }

    /// SHA-256 identifying the family parameters (or file contents), episode
    /// shape and split.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        match &self.family {
            Family::Blobs(b) => h.update(serde_json::to_vec(&b.params).expect("plain struct")),
            Family::Patterns(p) => h.update(serde_json::to_vec(&p.params).expect("plain struct")),
            Family::File(d) => h.update(Sha256::digest(d.to_bytes())),
        }
        for v in [self.n_way, self.k_shot, self.q_queries, self.split.tag() as usize] {
            h.update((v as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    /// Episode number `index` of the stream for `seed`.
    pub fn episode(&self, seed: u64, index: u64) -> Result<Episode> {
        self.sample_episode(&mut stream_rng(seed, index))
    }
}

/// Gaussian class prototypes in `R^d_input` with a random orthogonal
/// transform per task; see [`BlobsParams`] for the remaining knobs.
pub fn blobs_family(d_input: usize, n_classes: usize, spread: f64, sigma: f64) -> Result<TaskDistribution> {
    let params = BlobsParams {
        d_input,
        n_classes,
        spread,
        sigma,
        ..BlobsParams::default()
    };
    Ok(TaskDistribution::new(Family::Blobs(Arc::new(Blobs::new(params)?))))
}

/// Procedural glyph images of side `image_size`.
pub fn patterns_family(image_size: usize, n_classes: usize, noise: f64) -> Result<TaskDistribution> {
    let params = PatternsParams {
        image_size,
        n_classes,
        noise,
        ..PatternsParams::default()
    };
    Ok(TaskDistribution::new(Family::Patterns(Arc::new(Patterns::new(
        params,
    )?))))
}

/// Examples and class splits loaded from a dataset file.
pub fn file_family(path: impl AsRef<std::path::Path>) -> Result<TaskDistribution> {
    Ok(TaskDistribution::new(Family::File(Arc::new(Dataset::read(path)?))))
}

/// Family description as it appears in an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyConfig {
    Blobs(BlobsParams),
    Patterns(PatternsParams),
    File { path: std::path::PathBuf },
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig::Blobs(BlobsParams::default())
    }
}

impl FamilyConfig {
    pub fn build(&self) -> Result<Family> {
        Ok(match self {
            FamilyConfig::Blobs(p) => Family::Blobs(Arc::new(Blobs::new(p.clone())?)),
            FamilyConfig::Patterns(p) => Family::Patterns(Arc::new(Patterns::new(p.clone())?)),
            FamilyConfig::File { path } => Family::File(Arc::new(Dataset::read(path)?)),
        })
    }
}
