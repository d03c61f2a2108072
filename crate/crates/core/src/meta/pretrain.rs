use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::episodes::{stream_rng, Family, Split};
use crate::error::{Error, Result};
use crate::losses::cross_entropy_sum;
use crate::nets::{apply, apply_tensors, init_params, NetworkSpec};
use crate::params::{grad_params, ParamSet};

use super::optim::{OptimState, OptimizerConfig};
use super::trainer::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Adam learning rate.
    pub lr: f64,
    pub batch_size: usize,
    /// Examples drawn per meta-train class for synthetic families.
    pub per_class: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 1e-3,
            batch_size: 64,
            per_class: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch cross-entropy during the epoch.
    pub loss: f64,
    /// Accuracy on the whole training pool after the epoch.
    pub accuracy: f64,
}

/// Conventional supervised training on the pooled meta-train classes, one
/// epoch at a time so it can be checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    /// The network with a head over every meta-train class.
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub optim: OptimState,
    pub epoch: usize,
    pub cfg: PretrainConfig,
    seed: u64,
    x: Tensor,
    y: Vec<usize>,
}

impl Pretrainer {
    pub fn new(spec: &NetworkSpec, family: &Family, cfg: &PretrainConfig, seed: u64) -> Result<Self> {
        if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
            return Err(Error::invalid("pretraining needs batch_size >= 1 and lr >= 0"));
        }
        let pool = family.pool(Split::MetaTrain).len();
        if pool == 0 {
            return Err(Error::invalid("meta-train pool is empty"));
        }
        let spec = spec.with_classes(pool);
        let params = init_params(&spec, seed)?;
        let (x, y) = family.pool_examples(Split::MetaTrain, cfg.per_class, derive_seed(seed, 10))?;
        if y.is_empty() {
            return Err(Error::invalid("meta-train pool has no examples"));
        }
        Ok(Pretrainer {
            spec,
            params,
            optim: OptimState::default(),
            epoch: 0,
            cfg: cfg.clone(),
            seed,
            x,
            y,
        })
    }

    /// Replaces the weights and optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, params: ParamSet, optim: OptimState, epoch: usize) -> Result<()> {
        crate::nets::check_params(&self.spec, &params)?;
        self.params = params;
        self.optim = optim;
        self.epoch = epoch;
        Ok(())
    }

    pub fn accuracy(&self) -> Result<f64> {
        let (logits, _) = apply_tensors(&self.spec, &self.params, &self.x)?;
        let pred = logits.argmax_rows()?;
        Ok(pred.iter().zip(&self.y).filter(|(p, y)| p == y).count() as f64 / self.y.len() as f64)
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let n = self.y.len();
        let width = self.x.numel() / n;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.seed, self.epoch as u64));
        let adam = OptimizerConfig::default();
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * width);
            for &i in chunk {
                data.extend_from_slice(&self.x.data()[i * width..(i + 1) * width]);
            }
            let mut shape = self.x.shape().to_vec();
            shape[0] = chunk.len();
            let labels: Vec<usize> = chunk.iter().map(|&i| self.y[i]).collect();

            let g = Graph::new();
            let vars = self.params.to_vars(&g)?;
            let out = apply(&self.spec, &vars, &g.constant(Tensor::new(shape, data)?)?)?;
            let loss = cross_entropy_sum(&out.logits, &labels)?.scale(1.0 / chunk.len() as f64)?;
            total += loss.value().item()?;
            batches += 1;
            let grad = grad_params(&loss, &vars, false)?.values();
            self.params = self.optim.update(&self.params, &grad, self.cfg.lr, &adam)?;
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: total / batches as f64,
            accuracy: self.accuracy()?,
        })
    }
}

/// Pretrains a teacher for `cfg.epochs` epochs. The returned parameters carry
/// a head over all meta-train classes; replace it with
/// [`reset_head`](crate::nets::reset_head) before meta-training.
pub fn pretrain_teacher(
    spec: &NetworkSpec,
    family: &Family,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<EpochStats>)> {
    let mut p = Pretrainer::new(spec, family, cfg, seed)?;
    let stats = (0..cfg.epochs).map(|_| p.run_epoch()).collect::<Result<Vec<_>>>()?;
    Ok((p.params, stats))
}
