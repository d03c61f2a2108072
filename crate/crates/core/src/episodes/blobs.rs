use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{default_splits, stream_rng, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsParams {
    pub d_input: usize,
    pub n_classes: usize,
    /// Standard deviation of prototype coordinates.
    pub spread: f64,
    /// Within-class noise standard deviation.
    pub sigma: f64,
    /// Strength of the per-task transform: 0 is the identity, 1 a uniformly
    /// random orthogonal matrix.
    pub rotation: f64,
    /// Seed for the class prototypes, fixed across all splits.
    pub world_seed: u64,
}

impl Default for BlobsParams {
    fn default() -> Self {
        BlobsParams {
            d_input: 32,
            n_classes: 100,
            spread: 1.0,
            sigma: 0.9,
            rotation: 1.0,
            world_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Blobs {
    pub params: BlobsParams,
    /// `[n_classes, d_input]`.
    pub prototypes: Tensor,
    pub splits: Vec<Split>,
}

impl Blobs {
    pub fn new(params: BlobsParams) -> Result<Self> {
        if params.d_input < 2 {
            return Err(Error::invalid(format!(
                "blobs need d_input >= 2, got {}",
                params.d_input
            )));
        }
        if !(params.sigma > 0.0 && params.spread > params.sigma) {
            return Err(Error::invalid(format!(
                "blobs need spread > sigma > 0, got spread {} sigma {}",
                params.spread, params.sigma
            )));
        }
        if !(0.0..=1.0).contains(&params.rotation) {
            return Err(Error::invalid(format!(
                "rotation must lie in [0, 1], got {}",
                params.rotation
            )));
        }
        let splits = default_splits(params.n_classes)?;
        let mut rng = stream_rng(params.world_seed, 0);
        let prototypes = Tensor::from_fn(&[params.n_classes, params.d_input], |_| {
            params.spread * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Blobs {
            params,
            prototypes,
            splits,
        })
    }

    /// Orthonormalized `(1 - s) I + s G / sqrt(d)` with Gaussian `G`, as a
    /// row-major `[d, d]` matrix.
    pub(super) fn task_transform<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let d = self.params.d_input;
        let s = self.params.rotation;
        let scale = s / (d as f64).sqrt();
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                (0..d)
                    .map(|i| {
                        let g: f64 = rng.sample(StandardNormal);
                        scale * g + if i == j { 1.0 - s } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        gram_schmidt(&mut cols);
        Tensor::from_fn(&[d, d], |idx| cols[idx % d][idx / d])
    }

    pub(super) fn draw<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        class: usize,
        count: usize,
        transform: Option<&Tensor>,
        out: &mut Vec<f64>,
    ) {
        let d = self.params.d_input;
        let mu = &self.prototypes.data()[class * d..(class + 1) * d];
        let mut v = vec![0.0; d];
        for _ in 0..count {
            for (vi, m) in v.iter_mut().zip(mu) {
                *vi = m + self.params.sigma * rng.sample::<f64, _>(StandardNormal);
            }
            match transform {
                Some(r) => out.extend((0..d).map(|i| {
                    let row = &r.data()[i * d..(i + 1) * d];
                    row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
                })),
                None => out.extend_from_slice(&v),
            }
        }
    }
}

/// Modified Gram-Schmidt in place. A column that collapses numerically is
/// replaced by the first standard basis vector that is still independent.
fn gram_schmidt(cols: &mut [Vec<f64>]) {
    let d = cols.len();
    for j in 0..d {
        for basis in std::iter::once(None).chain((0..d).map(Some)) {
            if let Some(b) = basis {
                cols[j] = (0..d).map(|i| if i == b { 1.0 } else { 0.0 }).collect();
            }
            for k in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
                let prev = cols[k].clone();
                for (a, b) in cols[j].iter_mut().zip(&prev) {
                    *a -= dot * b;
                }
            }
            let norm = cols[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[j].iter_mut().for_each(|a| *a /= norm);
                break;
            }
        }
    }
}
