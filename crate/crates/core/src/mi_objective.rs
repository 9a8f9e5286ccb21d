//! Three-view supervised InfoNCE loss used as the mutual-information objective.
//!
//! For a batch `B` with augmented views `x'`, and `g(a, b) = exp(f(a)·f(b) / τ)`:
//!
//! ```text
//! A_i  = -Σ_{k: y_k = y_i} log[ g(x_i,x_k) g(x_i,x'_k) g(x'_i,x_k) / D_i³ ]
//! D_i  =  Σ_j g(x_i,x_j) + g(x_i,x'_j) + g(x'_i,x_j)
//! L_MI =  Σ_i A_i / (3 |B| n_i),   n_i = #{s : y_s = y_i}
//! ```
//!
//! Both the positive set and the denominator include `j = i`. Features are
//! L2-normalized before the dot product unless `normalize_features` is off.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone;
use crate::numerics::{ComputeGraph, NodeId, ParamStore, Tensor};
use crate::rng;
use crate::{Error, Result};

/// A mini-batch of samples with labels and, optionally, augmented views.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub augmented: Option<Tensor>,
}

impl Batch {
    pub fn new(samples: Tensor, labels: Vec<usize>) -> Result<Self> {
        if samples.rows() != labels.len() || samples.rank() != 2 {
            return Err(Error::LabelCount {
                labels: labels.len(),
                rows: samples.rows(),
            });
        }
        Ok(Self {
            samples,
            labels,
            augmented: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Attaches augmented views drawn with [`augment`].
    pub fn with_views(mut self, cfg: &MiObjectiveConfig, seed: u64) -> Self {
        self.augmented = Some(augment(&self.samples, cfg, seed));
        self
    }

    /// Splits the rows into shuffled mini-batches of `batch_size` under
    /// `seed`. A trailing single row is folded into the previous batch so
    /// every batch has at least two rows when the data has.
    pub fn minibatches(&self, batch_size: usize, seed: u64) -> Vec<Batch> {
        let n = self.len();
        let size = batch_size.max(1);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = rng::stream(seed, "minibatch-order", &[]);
        perm.shuffle(&mut rng);
        let mut chunks: Vec<Vec<usize>> = perm.chunks(size).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
            let last = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("previous chunk").extend(last);
        }
        chunks.iter().map(|c| self.permuted(c)).collect()
    }

    /// The batch with its rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            samples: self.samples.select_rows(perm),
            labels: perm.iter().map(|&i| self.labels[i]).collect(),
            augmented: self.augmented.as_ref().map(|a| a.select_rows(perm)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiObjectiveConfig {
    /// Temperature τ.
    pub tau: f64,
    pub aug_noise_sigma: f64,
    pub aug_mask_prob: f64,
    pub normalize_features: bool,
}

impl Default for MiObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            aug_noise_sigma: 0.1,
            aug_mask_prob: 0.1,
            normalize_features: true,
        }
    }
}

impl MiObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.aug_noise_sigma >= 0.0 && self.aug_noise_sigma.is_finite()) {
            return Err(Error::Config("aug_noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.aug_mask_prob) {
            return Err(Error::Config("aug_mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gaussian jitter followed by independent coordinate masking. A row whose
/// every coordinate draws a mask keeps its jittered values instead, so the
/// view never collapses to the zero vector.
pub fn augment(x: &Tensor, cfg: &MiObjectiveConfig, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, "augment", &[]);
    let mut out = x.clone();
    if cfg.aug_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.aug_noise_sigma).expect("validated sigma");
        for v in out.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    if cfg.aug_mask_prob > 0.0 {
        let cols = out.cols().max(1);
        for row in out.data_mut().chunks_mut(cols) {
            let masked: Vec<bool> = row.iter().map(|_| rng.random::<f64>() < cfg.aug_mask_prob).collect();
            if masked.iter().all(|&m| m) {
                continue;
            }
            for (v, m) in row.iter_mut().zip(masked) {
                if m {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

/// `exp(a·b / τ)`, after L2-normalizing both vectors when `normalize` is set.
pub fn similarity(a: &[f64], b: &[f64], tau: f64, normalize: bool) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = if normalize {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm);
        }
        dot / (na * nb)
    } else {
        dot
    };
    Ok((cos / tau).exp())
}

/// A scalar loss recorded on a graph, ready for back-propagation.
#[derive(Debug, Clone)]
pub struct ScalarObjective {
    pub graph: ComputeGraph,
    pub output: NodeId,
    pub value: f64,
}

impl ScalarObjective {
    /// Adds the loss gradient into the trainable parameters of `store`.
    pub fn backward(&self, store: &mut ParamStore) -> Result<()> {
        Ok(self.graph.backward(self.output, store)?)
    }
}

/// Builds and evaluates `L_MI` for a batch through the backbone in `store`.
pub fn mi_loss(store: &ParamStore, batch: &Batch, cfg: &MiObjectiveConfig) -> Result<ScalarObjective> {
    cfg.validate()?;
    let views = batch.augmented.as_ref().ok_or(Error::MissingAugmentation)?;
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if batch.samples.rows() != b || views.shape() != batch.samples.shape() {
        return Err(Error::LabelCount {
            labels: b,
            rows: views.rows(),
        });
    }

    let mut positives = vec![0.0; b * b];
    let mut counts = vec![0.0; b];
    for i in 0..b {
        for k in 0..b {
            if batch.labels[i] == batch.labels[k] {
                positives[i * b + k] = 1.0;
                counts[i] += 1.0;
            }
        }
    }
    let log_weight = vec![1.0 / b as f64; b];
    let num_weight: Vec<f64> = counts.iter().map(|n| 1.0 / (3.0 * b as f64 * n)).collect();

    let mut g = ComputeGraph::new();
    let x = g.input(0);
    let xv = g.input(1);
    let both = g.concat_rows(x, xv);
    let feats = backbone::forward(&mut g, store, both, true);
    let feats = if cfg.normalize_features {
        let n = g.l2_normalize(feats);
        g.label(n, "normalized features")
    } else {
        feats
    };
    let f = g.slice_rows(feats, 0, b);
    let fv = g.slice_rows(feats, b, 2 * b);

    let inv_tau = 1.0 / cfg.tau;
    let s_aa = g.matmul_t(f, f);
    let s_ab = g.matmul_t(f, fv);
    let s_ba = g.matmul_t(fv, f);
    let s_aa = g.scale(s_aa, inv_tau);
    let s_ab = g.scale(s_ab, inv_tau);
    let s_ba = g.scale(s_ba, inv_tau);

    let mut denom = None;
    for s in [s_aa, s_ab, s_ba] {
        let e = g.exp(s);
        let r = g.row_sum(e);
        denom = Some(match denom {
            None => r,
            Some(acc) => g.add(acc, r),
        });
    }
    let log_denom = g.log(denom.expect("three terms"));

    let t = g.add(s_aa, s_ab);
    let t = g.add(t, s_ba);
    let pos = g.constant(Tensor::matrix(b, b, positives)?);
    let masked = g.mul(t, pos);
    let numer = g.row_sum(masked);

    let lw = g.constant(Tensor::vector(log_weight));
    let nw = g.constant(Tensor::vector(num_weight));
    let a = g.mul(log_denom, lw);
    let a = g.sum(a);
    let c = g.mul(numer, nw);
    let c = g.sum(c);
    let loss = g.sub(a, c);
    g.label(loss, "L_MI");

    let value = g
        .evaluate(store, &[batch.samples.clone(), views.clone()])
        .map_err(|e| match e {
            crate::numerics::NumericsError::Domain { .. } => Error::ZeroNorm,
            other => other.into(),
        })?
        .item()
        .expect("scalar loss");
    Ok(ScalarObjective {
        graph: g,
        output: loss,
        value,
    })
}
