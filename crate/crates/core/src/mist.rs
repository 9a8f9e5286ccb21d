//! MI-guided sparse pre-adaptation of the backbone ahead of a frozen host.
//!
//! Per task: score parameters once over the epoch-1 mini-batches, keep the
//! top `k%`, then for every epoch and batch take a masked SGD step on the
//! loss over the parameters that survive gradient dropout.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, copy_shared, dense_classes, embed, merged, temporary_head};
use crate::hosts::{dense_targets, fit_linear_head, head_cross_entropy, LinearHead, PrototypeStore};
use crate::mi_objective::{mi_loss, Batch, MiObjectiveConfig};
use crate::numerics::{masked_sgd_step, ParamStore, Tensor};
use crate::rng::{derive_seed, tag};
use crate::sparsity::{
    accumulate_mi_fisher, floor_percent, sample_dropout, score_baseline, select_top_k, FisherVariant, ScoreMethod,
};
use crate::{Error, Result};

/// Objective minimized during pre-adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptLoss {
    #[default]
    Mi,
    /// Cross-entropy through a temporary head, which is updated densely.
    CrossEntropy,
}

impl FromStr for AdaptLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi" => Ok(AdaptLoss::Mi),
            "cross_entropy" | "ce" => Ok(AdaptLoss::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MistConfig {
    pub k_percent: f64,
    pub d_percent: f64,
    pub epochs: usize,
    pub lr: f64,
    pub mi_batch_size: usize,
    pub mi_cfg: MiObjectiveConfig,
    pub scorer: ScoreMethod,
    pub loss: AdaptLoss,
    pub fisher: FisherVariant,
    pub seed: u64,
}

impl Default for MistConfig {
    fn default() -> Self {
        Self {
            k_percent: 5.0,
            d_percent: 90.0,
            epochs: 20,
            lr: 1e-4,
            mi_batch_size: 32,
            mi_cfg: MiObjectiveConfig::default(),
            scorer: ScoreMethod::MiFisher,
            loss: AdaptLoss::Mi,
            fisher: FisherVariant::SquaredSum,
            seed: 0,
        }
    }
}

impl MistConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("k_percent", self.k_percent), ("d_percent", self.d_percent)] {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 100], got {p}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.mi_batch_size < 2 {
            return Err(Error::Config(format!(
                "mi_batch_size must be at least 2, got {}",
                self.mi_batch_size
            )));
        }
        self.mi_cfg.validate()
    }

    /// Scalars updated in every batch for a backbone of `total` scalars.
    pub fn updates_per_batch(&self, total: usize) -> usize {
        let m = floor_percent(self.k_percent, total);
        m - floor_percent(self.d_percent, m)
    }
}

/// One optimizer step of pre-adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEvent {
    pub task: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub updated_scalars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreAdaptReport {
    pub scalars_selected: usize,
    /// Global indices of the selected backbone scalars.
    pub selected: Vec<usize>,
    /// Mean backbone scalars written per batch.
    pub scalars_updated_per_batch: f64,
    /// Mean loss per epoch.
    pub loss_trace: Vec<f64>,
    pub batches: usize,
    pub wall_time_ms: f64,
    pub parameter_delta_norm: f64,
    pub events: Vec<BatchEvent>,
    pub warnings: Vec<String>,
}

fn epoch_batches(task: &Batch, cfg: &MistConfig, task_index: usize, epoch: usize) -> Vec<Batch> {
    let t = task_index as u64;
    let e = epoch as u64;
    task.minibatches(cfg.mi_batch_size, derive_seed(cfg.seed, &[tag("partition"), t, e]))
        .into_iter()
        .enumerate()
        .map(|(j, b)| {
            let s = derive_seed(cfg.seed, &[tag("augment"), t, e, j as u64]);
            b.with_views(&cfg.mi_cfg, s)
        })
        .collect()
}

/// Sparse pre-adaptation of `store` on one task's data.
///
/// Parameters outside the selected mask keep their exact bits.
pub fn pre_adapt(store: &mut ParamStore, task: &Batch, task_index: usize, cfg: &MistConfig) -> Result<PreAdaptReport> {
    cfg.validate()?;
    let start = Instant::now();
    let total = store.total_count();
    let mut report = PreAdaptReport {
        scalars_selected: floor_percent(cfg.k_percent, total),
        selected: Vec::new(),
        scalars_updated_per_batch: 0.0,
        loss_trace: Vec::new(),
        batches: 0,
        wall_time_ms: 0.0,
        parameter_delta_norm: 0.0,
        events: Vec::new(),
        warnings: Vec::new(),
    };
    if cfg.epochs == 0 {
        report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok(report);
    }
    if task.len() < 2 {
        return Err(Error::BatchTooSmall(task.len()));
    }
    let entry = store.clone();
    let t = task_index as u64;

    let first = epoch_batches(task, cfg, task_index, 0);
    let scores = match cfg.scorer {
        ScoreMethod::MiFisher => accumulate_mi_fisher(store, &first, &cfg.mi_cfg, cfg.fisher)?,
        other => score_baseline(store, &first, other, derive_seed(cfg.seed, &[tag("score"), t]))?,
    };
    let mask = select_top_k(&scores, cfg.k_percent)?;
    report.selected = mask.indices().to_vec();
    if mask.is_empty() {
        report.warnings.push(format!(
            "k={}% of {total} parameters selects nothing; task {task_index} skipped",
            cfg.k_percent
        ));
        report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok(report);
    }

    // The cross-entropy variant trains a temporary head appended after the
    // backbone; its indices are always updated.
    let classes = dense_classes(task.labels.iter().copied());
    let mut train = match cfg.loss {
        AdaptLoss::Mi => store.clone(),
        AdaptLoss::CrossEntropy => {
            let fdim = backbone::feature_dim(store).ok_or(Error::EmptyData("backbone parameters"))?;
            let head = temporary_head(fdim, classes.len(), derive_seed(cfg.seed, &[tag("ce-head"), t]))?;
            merged(store, &head)?
        }
    };
    let head_range: Vec<usize> = (total..train.total_count()).collect();

    let mut updated_sum = 0usize;
    let mut batches_seen = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = if epoch == 0 {
            first.clone()
        } else {
            epoch_batches(task, cfg, task_index, epoch)
        };
        let mut epoch_loss = 0.0;
        for (j, batch) in batches.iter().enumerate() {
            let obj = match cfg.loss {
                AdaptLoss::Mi => mi_loss(&train, batch, &cfg.mi_cfg)?,
                AdaptLoss::CrossEntropy => {
                    let targets = dense_targets(&classes, &batch.labels);
                    head_cross_entropy(&train, &batch.samples, &targets, classes.len(), true)?
                }
            };
            train.zero_grads();
            obj.backward(&mut train)?;
            let seed = derive_seed(cfg.seed, &[tag("dropout"), t, epoch as u64, j as u64]);
            let kept = sample_dropout(&mask, cfg.d_percent, seed)?;
            let updated = kept.len();
            if head_range.is_empty() {
                masked_sgd_step(&mut train, cfg.lr, kept.kept())?;
            } else {
                let mut allowed = kept.kept().to_vec();
                allowed.extend_from_slice(&head_range);
                masked_sgd_step(&mut train, cfg.lr, &allowed)?;
            }
            report.events.push(BatchEvent {
                task: task_index,
                epoch,
                batch: j,
                loss: obj.value,
                updated_scalars: updated,
            });
            updated_sum += updated;
            batches_seen += 1;
            epoch_loss += obj.value;
        }
        report.loss_trace.push(epoch_loss / batches.len() as f64);
    }
    copy_shared(store, &train)?;
    store.zero_grads();

    report.batches = batches_seen;
    report.scalars_updated_per_batch = updated_sum as f64 / batches_seen.max(1) as f64;
    report.parameter_delta_norm = store.distance(&entry);
    report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Frozen-backbone classifier trained after pre-adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HostMethod {
    Prototype(PrototypeStore),
    Linear { head: LinearHead, epochs: usize, lr: f64 },
}

impl HostMethod {
    pub fn prototype(feature_dim: usize) -> Self {
        HostMethod::Prototype(PrototypeStore::new(feature_dim))
    }

    /// Trains the host on `task` with the backbone frozen.
    pub fn fit(&mut self, store: &ParamStore, task: &Batch, seed: u64) -> Result<()> {
        match self {
            HostMethod::Prototype(p) => p.fit(&embed(store, &task.samples)?, &task.labels),
            HostMethod::Linear { head, epochs, lr } => {
                fit_linear_head(head, store, task, *epochs, *lr, seed).map(|_| ())
            }
        }
    }

    pub fn predict(&self, store: &ParamStore, samples: &Tensor) -> Result<Vec<usize>> {
        let f = embed(store, samples)?;
        match self {
            HostMethod::Prototype(p) => p.predict(&f),
            HostMethod::Linear { head, .. } => head.predict(&f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: usize,
    pub pre_adapt: PreAdaptReport,
    pub classes_seen: usize,
}

/// Pre-adapts the backbone on `task`, then fits the host on the same data
/// with the backbone frozen.
pub fn run_task(
    store: &mut ParamStore,
    task: &Batch,
    task_index: usize,
    cfg: &MistConfig,
    host: &mut HostMethod,
) -> Result<TaskResult> {
    let pre_adapt = pre_adapt(store, task, task_index, cfg)?;
    host.fit(store, task, derive_seed(cfg.seed, &[tag("host"), task_index as u64]))?;
    let classes_seen = match host {
        HostMethod::Prototype(p) => p.classes().len(),
        HostMethod::Linear { head, .. } => head.classes().len(),
    };
    Ok(TaskResult {
        task: task_index,
        pre_adapt,
        classes_seen,
    })
}
