//! Frozen-backbone host methods: nearest-prototype and linear-probe
//! classifiers, plus full fine-tuning as the destructive baseline.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, copy_shared, dense_classes, embed, merged, temporary_head};
use crate::mi_objective::{Batch, ScalarObjective};
use crate::numerics::{cross_entropy, sgd_step, ComputeGraph, ParamStore, Tensor};
use crate::rng;
use crate::{Error, Result};

/// Class means kept as exact running sums and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    dim: usize,
    sums: BTreeMap<usize, Vec<f64>>,
    counts: BTreeMap<usize, usize>,
}

impl PrototypeStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sums: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.counts.keys().copied().collect()
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn prototype(&self, class: usize) -> Option<Vec<f64>> {
        let n = *self.counts.get(&class)? as f64;
        Some(self.sums[&class].iter().map(|s| s / n).collect())
    }

    /// Adds feature rows to the running sums of their classes.
    pub fn fit(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        if features.rank() != 2 || features.cols() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: features.cols(),
            });
        }
        if features.rows() != labels.len() {
            return Err(Error::LabelCount {
                labels: labels.len(),
                rows: features.rows(),
            });
        }
        for (r, &y) in labels.iter().enumerate() {
            let sum = self.sums.entry(y).or_insert_with(|| vec![0.0; self.dim]);
            for (s, v) in sum.iter_mut().zip(features.row(r)) {
                *s += v;
            }
            *self.counts.entry(y).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Class with the highest cosine similarity; ties go to the lowest id.
    /// A zero vector on either side scores 0.
    pub fn classify_nearest(&self, feature: &[f64]) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::NoPrototypes);
        }
        if feature.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: feature.len(),
            });
        }
        let qn = norm(feature);
        let mut best = None;
        for (&class, sum) in &self.sums {
            // The mean is a positive multiple of the sum, so the sum has the same cosine.
            let pn = norm(sum);
            let cos = if qn == 0.0 || pn == 0.0 {
                0.0
            } else {
                dot(feature, sum) / (qn * pn)
            };
            match best {
                Some((_, b)) if cos <= b => {}
                _ => best = Some((class, cos)),
            }
        }
        Ok(best.expect("non-empty store").0)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        (0..features.rows())
            .map(|r| self.classify_nearest(features.row(r)))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn fit_prototypes(store: &mut PrototypeStore, features: &Tensor, labels: &[usize]) -> Result<()> {
    store.fit(features, labels)
}

pub fn classify_nearest(store: &PrototypeStore, feature: &[f64]) -> Result<usize> {
    store.classify_nearest(feature)
}

/// Percentage of `predicted` equal to `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// A linear classifier over backbone features, one row per seen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    classes: Vec<usize>,
    /// `classes × feature_dim`.
    weight: Tensor,
    bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            classes: Vec::new(),
            weight: Tensor::zeros(&[0, feature_dim]),
            bias: Vec::new(),
        }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Appends a freshly initialized row for every class not yet present.
    /// Existing rows are left alone.
    pub fn grow(&mut self, classes: &[usize], seed: u64) -> usize {
        let d = self.feature_dim();
        let s = (6.0 / (d + 1) as f64).sqrt() * 0.1;
        let mut data = self.weight.data().to_vec();
        let mut added = 0;
        for &c in classes {
            if self.classes.contains(&c) {
                continue;
            }
            let mut r = rng::stream(seed, "head-row", &[c as u64]);
            data.extend((0..d).map(|_| r.random_range(-s..=s)));
            self.classes.push(c);
            self.bias.push(0.0);
            added += 1;
        }
        self.weight = Tensor::matrix(self.classes.len(), d, data).expect("row-major growth");
        added
    }

    fn to_params(&self) -> Result<ParamStore> {
        let mut p = ParamStore::new();
        p.insert("probe.weight", self.weight.clone())?;
        p.insert("probe.bias", Tensor::vector(self.bias.clone()))?;
        Ok(p)
    }

    /// Logit argmax per row; ties go to the earliest row.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        if self.classes.is_empty() {
            return Err(Error::NoPrototypes);
        }
        if features.cols() != self.feature_dim() {
            return Err(Error::Dimension {
                expected: self.feature_dim(),
                found: features.cols(),
            });
        }
        Ok((0..features.rows())
            .map(|r| {
                let f = features.row(r);
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..self.classes.len() {
                    let z = dot(self.weight.row(k), f) + self.bias[k];
                    if z > best.1 {
                        best = (k, z);
                    }
                }
                self.classes[best.0]
            })
            .collect())
    }
}

/// Full-batch cross-entropy training of the head on frozen features of
/// `task`. Rows for unseen task classes are added first. Returns the loss
/// per epoch.
pub fn fit_linear_head(
    head: &mut LinearHead,
    store: &ParamStore,
    task: &Batch,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    head.grow(&dense_classes(task.labels.iter().copied()), seed);
    let features = embed(store, &task.samples)?;
    let targets: Vec<usize> = task
        .labels
        .iter()
        .map(|y| head.classes.iter().position(|c| c == y).expect("row added by grow"))
        .collect();
    let classes = head.classes.len();
    let mut params = head.to_params()?;
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut g = ComputeGraph::new();
        let f = g.input(0);
        let w = g.param("probe.weight");
        let b = g.param("probe.bias");
        let z = g.matmul_t(f, w);
        let logits = g.add(z, b);
        let loss = cross_entropy(&mut g, logits, &targets, classes);
        let value = g.evaluate(&params, std::slice::from_ref(&features))?;
        params.zero_grads();
        g.backward(loss, &mut params)?;
        sgd_step(&mut params, lr)?;
        trace.push(value.item().unwrap_or(f64::NAN));
    }
    head.weight = params.get("probe.weight").expect("probe weight").clone();
    head.bias = params.get("probe.bias").expect("probe bias").data().to_vec();
    Ok(trace)
}

/// Cross-entropy of a `head.weight`/`head.bias` classifier on top of the
/// backbone, both held in `train`.
pub(crate) fn head_cross_entropy(
    train: &ParamStore,
    samples: &Tensor,
    targets: &[usize],
    classes: usize,
    backbone_trainable: bool,
) -> Result<ScalarObjective> {
    let mut g = ComputeGraph::new();
    let x = g.input(0);
    let f = backbone::forward(&mut g, train, x, backbone_trainable);
    let w = g.param("head.weight");
    let b = g.param("head.bias");
    let z = g.matmul(f, w);
    let logits = g.add(z, b);
    let output = cross_entropy(&mut g, logits, targets, classes);
    let value = g
        .evaluate(train, std::slice::from_ref(samples))?
        .item()
        .expect("scalar loss");
    Ok(ScalarObjective {
        graph: g,
        output,
        value,
    })
}

/// Dense targets for `labels` against the sorted class list.
pub(crate) fn dense_targets(classes: &[usize], labels: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .map(|y| classes.binary_search(y).expect("label in class list"))
        .collect()
}

/// Fine-tunes every backbone parameter jointly with a temporary head using
/// mini-batch SGD at one learning rate. Returns mean loss per epoch.
pub fn fft_finetune(
    store: &mut ParamStore,
    task: &Batch,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Ok(Vec::new());
    }
    if task.is_empty() {
        return Err(Error::EmptyData("fine-tuning data"));
    }
    let classes = dense_classes(task.labels.iter().copied());
    let fdim = backbone::feature_dim(store).ok_or(Error::EmptyData("backbone parameters"))?;
    let head = temporary_head(fdim, classes.len(), rng::derive_seed(seed, &[rng::tag("fft-head")]))?;
    let mut train = merged(store, &head)?;
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = task.minibatches(batch_size, rng::derive_seed(seed, &[epoch as u64]));
        let mut total = 0.0;
        for batch in &batches {
            let targets = dense_targets(&classes, &batch.labels);
            let obj = head_cross_entropy(&train, &batch.samples, &targets, classes.len(), true)?;
            train.zero_grads();
            obj.backward(&mut train)?;
            sgd_step(&mut train, lr)?;
            total += obj.value;
        }
        trace.push(total / batches.len() as f64);
    }
    copy_shared(store, &train)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn one_sample_prototype_is_the_sample() {
        let mut p = PrototypeStore::new(2);
        p.fit(&rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]), &[4, 9]).unwrap();
        assert_eq!(p.prototype(4).unwrap(), vec![1.0, 2.0]);
        assert_eq!(p.prototype(9).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn prototype_is_mean() {
        let mut p = PrototypeStore::new(2);
        p.fit(&rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &[0, 0]).unwrap();
        assert_eq!(p.prototype(0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(p.count(0), 2);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut p = PrototypeStore::new(3);
        assert!(matches!(
            p.fit(&rows(&[vec![1.0, 0.0]]), &[0]),
            Err(Error::Dimension { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn nearest_is_scale_invariant_and_self_matching() {
        let mut p = PrototypeStore::new(2);
        p.fit(&rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &[3, 5]).unwrap();
        assert_eq!(p.classify_nearest(&[7.0, 0.0]).unwrap(), 3);
        assert_eq!(p.classify_nearest(&[0.0, 1.0]).unwrap(), 5);
        assert_eq!(p.classify_nearest(&[1.0, 1.0]).unwrap(), 3);
        assert_eq!(p.classify_nearest(&[0.0, 0.0]).unwrap(), 3);
    }

    #[test]
    fn empty_store_cannot_classify() {
        assert!(matches!(
            PrototypeStore::new(2).classify_nearest(&[1.0, 0.0]),
            Err(Error::NoPrototypes)
        ));
    }

    #[test]
    fn accuracy_in_percent() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 0, 0]), 50.0);
    }

    #[test]
    fn head_grows_without_touching_old_rows() {
        let mut h = LinearHead::new(3);
        assert_eq!(h.grow(&[2, 5], 1), 2);
        let before = h.weight().row(0).to_vec();
        assert_eq!(h.grow(&[5, 7, 8], 1), 2);
        assert_eq!(h.classes(), &[2, 5, 7, 8]);
        assert_eq!(h.weight().row(0), before.as_slice());
        assert_eq!(h.weight().shape(), &[4, 3]);
    }

    fn small_store() -> ParamStore {
        init_backbone(&BackboneConfig {
            input_dim: 2,
            hidden_dims: vec![6],
            feature_dim: 4,
            seed: 2,
        })
        .unwrap()
    }

    fn two_blobs() -> Batch {
        let mut r = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.01;
            r.push(vec![2.0 + t, 0.0]);
            y.push(10);
            r.push(vec![-2.0 - t, 0.5]);
            y.push(11);
        }
        Batch::new(rows(&r), y).unwrap()
    }

    #[test]
    fn head_zero_epochs_and_frozen_backbone() {
        let store = small_store();
        let task = two_blobs();
        let mut h = LinearHead::new(4);
        fit_linear_head(&mut h, &store, &task, 0, 0.1, 0).unwrap();
        let grown = h.clone();
        fit_linear_head(&mut h, &store, &task, 0, 0.1, 0).unwrap();
        assert_eq!(h, grown);
        let before = store.clone();
        fit_linear_head(&mut h, &store, &task, 50, 0.5, 0).unwrap();
        assert!(store.bit_identical(&before));
        let acc = accuracy(
            &h.predict(&embed(&store, &task.samples).unwrap()).unwrap(),
            &task.labels,
        );
        assert!(acc > 90.0, "accuracy {acc}");
    }

    #[test]
    fn fft_null_cases() {
        let task = two_blobs();
        let mut store = small_store();
        let before = store.clone();
        fft_finetune(&mut store, &task, 0, 0.1, 8, 0).unwrap();
        assert!(store.bit_identical(&before));
        fft_finetune(&mut store, &task, 3, 0.0, 8, 0).unwrap();
        assert!(store.bit_identical(&before));
        fft_finetune(&mut store, &task, 3, 0.1, 8, 0).unwrap();
        assert!(!store.bit_identical(&before));
    }
}
