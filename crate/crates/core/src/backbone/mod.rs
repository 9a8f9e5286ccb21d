//! A small tanh MLP standing in for a pre-trained feature extractor.
//!
//! Parameters are stored as `layer{i}.weight` (`in x out`) and
//! `layer{i}.bias` (`out`). Hidden layers apply `tanh`; the final feature
//! layer is linear.

mod checkpoint;

pub use checkpoint::{
    fnv1a64, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointError, NamedTensor,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::mi_objective::Batch;
use crate::numerics::{cross_entropy, gemm, sgd_step, ComputeGraph, NodeId, ParamStore, Tensor};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dims: vec![256],
            feature_dim: 128,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("backbone needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, input to feature.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Glorot-uniform weights, zero biases, drawn from a stream keyed by `cfg.seed`.
pub fn init_backbone(cfg: &BackboneConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "backbone-init", &[]);
    let mut store = ParamStore::new();
    for (layer, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
        store.insert(weight_name(layer), Tensor::matrix(fan_in, fan_out, w)?)?;
        store.insert(bias_name(layer), Tensor::zeros(&[fan_out]))?;
    }
    Ok(store)
}

/// Number of `layer{i}` blocks present in a store.
pub fn layer_count(store: &ParamStore) -> usize {
    (0..).take_while(|&l| store.get(&weight_name(l)).is_some()).count()
}

pub fn input_dim(store: &ParamStore) -> Option<usize> {
    store.get(&weight_name(0)).map(Tensor::rows)
}

pub fn feature_dim(store: &ParamStore) -> Option<usize> {
    let last = layer_count(store).checked_sub(1)?;
    store.get(&weight_name(last)).map(Tensor::cols)
}

/// Appends the backbone forward pass for the rows of `x` to a graph.
pub fn forward(g: &mut ComputeGraph, store: &ParamStore, x: NodeId, trainable: bool) -> NodeId {
    let layers = layer_count(store);
    let mut h = x;
    for l in 0..layers {
        let (w, b) = if trainable {
            (g.param(weight_name(l)), g.param(bias_name(l)))
        } else {
            (g.frozen_param(weight_name(l)), g.frozen_param(bias_name(l)))
        };
        let z = g.matmul(h, w);
        h = g.add(z, b);
        if l + 1 < layers {
            h = g.tanh(h);
        }
    }
    h
}

/// Feature rows for the rows of `x`. Pure: the store is only read.
pub fn embed(store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let layers = layer_count(store);
    let expected = input_dim(store).ok_or(Error::EmptyData("backbone parameters"))?;
    if x.rank() != 2 || x.cols() != expected {
        return Err(Error::Dimension {
            expected,
            found: x.cols(),
        });
    }
    let rows = x.rows();
    let mut h = x.data().to_vec();
    let mut width = expected;
    for l in 0..layers {
        let w = store.get(&weight_name(l)).expect("layer weight");
        let b = store.get(&bias_name(l)).expect("layer bias");
        let out = w.cols();
        let mut z = gemm(rows, width, out, &h, w.data());
        for row in z.chunks_mut(out) {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
                if l + 1 < layers {
                    *v = v.tanh();
                }
            }
        }
        h = z;
        width = out;
    }
    Ok(Tensor::matrix(rows, width, h)?)
}

/// Copies every parameter of `src` that also exists in `dst`.
pub(crate) fn copy_shared(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for e in src.entries() {
        if dst.get(e.name()).is_some() {
            dst.set(e.name(), e.value().clone())?;
        }
    }
    Ok(())
}

/// A store holding every entry of `a` followed by every entry of `b`.
pub(crate) fn merged(a: &ParamStore, b: &ParamStore) -> Result<ParamStore> {
    let mut out = a.clone();
    for e in b.entries() {
        out.insert(e.name(), e.value().clone())?;
    }
    Ok(out)
}

/// Maps arbitrary class ids onto dense head columns `0..C`.
pub(crate) fn dense_classes(labels: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut classes: Vec<usize> = labels.into_iter().collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Randomly initialized linear head `feature_dim -> classes`.
pub(crate) fn temporary_head(feature_dim: usize, classes: usize, seed: u64) -> Result<ParamStore> {
    let mut rng = rng::stream(seed, "temporary-head", &[]);
    let s = (6.0 / (feature_dim + classes) as f64).sqrt();
    let w = (0..feature_dim * classes).map(|_| rng.random_range(-s..=s)).collect();
    let mut head = ParamStore::new();
    head.insert("head.weight", Tensor::matrix(feature_dim, classes, w)?)?;
    head.insert("head.bias", Tensor::zeros(&[classes]))?;
    Ok(head)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
    pub classes: usize,
}

/// Cross-entropy pretraining of the backbone through a temporary linear head
/// that is thrown away afterwards. Plain SGD over all parameters, one step
/// per batch, batches visited in the given order every epoch.
pub fn pretrain(
    store: &mut ParamStore,
    base_data: &[Batch],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainReport> {
    if base_data.is_empty() || base_data.iter().all(|b| b.labels.is_empty()) {
        return Err(Error::EmptyData("pretraining data"));
    }
    let classes = dense_classes(base_data.iter().flat_map(|b| b.labels.iter().copied()));
    let fdim = feature_dim(store).ok_or(Error::EmptyData("backbone parameters"))?;
    let head = temporary_head(fdim, classes.len(), seed)?;
    let mut train = merged(store, &head)?;
    let mut loss_trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        let mut count = 0;
        for batch in base_data.iter().filter(|b| !b.labels.is_empty()) {
            let targets: Vec<usize> = batch
                .labels
                .iter()
                .map(|y| classes.binary_search(y).expect("label collected above"))
                .collect();
            let mut g = ComputeGraph::new();
            let x = g.input(0);
            let f = forward(&mut g, store, x, true);
            let w = g.param("head.weight");
            let b = g.param("head.bias");
            let z = g.matmul(f, w);
            let logits = g.add(z, b);
            let loss = cross_entropy(&mut g, logits, &targets, classes.len());
            let value = g.evaluate(&train, std::slice::from_ref(&batch.samples))?;
            train.zero_grads();
            g.backward(loss, &mut train)?;
            sgd_step(&mut train, lr)?;
            total += value.item().unwrap_or(f64::NAN);
            count += 1;
        }
        loss_trace.push(total / count as f64);
    }
    copy_shared(store, &train)?;
    Ok(PretrainReport {
        loss_trace,
        classes: classes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            input_dim: 2,
            hidden_dims: vec![4],
            feature_dim: 3,
            seed: 11,
        }
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let store = init_backbone(&small()).unwrap();
        assert_eq!(store.total_count(), 2 * 4 + 4 + 4 * 3 + 3);
        assert_eq!(small().param_count(), 27);
    }

    #[test]
    fn initialization_is_seeded() {
        let a = init_backbone(&small()).unwrap();
        let b = init_backbone(&small()).unwrap();
        assert!(a.bit_identical(&b));
        let c = init_backbone(&BackboneConfig { seed: 12, ..small() }).unwrap();
        assert!(!a.bit_identical(&c));
    }

    #[test]
    fn weights_respect_glorot_bound() {
        let cfg = small();
        let store = init_backbone(&cfg).unwrap();
        for (l, (i, o)) in cfg.layer_dims().into_iter().enumerate() {
            let s = (6.0 / (i + o) as f64).sqrt();
            let w = store.get(&weight_name(l)).unwrap();
            assert!(w.data().iter().all(|v| v.abs() <= s));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(init_backbone(&BackboneConfig {
            hidden_dims: vec![],
            ..small()
        })
        .is_err());
        assert!(init_backbone(&BackboneConfig {
            feature_dim: 0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn zero_weights_give_bias_features() {
        let mut store = init_backbone(&small()).unwrap();
        for l in 0..2 {
            let w = store.get(&weight_name(l)).unwrap().clone();
            store.set(&weight_name(l), Tensor::zeros(w.shape())).unwrap();
        }
        store.set(&bias_name(1), Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 4.0]).unwrap();
        let f = embed(&store, &x).unwrap();
        assert_eq!(f.shape(), &[2, 3]);
        assert_eq!(f.row(0), &[0.5, -1.0, 2.0]);
        assert_eq!(f.row(1), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn embed_checks_input_width() {
        let store = init_backbone(&small()).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            embed(&store, &x),
            Err(Error::Dimension { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn embed_agrees_with_graph_forward() {
        let store = init_backbone(&small()).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let mut g = ComputeGraph::new();
        let input = g.input(0);
        forward(&mut g, &store, input, true);
        let via_graph = g.evaluate(&store, std::slice::from_ref(&x)).unwrap();
        assert!(via_graph.bit_eq(&embed(&store, &x).unwrap()));
    }

    #[test]
    fn zero_epochs_leave_store_unchanged() {
        let mut store = init_backbone(&small()).unwrap();
        let before = store.clone();
        let batch = Batch::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0, 1]).unwrap();
        let report = pretrain(&mut store, &[batch], 0, 0.1, 0).unwrap();
        assert!(report.loss_trace.is_empty());
        assert!(store.bit_identical(&before));
    }

    #[test]
    fn pretraining_without_data_fails() {
        let mut store = init_backbone(&small()).unwrap();
        assert!(matches!(pretrain(&mut store, &[], 3, 0.1, 0), Err(Error::EmptyData(_))));
    }
}
