//! Parameter sensitivity scores, top-k masks and per-batch gradient dropout.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, dense_classes, temporary_head};
use crate::mi_objective::{mi_loss, Batch, MiObjectiveConfig};
use crate::numerics::{cross_entropy, ComputeGraph, ParamStore};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    MiFisher,
    GradMagnitude,
    L2Norm,
    Random,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::MiFisher => "mi_fisher",
            ScoreMethod::GradMagnitude => "grad_magnitude",
            ScoreMethod::L2Norm => "l2_norm",
            ScoreMethod::Random => "random",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mi_fisher" => Ok(ScoreMethod::MiFisher),
            "grad_magnitude" => Ok(ScoreMethod::GradMagnitude),
            "l2_norm" => Ok(ScoreMethod::L2Norm),
            "random" => Ok(ScoreMethod::Random),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// How per-batch MI gradients are combined into a Fisher score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherVariant {
    /// `(Σ_j g_j)²`: sum gradients over batches, then square once.
    #[default]
    SquaredSum,
    /// `Σ_j g_j²`: the classical empirical Fisher diagonal.
    SumOfSquares,
}

impl FromStr for FisherVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_sum" => Ok(FisherVariant::SquaredSum),
            "sum_of_squares" => Ok(FisherVariant::SumOfSquares),
            other => Err(Error::Config(format!("unknown fisher variant '{other}'"))),
        }
    }
}

/// One non-negative score per scalar parameter, aligned with global indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityScores {
    pub values: Vec<f64>,
    pub method: ScoreMethod,
}

/// `⌊percent% · n⌋`, exact for percentages with up to six decimals.
pub fn floor_percent(percent: f64, n: usize) -> usize {
    let micro = (percent * 1e6).round();
    if (percent * 1e6 - micro).abs() < 1e-6 && micro >= 0.0 {
        ((micro as u128 * n as u128) / 100_000_000) as usize
    } else {
        (percent / 100.0 * n as f64).floor().max(0.0) as usize
    }
}

fn check_percent(what: &str, p: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Config(format!("{what} must lie in [0, 100], got {p}")));
    }
    Ok(())
}

/// MI-Fisher sensitivity of every backbone parameter over `batches`.
///
/// With [`FisherVariant::SquaredSum`] the MI-loss gradients of all batches
/// are summed first and squared once. The store is only read.
pub fn accumulate_mi_fisher(
    store: &ParamStore,
    batches: &[Batch],
    cfg: &MiObjectiveConfig,
    variant: FisherVariant,
) -> Result<SensitivityScores> {
    if batches.is_empty() {
        return Err(Error::EmptyData("fisher batches"));
    }
    let mut scratch = store.clone();
    scratch.zero_grads();
    let mut values = vec![0.0; store.total_count()];
    for batch in batches {
        let obj = mi_loss(&scratch, batch, cfg)?;
        if variant == FisherVariant::SumOfSquares {
            scratch.zero_grads();
        }
        obj.backward(&mut scratch)?;
        if variant == FisherVariant::SumOfSquares {
            for (v, g) in values.iter_mut().zip(scratch.flat_grads()) {
                *v += g * g;
            }
        }
    }
    if variant == FisherVariant::SquaredSum {
        for (v, g) in values.iter_mut().zip(scratch.flat_grads()) {
            *v = g * g;
        }
    }
    Ok(SensitivityScores {
        values,
        method: ScoreMethod::MiFisher,
    })
}

/// Baseline scorers: accumulated cross-entropy gradient magnitude (through a
/// seeded temporary head), parameter magnitude, or seeded random scores.
pub fn score_baseline(
    store: &ParamStore,
    batches: &[Batch],
    method: ScoreMethod,
    seed: u64,
) -> Result<SensitivityScores> {
    let values = match method {
        ScoreMethod::L2Norm => store.flat_values().iter().map(|v| v.abs()).collect(),
        ScoreMethod::Random => {
            let mut rng = rng::stream(seed, "random-scores", &[]);
            (0..store.total_count()).map(|_| rng.random::<f64>()).collect()
        }
        ScoreMethod::GradMagnitude => {
            if batches.is_empty() {
                return Err(Error::EmptyData("gradient-magnitude batches"));
            }
            let classes = dense_classes(batches.iter().flat_map(|b| b.labels.iter().copied()));
            let fdim = backbone::feature_dim(store).ok_or(Error::EmptyData("backbone parameters"))?;
            let head = temporary_head(fdim, classes.len(), seed)?;
            let mut scratch = backbone::merged(store, &head)?;
            scratch.zero_grads();
            for batch in batches {
                let targets: Vec<usize> = batch
                    .labels
                    .iter()
                    .map(|y| classes.binary_search(y).expect("collected label"))
                    .collect();
                let mut g = ComputeGraph::new();
                let x = g.input(0);
                let f = backbone::forward(&mut g, store, x, true);
                let w = g.frozen_param("head.weight");
                let b = g.frozen_param("head.bias");
                let z = g.matmul(f, w);
                let logits = g.add(z, b);
                let loss = cross_entropy(&mut g, logits, &targets, classes.len());
                g.evaluate(&scratch, std::slice::from_ref(&batch.samples))?;
                g.backward(loss, &mut scratch)?;
            }
            let mut grads = scratch.flat_grads();
            grads.truncate(store.total_count());
            grads.iter().map(|g| g.abs()).collect()
        }
        ScoreMethod::MiFisher => {
            return Err(Error::UnknownMethod(
                "mi_fisher is not a baseline scorer; use accumulate_mi_fisher".into(),
            ))
        }
    };
    Ok(SensitivityScores { values, method })
}

/// The selected parameter set `M`: strictly increasing global indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    indices: Vec<usize>,
    k_percent: f64,
    total: usize,
}

impl Mask {
    /// A mask over `total` parameters. Indices are sorted and deduplicated.
    pub fn from_indices(mut indices: Vec<usize>, k_percent: f64, total: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= total {
                return Err(Error::Index {
                    index: last,
                    size: total,
                });
            }
        }
        Ok(Self {
            indices,
            k_percent,
            total,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn k_percent(&self) -> f64 {
        self.k_percent
    }

    /// |θ| the mask was selected from.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Text form: a `k=<value> n=<total>` header, then one index per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("k={} n={}\n", self.k_percent, self.total);
        for i in &self.indices {
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty mask file".into()))?;
        let mut k = None;
        let mut n = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("k", v)) => k = v.parse::<f64>().ok(),
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                _ => return Err(Error::Config(format!("bad mask header field '{field}'"))),
            }
        }
        let (k, n) = k
            .zip(n)
            .ok_or_else(|| Error::Config(format!("bad mask header '{header}'")))?;
        let indices = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad mask index '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(indices, k, n)
    }
}

/// Indices of the `⌊k% · |θ|⌋` highest scores; ties go to the lower index.
pub fn select_top_k(scores: &SensitivityScores, k_percent: f64) -> Result<Mask> {
    check_percent("k_percent", k_percent)?;
    let n = scores.values.len();
    let count = floor_percent(k_percent, n);
    let v = &scores.values;
    let order = |a: &usize, b: &usize| v[*b].total_cmp(&v[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..n).collect();
    if count > 0 && count < n {
        idx.select_nth_unstable_by(count - 1, order);
    }
    idx.truncate(count);
    idx.sort_unstable();
    Ok(Mask {
        indices: idx,
        k_percent,
        total: n,
    })
}

/// The subset `M'` of a mask that is actually updated for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    kept: Vec<usize>,
    d_percent: f64,
    batch_seed: u64,
}

impl DropoutMask {
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn d_percent(&self) -> f64 {
        self.d_percent
    }

    pub fn batch_seed(&self) -> u64 {
        self.batch_seed
    }
}

/// Drops exactly `⌊d% · |M|⌋` uniformly chosen mask entries: a Fisher–Yates
/// pass under `batch_seed` picks the dropped prefix, the rest are kept.
pub fn sample_dropout(mask: &Mask, d_percent: f64, batch_seed: u64) -> Result<DropoutMask> {
    check_percent("d_percent", d_percent)?;
    let m = mask.len();
    let drop = floor_percent(d_percent, m);
    let mut pool = mask.indices.clone();
    let mut rng = rng::stream(batch_seed, "gradient-dropout", &[]);
    for i in 0..drop {
        let j = rng.random_range(i..m);
        pool.swap(i, j);
    }
    let mut kept = pool.split_off(drop);
    kept.sort_unstable();
    Ok(DropoutMask {
        kept,
        d_percent,
        batch_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};
    use crate::numerics::Tensor;

    fn scores(v: &[f64]) -> SensitivityScores {
        SensitivityScores {
            values: v.to_vec(),
            method: ScoreMethod::MiFisher,
        }
    }

    #[test]
    fn floor_percent_is_exact() {
        assert_eq!(floor_percent(5.0, 1_000_000), 50_000);
        assert_eq!(floor_percent(0.1, 1000), 1);
        assert_eq!(floor_percent(0.1, 999), 0);
        assert_eq!(floor_percent(90.0, 200), 180);
        assert_eq!(floor_percent(100.0, 7), 7);
        assert_eq!(floor_percent(33.3, 10), 3);
        assert_eq!(floor_percent(0.0, 10), 0);
    }

    #[test]
    fn top_half() {
        let m = select_top_k(&scores(&[0.1, 0.9, 0.5, 0.7]), 50.0).unwrap();
        assert_eq!(m.indices(), &[1, 3]);
    }

    #[test]
    fn full_selection() {
        let m = select_top_k(&scores(&[0.1, 0.9, 0.5]), 100.0).unwrap();
        assert_eq!(m.indices(), &[0, 1, 2]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = select_top_k(&scores(&[0.5, 0.5, 0.1, 0.0]), 25.0).unwrap();
        assert_eq!(m.indices(), &[0]);
    }

    #[test]
    fn out_of_range_percent_rejected() {
        assert!(select_top_k(&scores(&[1.0]), 150.0).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let m = Mask::from_indices(vec![2, 5, 9, 11], 5.0, 20).unwrap();
        assert_eq!(sample_dropout(&m, 0.0, 1).unwrap().kept(), m.indices());
        assert!(sample_dropout(&m, 100.0, 1).unwrap().is_empty());
    }

    #[test]
    fn dropout_keeps_exact_count() {
        let m = Mask::from_indices((0..200).map(|i| i * 3).collect(), 5.0, 600).unwrap();
        for seed in 0..1000 {
            let d = sample_dropout(&m, 90.0, seed).unwrap();
            assert_eq!(d.len(), 20);
            assert!(d.kept().windows(2).all(|w| w[0] < w[1]));
            assert!(d.kept().iter().all(|i| m.indices().binary_search(i).is_ok()));
        }
    }

    #[test]
    fn l2_and_random_scores() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![3.0, -4.0, 0.0])).unwrap();
        let s = score_baseline(&store, &[], ScoreMethod::L2Norm, 0).unwrap();
        assert_eq!(s.values, vec![3.0, 4.0, 0.0]);
        let r1 = score_baseline(&store, &[], ScoreMethod::Random, 8).unwrap();
        let r2 = score_baseline(&store, &[], ScoreMethod::Random, 8).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn unknown_method_names_fail() {
        assert!(matches!("fisher".parse::<ScoreMethod>(), Err(Error::UnknownMethod(_))));
        assert_eq!(
            "grad_magnitude".parse::<ScoreMethod>().unwrap(),
            ScoreMethod::GradMagnitude
        );
    }

    #[test]
    fn grad_magnitude_of_constant_network_is_zero() {
        let cfg = BackboneConfig {
            input_dim: 2,
            hidden_dims: vec![3],
            feature_dim: 2,
            seed: 0,
        };
        let mut store = init_backbone(&cfg).unwrap();
        for e in store.clone().entries() {
            store.set(e.name(), Tensor::zeros(e.value().shape())).unwrap();
        }
        // Zero inputs and zero weights: every backbone gradient vanishes.
        let batch = Batch::new(Tensor::zeros(&[4, 2]), vec![0, 1, 0, 1]).unwrap();
        let s = score_baseline(&store, &[batch], ScoreMethod::GradMagnitude, 3).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        assert_eq!(s.values.len(), store.total_count());
    }

    #[test]
    fn mask_text_round_trip_and_header() {
        let m = Mask::from_indices(vec![4, 1, 9], 5.0, 10).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("k=5 n=10\n1\n4\n9\n"));
        assert_eq!(Mask::from_text(&text).unwrap(), m);
        assert!(Mask::from_text("k=5 n=3\n7\n").is_err());
    }
}
