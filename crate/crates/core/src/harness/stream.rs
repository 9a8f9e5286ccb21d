//! Synthetic class-incremental streams with a controllable domain shift.
//!
//! Samples are `x = μ_c + ε + N n`, with unit isotropic noise `ε` and a
//! nuisance component `n ~ N(0, σ_n² I)` along a few nuisance directions
//! `N`. Pretraining classes live in a fixed signal subspace. Continual tasks
//! draw new class means there too and then pass every sample through a
//! rotation that turns the signal and nuisance directions towards unused
//! directions by `shift_level · π/8` (capped at π/2), followed by a scaling
//! of the nuisance strength by `1 + shift_level/2`. `shift_level = 0`
//! reproduces the pretraining regime.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mi_objective::Batch;
use crate::numerics::Tensor;
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub input_dim: usize,
    pub shift_level: f64,
    /// Norm of every class mean.
    pub separation: f64,
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    pub nuisance_std: f64,
    pub pretrain_classes: usize,
    pub pretrain_samples_per_class: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 100,
            test_samples_per_class: 50,
            input_dim: 64,
            shift_level: 2.0,
            separation: 5.0,
            signal_dim: 16,
            nuisance_dim: 8,
            nuisance_std: 3.0,
            pretrain_classes: 30,
            pretrain_samples_per_class: 100,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_tasks", self.num_tasks),
            ("classes_per_task", self.classes_per_task),
            ("samples_per_class", self.samples_per_class),
            ("test_samples_per_class", self.test_samples_per_class),
            ("input_dim", self.input_dim),
            ("signal_dim", self.signal_dim),
            ("pretrain_classes", self.pretrain_classes),
            ("pretrain_samples_per_class", self.pretrain_samples_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if 2 * (self.signal_dim + self.nuisance_dim) > self.input_dim {
            return Err(Error::Config(format!(
                "input_dim {} too small for signal_dim {} and nuisance_dim {}",
                self.input_dim, self.signal_dim, self.nuisance_dim
            )));
        }
        for (name, v) in [
            ("shift_level", self.shift_level),
            ("separation", self.separation),
            ("nuisance_std", self.nuisance_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub classes: Vec<usize>,
    pub train: Batch,
    pub test: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<TaskSplit>,
    pub pretrain_train: Batch,
    pub pretrain_eval: Batch,
    pub shift_level: f64,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn pretrain_classes(&self) -> Vec<usize> {
        crate::backbone::dense_classes(self.pretrain_train.labels.iter().copied())
    }
}

/// Orthonormal `d × d` basis (columns) from Gram–Schmidt on Gaussian vectors.
fn random_basis(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

struct Domain {
    signal: Vec<Vec<f64>>,
    nuisance: Vec<Vec<f64>>,
    nuisance_std: f64,
}

fn combine(a: &[f64], b: &[f64], ca: f64, cb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect()
}

fn class_mean(domain: &Domain, separation: f64, rng: &mut Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..domain.signal.len()).map(|_| StandardNormal.sample(rng)).collect();
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let d = domain.signal[0].len();
    let mut m = vec![0.0; d];
    for (coef, dir) in z.iter().zip(&domain.signal) {
        for (mi, di) in m.iter_mut().zip(dir) {
            *mi += separation * coef / zn * di;
        }
    }
    m
}

fn sample_class(domain: &Domain, mean: &[f64], count: usize, rng: &mut Rng, out: &mut Vec<Vec<f64>>) {
    let nuisance = Normal::new(0.0, domain.nuisance_std.max(0.0)).expect("finite std");
    for _ in 0..count {
        let mut x: Vec<f64> = mean
            .iter()
            .map(|m| m + Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        if domain.nuisance_std > 0.0 {
            for dir in &domain.nuisance {
                let a = nuisance.sample(rng);
                for (xi, di) in x.iter_mut().zip(dir) {
                    *xi += a * di;
                }
            }
        }
        out.push(x);
    }
}

fn to_batch(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Batch> {
    Batch::new(Tensor::from_rows(&rows)?, labels)
}

/// Builds the pretraining split and `num_tasks` disjoint-label tasks.
pub fn make_synthetic_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let mut brng = rng::stream(cfg.seed, "stream-basis", &[]);
    let basis = random_basis(cfg.input_dim, &mut brng);
    let (s, n) = (cfg.signal_dim, cfg.nuisance_dim);
    let pre = Domain {
        signal: basis[..s].to_vec(),
        nuisance: basis[s..s + n].to_vec(),
        nuisance_std: cfg.nuisance_std,
    };
    let angle = (cfg.shift_level * std::f64::consts::PI / 8.0).min(std::f64::consts::FRAC_PI_2);
    let (c, sn) = (angle.cos(), angle.sin());
    let fresh = &basis[s + n..];
    let task_domain = Domain {
        signal: (0..s).map(|i| combine(&basis[i], &fresh[i], c, sn)).collect(),
        nuisance: (0..n).map(|i| combine(&basis[s + i], &fresh[s + i], c, sn)).collect(),
        nuisance_std: cfg.nuisance_std * (1.0 + cfg.shift_level / 2.0),
    };

    let mut prng = rng::stream(cfg.seed, "stream-pretrain", &[]);
    let (mut tr, mut trl, mut ev, mut evl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for class in 0..cfg.pretrain_classes {
        let mean = class_mean(&pre, cfg.separation, &mut prng);
        sample_class(&pre, &mean, cfg.pretrain_samples_per_class, &mut prng, &mut tr);
        trl.extend(std::iter::repeat_n(class, cfg.pretrain_samples_per_class));
        sample_class(&pre, &mean, cfg.test_samples_per_class, &mut prng, &mut ev);
        evl.extend(std::iter::repeat_n(class, cfg.test_samples_per_class));
    }
    let pretrain_train = to_batch(tr, trl)?;
    let pretrain_eval = to_batch(ev, evl)?;

    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for t in 0..cfg.num_tasks {
        let mut trng = rng::stream(cfg.seed, "stream-task", &[t as u64]);
        let (mut tr, mut trl, mut te, mut tel) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut classes = Vec::with_capacity(cfg.classes_per_task);
        for k in 0..cfg.classes_per_task {
            let class = cfg.pretrain_classes + t * cfg.classes_per_task + k;
            classes.push(class);
            let mean = class_mean(&task_domain, cfg.separation, &mut trng);
            sample_class(&task_domain, &mean, cfg.samples_per_class, &mut trng, &mut tr);
            trl.extend(std::iter::repeat_n(class, cfg.samples_per_class));
            sample_class(&task_domain, &mean, cfg.test_samples_per_class, &mut trng, &mut te);
            tel.extend(std::iter::repeat_n(class, cfg.test_samples_per_class));
        }
        tasks.push(TaskSplit {
            classes,
            train: to_batch(tr, trl)?,
            test: to_batch(te, tel)?,
        });
    }
    Ok(TaskStream {
        tasks,
        pretrain_train,
        pretrain_eval,
        shift_level: cfg.shift_level,
    })
}
