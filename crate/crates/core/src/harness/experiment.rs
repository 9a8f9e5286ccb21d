//! Experiment grids over a shared synthetic stream.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, MetricTable};
use super::stream::{make_synthetic_stream, StreamConfig, TaskStream};
use crate::backbone::{self, init_backbone, pretrain, BackboneConfig};
use crate::hosts::{accuracy, fft_finetune, LinearHead, PrototypeStore};
use crate::mist::{run_task, AdaptLoss, HostMethod, MistConfig, PreAdaptReport};
use crate::numerics::ParamStore;
use crate::rng::{derive_seed, tag};
use crate::sparsity::ScoreMethod;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Compare,
    Ablation,
    SweepK,
    SweepD,
    BatchSize,
    Erosion,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::Compare,
        Protocol::Ablation,
        Protocol::SweepK,
        Protocol::SweepD,
        Protocol::BatchSize,
        Protocol::Erosion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Compare => "compare",
            Protocol::Ablation => "ablation",
            Protocol::SweepK => "sweep_k",
            Protocol::SweepD => "sweep_d",
            Protocol::BatchSize => "batch_size",
            Protocol::Erosion => "erosion",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostKind {
    Prototype,
    Linear { epochs: usize, lr: f64 },
}

impl HostKind {
    fn build(self, feature_dim: usize) -> HostMethod {
        match self {
            HostKind::Prototype => HostMethod::Prototype(PrototypeStore::new(feature_dim)),
            HostKind::Linear { epochs, lr } => HostMethod::Linear {
                head: LinearHead::new(feature_dim),
                epochs,
                lr,
            },
        }
    }
}

/// What happens to the backbone before the host sees each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    None,
    Sparse(MistConfig),
    Fft { epochs: usize, lr: f64, batch_size: usize },
}

/// One named grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub adaptation: Adaptation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub backbone: BackboneConfig,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub mist: MistConfig,
    pub fft_epochs: usize,
    pub fft_lr: f64,
    pub host: HostKind,
    pub master_seed: u64,
    pub num_seeds: usize,
    /// Grid points evaluated concurrently.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain_epochs: 30,
            pretrain_lr: 0.05,
            pretrain_batch_size: 32,
            mist: MistConfig::default(),
            fft_epochs: 20,
            fft_lr: 1e-4,
            host: HostKind::Prototype,
            master_seed: 0,
            num_seeds: 1,
            jobs: 1,
        }
    }
}

/// Learning rate shared by every adaptation in the desk-scale preset. The
/// small backbone barely moves at the default `1e-4`.
pub const DESK_LR: f64 = 0.3;

impl ExperimentConfig {
    /// Defaults with [`DESK_LR`] for sparse tuning and full fine-tuning.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.mist.lr = DESK_LR;
        cfg.fft_lr = DESK_LR;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.backbone.validate()?;
        self.mist.validate()?;
        if self.backbone.input_dim != self.stream.input_dim {
            return Err(Error::Config(format!(
                "backbone input_dim {} differs from stream input_dim {}",
                self.backbone.input_dim, self.stream.input_dim
            )));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be at least 1".into()));
        }
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("fft_lr", self.fft_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.pretrain_batch_size == 0 {
            return Err(Error::Config("pretrain_batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed of replicate `index`.
    pub fn replicate_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, &[tag("replicate"), index as u64])
    }

    fn sparse(&self, name: &str, f: impl FnOnce(&mut MistConfig)) -> RunSpec {
        let mut m = self.mist.clone();
        f(&mut m);
        RunSpec {
            name: name.into(),
            adaptation: Adaptation::Sparse(m),
        }
    }

    fn baseline(&self) -> RunSpec {
        RunSpec {
            name: "baseline".into(),
            adaptation: Adaptation::None,
        }
    }

    fn fft(&self) -> RunSpec {
        RunSpec {
            name: "fft".into(),
            adaptation: Adaptation::Fft {
                epochs: self.fft_epochs,
                lr: self.fft_lr,
                batch_size: self.mist.mi_batch_size,
            },
        }
    }

    /// Grid points of a protocol. Tuning-strategy baselines use the
    /// cross-entropy loss on their own top-k selection without dropout.
    pub fn grid(&self, protocol: Protocol) -> Vec<RunSpec> {
        let ce_select = |name: &str, scorer: ScoreMethod| {
            self.sparse(name, |m| {
                m.scorer = scorer;
                m.loss = AdaptLoss::CrossEntropy;
                m.d_percent = 0.0;
            })
        };
        match protocol {
            Protocol::Compare => vec![
                self.baseline(),
                self.sparse("mist", |_| {}),
                ce_select("grad", ScoreMethod::GradMagnitude),
                ce_select("rand", ScoreMethod::Random),
                ce_select("l2", ScoreMethod::L2Norm),
                self.fft(),
            ],
            Protocol::Ablation => vec![
                self.baseline(),
                ce_select("mask_ce", ScoreMethod::MiFisher),
                self.sparse("mask_mi", |m| m.d_percent = 0.0),
                self.sparse("mask_mi_dropout", |_| {}),
            ],
            Protocol::SweepK => [20.0, 10.0, 5.0, 1.0, 0.1]
                .into_iter()
                .map(|k| self.sparse(&format!("k={k}"), |m| m.k_percent = k))
                .collect(),
            Protocol::SweepD => [0.0, 50.0, 80.0, 90.0, 99.0]
                .into_iter()
                .map(|d| self.sparse(&format!("d={d}"), |m| m.d_percent = d))
                .collect(),
            Protocol::BatchSize => [4usize, 32, 64]
                .into_iter()
                .map(|b| self.sparse(&format!("batch={b}"), |m| m.mi_batch_size = b))
                .collect(),
            Protocol::Erosion => vec![self.baseline(), self.sparse("mist", |_| {}), self.fft()],
        }
    }
}

/// Per-batch cost of an adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyCounters {
    /// Scalars updated per mini-batch.
    pub delta_p: f64,
    /// `2 · delta_p` for the update plus an estimate of the loss graph.
    pub update_flops: f64,
    pub batch_time_ms: f64,
}

/// Forward plus backward multiply-adds of the backbone on `rows` inputs.
fn graph_flops(cfg: &BackboneConfig, rows: usize) -> f64 {
    let macs: usize = cfg.layer_dims().iter().map(|(i, o)| i * o).sum();
    6.0 * rows as f64 * macs as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub name: String,
    pub replicate: usize,
    pub seed: u64,
    pub metrics: MetricTable,
    /// Pretrain-domain prototype accuracy before task 1 and after every task.
    pub zero_shot: Vec<f64>,
    pub reports: Vec<PreAdaptReport>,
    pub efficiency: EfficiencyCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub name: String,
    pub replicate: usize,
    pub error: String,
}

/// Means over the successful replicates of one grid point; `None` when
/// every replicate failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub name: String,
    pub runs: usize,
    pub mean_a_last: Option<f64>,
    pub mean_a_bar: Option<f64>,
    pub mean_zero_shot_initial: Option<f64>,
    pub mean_zero_shot_final: Option<f64>,
    pub delta_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub protocol: Protocol,
    pub config: ExperimentConfig,
    pub pretrain_loss: Vec<Vec<f64>>,
    pub runs: Vec<GridRun>,
    pub failures: Vec<GridFailure>,
    pub summary: Vec<GridSummary>,
}

impl RunRecord {
    pub fn summary_for(&self, name: &str) -> Option<&GridSummary> {
        self.summary.iter().find(|s| s.name == name)
    }
}

/// Nearest-prototype accuracy on the held-out pretrain split, with
/// prototypes fitted on the pretrain training split under `store`.
pub fn zero_shot_eval(store: &ParamStore, stream: &TaskStream) -> Result<f64> {
    if stream.pretrain_eval.is_empty() {
        return Err(Error::EmptyData("pretrain evaluation set"));
    }
    let fdim = backbone::feature_dim(store).ok_or(Error::EmptyData("backbone parameters"))?;
    let mut protos = PrototypeStore::new(fdim);
    protos.fit(
        &backbone::embed(store, &stream.pretrain_train.samples)?,
        &stream.pretrain_train.labels,
    )?;
    let pred = protos.predict(&backbone::embed(store, &stream.pretrain_eval.samples)?)?;
    Ok(accuracy(&pred, &stream.pretrain_eval.labels))
}

/// Stream and pretrained backbone of one replicate.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    pub stream: TaskStream,
    pub backbone: ParamStore,
    pub pretrain_loss: Vec<f64>,
}

pub fn prepare_replicate(cfg: &ExperimentConfig, index: usize) -> Result<Replicate> {
    prepare_replicate_with(cfg, index, None)
}

/// Like [`prepare_replicate`], but starts every replicate from `pretrained`
/// instead of pretraining a fresh backbone.
pub fn prepare_replicate_with(
    cfg: &ExperimentConfig,
    index: usize,
    pretrained: Option<&ParamStore>,
) -> Result<Replicate> {
    cfg.validate()?;
    let seed = cfg.replicate_seed(index);
    let stream = make_synthetic_stream(&StreamConfig {
        seed: derive_seed(seed, &[tag("stream")]),
        ..cfg.stream.clone()
    })?;
    if let Some(store) = pretrained {
        let found = backbone::input_dim(store).ok_or(Error::EmptyData("backbone parameters"))?;
        if found != cfg.stream.input_dim {
            return Err(Error::Dimension {
                expected: cfg.stream.input_dim,
                found,
            });
        }
        return Ok(Replicate {
            index,
            seed,
            stream,
            backbone: store.clone(),
            pretrain_loss: Vec::new(),
        });
    }
    let mut store = init_backbone(&BackboneConfig {
        seed: derive_seed(seed, &[tag("backbone")]),
        ..cfg.backbone.clone()
    })?;
    let batches = stream
        .pretrain_train
        .minibatches(cfg.pretrain_batch_size, derive_seed(seed, &[tag("pretrain-order")]));
    let report = pretrain(
        &mut store,
        &batches,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        derive_seed(seed, &[tag("pretrain-head")]),
    )?;
    Ok(Replicate {
        index,
        seed,
        stream,
        backbone: store,
        pretrain_loss: report.loss_trace,
    })
}

/// Runs one grid point through every task of a replicate.
pub fn run_continual(cfg: &ExperimentConfig, rep: &Replicate, spec: &RunSpec) -> Result<GridRun> {
    let mut store = rep.backbone.clone();
    let fdim = backbone::feature_dim(&store).ok_or(Error::EmptyData("backbone parameters"))?;
    let mut host = cfg.host.build(fdim);
    // Every grid point of a replicate shares its random streams, so identical
    // adaptations give identical runs whatever their names.
    let run_seed = derive_seed(rep.seed, &[tag("run")]);
    let mut r = Vec::with_capacity(rep.stream.num_tasks());
    let mut zero_shot = vec![zero_shot_eval(&store, &rep.stream)?];
    let mut reports = Vec::new();
    let mut time_ms = 0.0;
    let mut batches = 0usize;
    for (t, task) in rep.stream.tasks.iter().enumerate() {
        match &spec.adaptation {
            Adaptation::Sparse(m) => {
                let m = MistConfig {
                    seed: run_seed,
                    ..m.clone()
                };
                let res = run_task(&mut store, &task.train, t, &m, &mut host)?;
                time_ms += res.pre_adapt.wall_time_ms;
                batches += res.pre_adapt.batches;
                reports.push(res.pre_adapt);
            }
            Adaptation::Fft { epochs, lr, batch_size } => {
                let start = std::time::Instant::now();
                let trace = fft_finetune(
                    &mut store,
                    &task.train,
                    *epochs,
                    *lr,
                    *batch_size,
                    derive_seed(run_seed, &[t as u64]),
                )?;
                time_ms += start.elapsed().as_secs_f64() * 1e3;
                batches += epochs * task.train.len().div_ceil((*batch_size).max(1)).max(1);
                let _ = trace;
                host.fit(&store, &task.train, derive_seed(run_seed, &[tag("host"), t as u64]))?;
            }
            Adaptation::None => {
                host.fit(&store, &task.train, derive_seed(run_seed, &[tag("host"), t as u64]))?;
            }
        }
        let row = rep.stream.tasks[..=t]
            .iter()
            .map(|seen| {
                let pred = host.predict(&store, &seen.test.samples)?;
                Ok(accuracy(&pred, &seen.test.labels))
            })
            .collect::<Result<Vec<f64>>>()?;
        r.push(row);
        zero_shot.push(zero_shot_eval(&store, &rep.stream)?);
    }
    let efficiency = match &spec.adaptation {
        Adaptation::None => EfficiencyCounters {
            delta_p: 0.0,
            update_flops: 0.0,
            batch_time_ms: 0.0,
        },
        Adaptation::Sparse(m) => {
            let n = reports.len().max(1) as f64;
            let delta_p = reports.iter().map(|r| r.scalars_updated_per_batch).sum::<f64>() / n;
            EfficiencyCounters {
                delta_p,
                update_flops: 2.0 * delta_p + graph_flops(&cfg.backbone, 2 * m.mi_batch_size),
                batch_time_ms: time_ms / batches.max(1) as f64,
            }
        }
        Adaptation::Fft { batch_size, .. } => {
            let classes = cfg.stream.classes_per_task;
            let delta_p = (store.total_count() + fdim * classes + classes) as f64;
            EfficiencyCounters {
                delta_p,
                update_flops: 2.0 * delta_p + graph_flops(&cfg.backbone, *batch_size),
                batch_time_ms: time_ms / batches.max(1) as f64,
            }
        }
    };
    Ok(GridRun {
        name: spec.name.clone(),
        replicate: rep.index,
        seed: rep.seed,
        metrics: compute_metrics(&r)?,
        zero_shot,
        reports,
        efficiency,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs `specs` on every replicate. Failed grid points are recorded and
/// skipped.
pub fn run_grid(protocol: Protocol, cfg: &ExperimentConfig, specs: &[RunSpec]) -> Result<RunRecord> {
    run_grid_with(protocol, cfg, specs, None)
}

/// [`run_grid`] with every replicate starting from `pretrained`.
pub fn run_grid_with(
    protocol: Protocol,
    cfg: &ExperimentConfig,
    specs: &[RunSpec],
    pretrained: Option<&ParamStore>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let replicates = (0..cfg.num_seeds)
        .map(|i| prepare_replicate_with(cfg, i, pretrained))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(usize, usize)> = (0..replicates.len())
        .flat_map(|r| (0..specs.len()).map(move |s| (r, s)))
        .collect();
    let jobs = cfg.jobs.max(1);
    let mut results: Vec<Option<Result<GridRun>>> = (0..points.len()).map(|_| None).collect();
    for (chunk_points, chunk_results) in points.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk_points
                .iter()
                .map(|&(r, s)| {
                    let rep = &replicates[r];
                    let spec = &specs[s];
                    scope.spawn(move || run_continual(cfg, rep, spec))
                })
                .collect();
            for (slot, h) in chunk_results.iter_mut().zip(handles) {
                *slot = Some(
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Config("grid point panicked".into()))),
                );
            }
        });
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (&(r, s), res) in points.iter().zip(results) {
        match res.expect("every point evaluated") {
            Ok(run) => runs.push(run),
            Err(e) => failures.push(GridFailure {
                name: specs[s].name.clone(),
                replicate: r,
                error: e.to_string(),
            }),
        }
    }
    let summary = specs
        .iter()
        .map(|spec| {
            let of = || runs.iter().filter(|g| g.name == spec.name);
            GridSummary {
                name: spec.name.clone(),
                runs: of().count(),
                mean_a_last: mean(of().map(|g| g.metrics.a_last)),
                mean_a_bar: mean(of().map(|g| g.metrics.a_bar)),
                mean_zero_shot_initial: mean(of().map(|g| g.zero_shot[0])),
                mean_zero_shot_final: mean(of().map(|g| *g.zero_shot.last().expect("initial entry"))),
                delta_p: mean(of().map(|g| g.efficiency.delta_p)),
            }
        })
        .collect();
    Ok(RunRecord {
        protocol,
        config: cfg.clone(),
        pretrain_loss: replicates.into_iter().map(|r| r.pretrain_loss).collect(),
        runs,
        failures,
        summary,
    })
}

/// Runs the grid of `protocol`.
pub fn run_experiment(protocol: Protocol, cfg: &ExperimentConfig) -> Result<RunRecord> {
    run_grid(protocol, cfg, &cfg.grid(protocol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            stream: StreamConfig {
                num_tasks: 2,
                classes_per_task: 2,
                samples_per_class: 12,
                test_samples_per_class: 6,
                input_dim: 12,
                signal_dim: 3,
                nuisance_dim: 2,
                pretrain_classes: 3,
                pretrain_samples_per_class: 12,
                ..StreamConfig::default()
            },
            backbone: BackboneConfig {
                input_dim: 12,
                hidden_dims: vec![10],
                feature_dim: 6,
                seed: 0,
            },
            pretrain_epochs: 2,
            fft_epochs: 2,
            fft_lr: 0.1,
            ..ExperimentConfig::default()
        };
        cfg.mist.epochs = 2;
        cfg.mist.lr = 0.1;
        cfg.mist.mi_batch_size = 8;
        cfg.mist.k_percent = 20.0;
        cfg.mist.d_percent = 50.0;
        cfg
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        assert!("tables".parse::<Protocol>().is_err());
    }

    #[test]
    fn grid_sizes() {
        let cfg = ExperimentConfig::default();
        let sizes: Vec<usize> = Protocol::ALL.iter().map(|&p| cfg.grid(p).len()).collect();
        assert_eq!(sizes, vec![6, 4, 5, 5, 3, 3]);
        let names: Vec<String> = cfg.grid(Protocol::SweepD).into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["d=0", "d=50", "d=80", "d=90", "d=99"]);
    }

    #[test]
    fn runs_are_reproducible_and_well_formed() {
        let cfg = tiny();
        let a = run_experiment(Protocol::Erosion, &cfg).unwrap();
        let b = run_experiment(Protocol::Erosion, &cfg).unwrap();
        assert!(a.failures.is_empty());
        assert_eq!(a.runs.len(), 3);
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.metrics, y.metrics);
            assert_eq!(x.zero_shot, y.zero_shot);
            assert_eq!(x.zero_shot.len(), 3);
            assert_eq!(x.metrics.r.len(), 2);
        }
        let total = cfg.backbone.param_count();
        assert_eq!(a.summary_for("baseline").unwrap().delta_p, Some(0.0));
        assert_eq!(
            a.summary_for("mist").unwrap().delta_p,
            Some(cfg.mist.updates_per_batch(total) as f64)
        );
    }

    #[test]
    fn failed_points_are_recorded() {
        let cfg = tiny();
        let mut bad = cfg.mist.clone();
        bad.lr = -1.0;
        let specs = vec![
            RunSpec {
                name: "baseline".into(),
                adaptation: Adaptation::None,
            },
            RunSpec {
                name: "broken".into(),
                adaptation: Adaptation::Sparse(bad),
            },
        ];
        let rec = run_grid(Protocol::Compare, &cfg, &specs).unwrap();
        assert_eq!(rec.runs.len(), 1);
        assert_eq!(rec.failures.len(), 1);
        assert_eq!(rec.failures[0].name, "broken");
        assert_eq!(rec.summary_for("broken").unwrap().mean_a_last, None);
    }

    #[test]
    fn pretrained_backbone_is_used_as_is() {
        let cfg = tiny();
        let rep = prepare_replicate(&cfg, 0).unwrap();
        let again = prepare_replicate_with(&cfg, 1, Some(&rep.backbone)).unwrap();
        assert!(again.backbone.bit_identical(&rep.backbone));
        assert!(again.pretrain_loss.is_empty());
        let wrong = init_backbone(&BackboneConfig {
            input_dim: 5,
            ..cfg.backbone.clone()
        })
        .unwrap();
        assert!(prepare_replicate_with(&cfg, 0, Some(&wrong)).is_err());
    }
}
