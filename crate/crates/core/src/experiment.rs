//! Teacher-student protocol: a frozen teacher labels Gaussian inputs, and
//! pairs of students (conventional and spectral first layer, identical
//! effective initial weights) are trained to regress it across a sweep of
//! first-layer widths.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::analysis::{estimate_core_size, relevance, RelevanceVector};
use crate::error::{Error, Result};
use crate::layers::{Activation, DenseLayer, Layer, SpectralLayer};
use crate::numerics::{glorot_uniform, sample_standard_gaussian, Matrix, SeededRng};
use crate::training::{forward, mse, train, Network, TrainConfig, TrainHistory};

pub use crate::training::Dataset;

/// RNG streams. Each consumer draws from its own stream of its seed.
pub mod streams {
    pub const TEACHER: u64 = 10;
    pub const TRAIN_DATA: u64 = 11;
    pub const TEST_DATA: u64 = 12;
    pub const STUDENT_INIT: u64 = 20;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            input_dim: 10,
            hidden: vec![20, 20],
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("teacher input_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "teacher hidden sizes must be non-empty and positive, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }

    /// Width of the first hidden layer, the reference size for pruning.
    pub fn first_hidden(&self) -> usize {
        self.hidden[0]
    }
}

/// Glorot-initialized hidden layers followed by a fixed all-ones output
/// layer, so the output sums the last hidden activations.
pub fn build_teacher(spec: &TeacherSpec) -> Result<Network> {
    spec.validate()?;
    let mut rng = SeededRng::with_stream(spec.seed, streams::TEACHER);
    let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
    let mut fan_in = spec.input_dim;
    for &width in &spec.hidden {
        layers.push(Layer::Dense(DenseLayer::new(glorot_uniform(&mut rng, fan_in, width)?)));
        fan_in = width;
    }
    layers.push(Layer::Dense(DenseLayer::new(Matrix::from_fn(1, fan_in, |_, _| 1.0))));
    Network::new(layers, spec.activation)
}

/// `n` standard Gaussian inputs labelled exactly by the teacher.
pub fn generate_dataset(teacher: &Network, n: usize, rng: &mut SeededRng) -> Result<Dataset> {
    let inputs = sample_standard_gaussian(rng, teacher.input_dim(), n)?;
    let targets = (0..n)
        .map(|i| forward(teacher, inputs.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Parametrization {
    Standard,
    Spectral,
}

impl Parametrization {
    pub const BOTH: [Parametrization; 2] = [Parametrization::Standard, Parametrization::Spectral];

    pub fn name(self) -> &'static str {
        match self {
            Parametrization::Standard => "standard",
            Parametrization::Spectral => "spectral",
        }
    }
}

impl fmt::Display for Parametrization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Parametrization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Parametrization::Standard),
            "spectral" => Ok(Parametrization::Spectral),
            other => Err(Error::InvalidArgument(format!(
                "unknown parametrization `{other}`"
            ))),
        }
    }
}

/// Student of shape `input_dim-h-second_hidden-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentSpec {
    pub input_dim: usize,
    pub h: usize,
    pub second_hidden: usize,
    pub parametrization: Parametrization,
    pub activation: Activation,
    pub seed: u64,
}

impl StudentSpec {
    pub fn new(h: usize, parametrization: Parametrization, seed: u64) -> Self {
        StudentSpec {
            input_dim: 10,
            h,
            second_hidden: 20,
            parametrization,
            activation: Activation::Tanh,
            seed,
        }
    }
}

/// Conventional and spectral students sharing one set of initial links: the
/// first layer draws `w` once, the spectral twin uses `lambda_out = 1`,
/// `lambda_in = 0` (frozen) and `phi = -w`; the two later layers are shared.
pub fn build_student_pair(spec: &StudentSpec) -> Result<(Network, Network)> {
    if spec.h == 0 || spec.second_hidden == 0 || spec.input_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "student dimensions must be positive: {}-{}-{}-1",
            spec.input_dim, spec.h, spec.second_hidden
        )));
    }
    let mut rng = SeededRng::with_stream(spec.seed, streams::STUDENT_INIT);
    let w1 = glorot_uniform(&mut rng, spec.input_dim, spec.h)?;
    let w2 = glorot_uniform(&mut rng, spec.h, spec.second_hidden)?;
    let w3 = glorot_uniform(&mut rng, spec.second_hidden, 1)?;
    let tail = [
        Layer::Dense(DenseLayer::new(w2)),
        Layer::Dense(DenseLayer::new(w3)),
    ];
    let spectral_first = Layer::Spectral(SpectralLayer::from_dense(&w1));
    let standard = Network::new(
        std::iter::once(Layer::Dense(DenseLayer::new(w1)))
            .chain(tail.iter().cloned())
            .collect(),
        spec.activation,
    )?;
    let spectral = Network::new(
        std::iter::once(spectral_first).chain(tail).collect(),
        spec.activation,
    )?;
    Ok((standard, spectral))
}

/// Builds the student named by `spec.parametrization`.
pub fn build_student(spec: &StudentSpec) -> Result<Network> {
    let (standard, spectral) = build_student_pair(spec)?;
    Ok(match spec.parametrization {
        Parametrization::Standard => standard,
        Parametrization::Spectral => spectral,
    })
}

/// Small random network and batch for gradient checks. Layers are Glorot
/// initialized; with the spectral parametrization the first layer gets
/// `lambda_out` scattered around 1 so that no eigenvalue gradient vanishes by
/// symmetry. Targets are independent Gaussians rather than teacher outputs.
pub fn gradient_probe(
    parametrization: Parametrization,
    activation: Activation,
    dims: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<(Network, Dataset)> {
    if dims.len() < 2 || batch_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "gradient probe needs at least two dims and a non-empty batch, got {dims:?} / {batch_size}"
        )));
    }
    let mut rng = SeededRng::with_stream(seed, streams::STUDENT_INIT);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (k, d) in dims.windows(2).enumerate() {
        let w = glorot_uniform(&mut rng, d[0], d[1])?;
        if k == 0 && parametrization == Parametrization::Spectral {
            let mut s = SpectralLayer::from_dense(&w);
            for l in s.lambda_out.iter_mut() {
                *l += 0.3 * rng.standard_normal();
            }
            layers.push(Layer::Spectral(s));
        } else {
            layers.push(Layer::Dense(DenseLayer::new(w)));
        }
    }
    let net = Network::new(layers, activation)?;
    let mut data_rng = SeededRng::with_stream(seed, streams::TRAIN_DATA);
    let inputs = sample_standard_gaussian(&mut data_rng, dims[0], batch_size)?;
    let targets = (0..batch_size).map(|_| data_rng.standard_normal()).collect();
    Ok((net, Dataset::new(inputs, targets)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrialKey {
    pub h: usize,
    pub parametrization: Parametrization,
    pub trial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub key: TrialKey,
    pub train_mse: f64,
    pub test_mse: f64,
    pub relevance: RelevanceVector,
    pub core_size: usize,
    pub model: Network,
    pub history: TrainHistory,
}

/// Trains one student and scores it. `train_cfg.seed` drives batch shuffling;
/// `spec.seed` drives initialization.
pub fn run_trial(
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &StudentSpec,
    trial: usize,
    train_cfg: &TrainConfig,
    tau: f64,
) -> Result<TrialResult> {
    let student = build_student(spec)?;
    let (model, history) = train(student, train_set, Some(test_set), train_cfg)?;
    let train_mse = mse(&model, train_set)?;
    let test_mse = mse(&model, test_set)?;
    let relevance = relevance(&model.layers[0]);
    let core_size = estimate_core_size(&relevance, tau)?;
    Ok(TrialResult {
        key: TrialKey {
            h: spec.h,
            parametrization: spec.parametrization,
            trial,
        },
        train_mse,
        test_mse,
        relevance,
        core_size,
        model,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub teacher: TeacherSpec,
    pub h_values: Vec<usize>,
    pub second_hidden: usize,
    pub trials_per_h: usize,
    pub parametrizations: Vec<Parametrization>,
    /// Optimizer and regularization settings; `batch_size` and `seed` are
    /// replaced per trial.
    pub train: TrainConfig,
    pub batch_size_spectral: usize,
    pub batch_size_standard: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
    /// Trial `t` uses seed `base_seed + t`.
    pub base_seed: u64,
    pub tau: f64,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            teacher: TeacherSpec::default(),
            h_values: vec![10, 20, 40, 60, 100, 200, 500, 700, 1000],
            second_hidden: 20,
            trials_per_h: 30,
            parametrizations: Parametrization::BOTH.to_vec(),
            train: TrainConfig::default(),
            batch_size_spectral: 300,
            batch_size_standard: 500,
            train_size: 13_000,
            test_size: 1_000,
            data_seed: 1,
            base_seed: 1_000,
            tau: 0.02,
            threads: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if self.h_values.is_empty() || self.h_values.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "h values must be non-empty and positive, got {:?}",
                self.h_values
            )));
        }
        if self.second_hidden == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidArgument(
                "second_hidden, train_size and test_size must be positive".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        for p in &self.parametrizations {
            let mut cfg = self.train.clone();
            cfg.batch_size = self.batch_size(*p);
            cfg.validate(self.train_size)?;
        }
        Ok(())
    }

    pub fn batch_size(&self, p: Parametrization) -> usize {
        match p {
            Parametrization::Spectral => self.batch_size_spectral,
            Parametrization::Standard => self.batch_size_standard,
        }
    }

    pub fn keys(&self) -> Vec<TrialKey> {
        let mut keys = Vec::new();
        for &h in &self.h_values {
            for trial in 0..self.trials_per_h {
                for &parametrization in &self.parametrizations {
                    keys.push(TrialKey {
                        h,
                        parametrization,
                        trial,
                    });
                }
            }
        }
        keys
    }

    pub fn student_spec(&self, key: &TrialKey) -> StudentSpec {
        StudentSpec {
            input_dim: self.teacher.input_dim,
            h: key.h,
            second_hidden: self.second_hidden,
            parametrization: key.parametrization,
            activation: self.teacher.activation,
            seed: self.base_seed.wrapping_add(key.trial as u64),
        }
    }

    pub fn train_config(&self, key: &TrialKey) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size(key.parametrization),
            seed: self.base_seed.wrapping_add(key.trial as u64),
            ..self.train.clone()
        }
    }
}

/// The fixed teacher and the datasets shared by every trial of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepData {
    pub teacher: Network,
    pub train: Dataset,
    pub test: Dataset,
}

impl SweepData {
    pub fn generate(cfg: &SweepConfig) -> Result<Self> {
        Self::from_teacher(build_teacher(&cfg.teacher)?, cfg)
    }

    /// Datasets for an existing teacher, drawn exactly as [`SweepData::generate`] does.
    pub fn from_teacher(teacher: Network, cfg: &SweepConfig) -> Result<Self> {
        let train = generate_dataset(
            &teacher,
            cfg.train_size,
            &mut SeededRng::with_stream(cfg.data_seed, streams::TRAIN_DATA),
        )?;
        let test = test_set(&teacher, cfg)?;
        Ok(SweepData {
            teacher,
            train,
            test,
        })
    }
}

/// The sweep's held-out set for `teacher`, without drawing the training set.
pub fn test_set(teacher: &Network, cfg: &SweepConfig) -> Result<Dataset> {
    generate_dataset(
        teacher,
        cfg.test_size,
        &mut SeededRng::with_stream(cfg.data_seed, streams::TEST_DATA),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub key: TrialKey,
    pub result: Result<TrialResult>,
}

pub fn run_keyed_trial(cfg: &SweepConfig, data: &SweepData, key: TrialKey) -> TrialOutcome {
    let result = run_trial(
        &data.train,
        &data.test,
        &cfg.student_spec(&key),
        key.trial,
        &cfg.train_config(&key),
        cfg.tau,
    );
    TrialOutcome { key, result }
}

/// Runs every `(h, parametrization, trial)` of the sweep against one teacher
/// and one dataset. `on_done` sees each outcome as it completes; the returned
/// outcomes are sorted by key. Failed trials are reported, not fatal.
pub fn run_sweep<F>(cfg: &SweepConfig, data: &SweepData, on_done: F) -> Result<Vec<TrialOutcome>>
where
    F: Fn(&TrialOutcome) + Sync,
{
    cfg.validate()?;
    let keys = cfg.keys();
    let out = Mutex::new(Vec::with_capacity(keys.len()));
    let work = || {
        keys.par_iter().for_each(|&key| {
            let outcome = run_keyed_trial(cfg, data, key);
            on_done(&outcome);
            out.lock().expect("poisoned result list").push(outcome);
        })
    };
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work);
    } else {
        work();
    }
    let mut results = out.into_inner().expect("poisoned result list");
    results.sort_by_key(|o| o.key);
    Ok(results)
}
