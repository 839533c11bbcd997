//! Run configuration: a TOML file with one table per pipeline stage, then
//! command-line overrides on top.
//!
//! ```toml
//! seed = 1
//!
//! [teacher]
//! input_dim = 10
//! hidden = [20, 20]
//! activation = "tanh"
//!
//! [reg]
//! alpha_lambda = 1e-4
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spectral_core::experiment::{Parametrization, SweepConfig, TeacherSpec};
use spectral_core::training::{AdamParams, RegularizationConfig, TrainConfig};
use spectral_core::Activation;

use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "SPECTRAL_CORE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds the teacher, both datasets and (as `seed + trial`) every student.
    pub seed: u64,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub train: TrainSection,
    pub reg: RegSection,
    pub sweep: SweepSection,
    pub prune: PruneSection,
    pub conv: ConvSection,
    pub grad_check: GradCheckSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Shared by teacher and students.
    pub activation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub second_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size_spectral: usize,
    pub batch_size_standard: usize,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegSection {
    pub alpha_w: f64,
    pub alpha_lambda: f64,
    pub alpha_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub h: Vec<usize>,
    pub trials: usize,
    pub parametrizations: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    /// Concurrent trials; 0 uses every available core.
    pub parallel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub tau: f64,
    /// Defaults to the teacher's first hidden width.
    pub n_teacher: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvSection {
    pub input_height: usize,
    pub input_width: usize,
    pub filter_size: usize,
    pub stride: usize,
    pub pad: usize,
    pub relevance: f64,
    /// Randomized specs checked after the displayed case.
    pub cases: usize,
    pub max_input: usize,
    pub max_filter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub dims: Vec<usize>,
    pub seeds: usize,
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Empty means every activation.
    pub activations: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            train: TrainSection::default(),
            reg: RegSection::default(),
            sweep: SweepSection::default(),
            prune: PruneSection::default(),
            conv: ConvSection::default(),
            grad_check: GradCheckSection::default(),
        }
    }
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherSpec::default();
        TeacherSection {
            input_dim: t.input_dim,
            hidden: t.hidden,
            activation: t.activation.name().to_string(),
        }
    }
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            second_hidden: SweepConfig::default().second_hidden,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        TrainSection {
            epochs: s.train.epochs,
            learning_rate: s.train.adam.learning_rate,
            beta1: s.train.adam.beta1,
            beta2: s.train.adam.beta2,
            epsilon: s.train.adam.epsilon,
            batch_size_spectral: s.batch_size_spectral,
            batch_size_standard: s.batch_size_standard,
            eval_every: s.train.eval_every,
        }
    }
}

impl Default for RegSection {
    fn default() -> Self {
        let r = RegularizationConfig::default();
        RegSection {
            alpha_w: r.alpha_w,
            alpha_lambda: r.alpha_lambda,
            alpha_phi: r.alpha_phi,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        SweepSection {
            h: s.h_values,
            trials: s.trials_per_h,
            parametrizations: s.parametrizations.iter().map(|p| p.name().to_string()).collect(),
            train_size: s.train_size,
            test_size: s.test_size,
            parallel: 0,
        }
    }
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            tau: SweepConfig::default().tau,
            n_teacher: None,
        }
    }
}

impl Default for ConvSection {
    fn default() -> Self {
        ConvSection {
            input_height: 4,
            input_width: 4,
            filter_size: 2,
            stride: 1,
            pad: 0,
            relevance: 0.5,
            cases: 50,
            max_input: 8,
            max_filter: 3,
        }
    }
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            dims: vec![10, 8, 5, 1],
            seeds: 20,
            batch_size: 16,
            step: 1e-5,
            tolerance: 1e-6,
            activations: Vec::new(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub h: Option<Vec<usize>>,
    pub trials: Option<usize>,
    pub parallel: Option<usize>,
    pub tau: Option<f64>,
    pub epochs: Option<usize>,
    pub alpha_lambda: Option<f64>,
    pub alpha_phi: Option<f64>,
    pub alpha_w: Option<f64>,
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> CliResult<Config> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.h {
            self.sweep.h = v.clone();
        }
        if let Some(v) = o.trials {
            self.sweep.trials = v;
        }
        if let Some(v) = o.parallel {
            self.sweep.parallel = v;
        }
        if let Some(v) = o.tau {
            self.prune.tau = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.alpha_lambda {
            self.reg.alpha_lambda = v;
        }
        if let Some(v) = o.alpha_phi {
            self.reg.alpha_phi = v;
        }
        if let Some(v) = o.alpha_w {
            self.reg.alpha_w = v;
        }
    }

    pub fn activation(&self) -> CliResult<Activation> {
        self.teacher.activation.parse().map_err(|e: spectral_core::Error| {
            CliError::Validation(format!("teacher.activation: {e}"))
        })
    }

    pub fn parametrizations(&self) -> CliResult<Vec<Parametrization>> {
        let mut out = Vec::new();
        for name in &self.sweep.parametrizations {
            let p: Parametrization = name
                .parse()
                .map_err(|e| CliError::Validation(format!("sweep.parametrizations: {e}")))?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        Ok(out)
    }

    pub fn grad_check_activations(&self) -> CliResult<Vec<Activation>> {
        if self.grad_check.activations.is_empty() {
            return Ok(Activation::ALL.to_vec());
        }
        self.grad_check
            .activations
            .iter()
            .map(|a| {
                a.parse()
                    .map_err(|e| CliError::Validation(format!("grad_check.activations: {e}")))
            })
            .collect()
    }

    pub fn teacher_spec(&self) -> CliResult<TeacherSpec> {
        let spec = TeacherSpec {
            input_dim: self.teacher.input_dim,
            hidden: self.teacher.hidden.clone(),
            activation: self.activation()?,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_teacher(&self) -> usize {
        self.prune
            .n_teacher
            .unwrap_or_else(|| self.teacher.hidden.first().copied().unwrap_or(0))
    }

    /// Sweep settings with the thread count already capped by the environment.
    pub fn sweep_config(&self) -> CliResult<SweepConfig> {
        let reg = RegularizationConfig {
            alpha_w: self.reg.alpha_w,
            alpha_lambda: self.reg.alpha_lambda,
            alpha_phi: self.reg.alpha_phi,
        };
        reg.validate()?;
        let cfg = SweepConfig {
            teacher: self.teacher_spec()?,
            h_values: self.sweep.h.clone(),
            second_hidden: self.student.second_hidden,
            trials_per_h: self.sweep.trials,
            parametrizations: self.parametrizations()?,
            train: TrainConfig {
                epochs: self.train.epochs,
                batch_size: self.train.batch_size_spectral,
                adam: AdamParams {
                    learning_rate: self.train.learning_rate,
                    beta1: self.train.beta1,
                    beta2: self.train.beta2,
                    epsilon: self.train.epsilon,
                },
                seed: self.seed,
                reg,
                eval_every: self.train.eval_every,
            },
            batch_size_spectral: self.train.batch_size_spectral,
            batch_size_standard: self.train.batch_size_standard,
            train_size: self.sweep.train_size,
            test_size: self.sweep.test_size,
            data_seed: self.seed,
            base_seed: self.seed,
            tau: self.prune.tau,
            threads: effective_threads(self.sweep.parallel, std::env::var(THREADS_ENV).ok().as_deref())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `--parallel` bounded by the environment cap; 0 means unbounded on both sides.
pub fn effective_threads(parallel: usize, env: Option<&str>) -> CliResult<usize> {
    let cap = match env.map(str::trim).filter(|s| !s.is_empty()) {
        None => 0,
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| CliError::Validation(format!("{THREADS_ENV} must be a non-negative integer, got {s:?}")))?,
    };
    Ok(match (parallel, cap) {
        (0, c) => c,
        (p, 0) => p,
        (p, c) => p.min(c),
    })
}
