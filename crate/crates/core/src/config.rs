//! Experiment configuration file.
//!
//! One TOML file with the sections `[vessel]`, `[data]`, `[graph]`, `[lift]`,
//! `[consensus]`, `[theta]`, `[mpc]` and `[paths]`. Every key is optional and
//! falls back to the default shown by [`ExperimentConfig::default_toml`];
//! unknown keys are rejected. Syntax errors carry the offending line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::LossWeighting;
use crate::error::{Error, Result};
use crate::graph::{Graph, MixingRule};
use crate::koopman::Normalization;
use crate::mpc::MpcConfig;
use crate::train::{training_velocities, MatrixInit, StepRule, TrainConfig};
use crate::vessel::{generate_trajectory, partition_trajectory, Excitation, Segment, Trajectory, VesselParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of transitions; the trajectory holds `steps + 1` states.
    pub steps: usize,
    pub dt: f64,
    /// Standard deviation of the excitation thrust.
    pub sigma: f64,
    /// Steps each excitation sample is held.
    pub hold: usize,
    /// One `[start, end]` pair of time indices per agent.
    pub intervals: Vec<[usize; 2]>,
    pub seed: u64,
    /// Centralized baselines train on transitions `0..train_end`.
    pub train_end: usize,
    /// Evaluation slice `[start, end)` of transitions.
    pub test: [usize; 2],
    /// Z-score velocities with statistics of the training slice.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            steps: 5000,
            dt: 0.02,
            sigma: 0.5,
            hold: 10,
            intervals: vec![[0, 600], [600, 1600], [1600, 2800], [2800, 3600], [3600, 4000]],
            seed: 0,
            train_end: 4000,
            test: [4000, 5000],
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub n_agents: usize,
    /// Undirected edges between 1-based agent ids.
    pub edges: Vec<[usize; 2]>,
    pub mixing: MixingRule,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            n_agents: 5,
            edges: vec![[1, 2], [2, 3], [3, 4], [4, 5], [5, 1]],
            mixing: MixingRule::Metropolis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftConfig {
    pub r: usize,
    pub hidden: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig { r: 8, hidden: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    pub c: f64,
    pub loss_weighting: LossWeighting,
    /// Matrix-consensus rounds per outer round.
    pub s: usize,
    /// Seed of the lift initialisation and the random matrix iterates.
    pub init_seed: u64,
    pub record_oracle: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            c: 1.0,
            loss_weighting: LossWeighting::Uniform,
            s: 200,
            init_seed: 0,
            record_oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThetaConfig {
    pub alpha: f64,
    /// Per-agent rates overriding `alpha`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    pub s_bar: usize,
    pub rounds: usize,
    pub threshold: f64,
    /// Cap on lift steps across the whole run.
    pub max_steps: usize,
    pub step_rule: StepRule,
    pub matrix_init: MatrixInit,
    pub baseline_steps: usize,
    pub mlp_zero_output: bool,
    /// Independent runs for evaluation; run `j` uses init seed `init_seed + j`.
    pub runs: usize,
}

impl Default for ThetaConfig {
    fn default() -> Self {
        ThetaConfig {
            alpha: 1e-4,
            alphas: None,
            s_bar: 100,
            rounds: 50,
            threshold: 7e-6,
            max_steps: 200_000,
            step_rule: StepRule::Adam,
            matrix_init: MatrixInit::LeastSquares,
            baseline_steps: 5000,
            mlp_zero_output: false,
            runs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("out/trajectory.csv"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub vessel: VesselParams,
    pub data: DataConfig,
    pub graph: GraphConfig,
    pub lift: LiftConfig,
    pub consensus: ConsensusConfig,
    pub theta: ThetaConfig,
    pub mpc: MpcConfig,
    pub paths: PathsConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl ExperimentConfig {
    /// Parses and validates. `path` only labels errors.
    pub fn from_toml_str(path: &Path, text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(path, &text)
    }

    /// Canonical TOML, including every default.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn default_toml() -> String {
        Self::default().to_toml()
    }

    /// SHA-256 of the canonical TOML, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.vessel.validate()?;
        let d = &self.data;
        if d.steps == 0 {
            return Err(Error::config("data.steps", "must be >= 1"));
        }
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return Err(Error::config("data.dt", "must be finite and > 0"));
        }
        if !(d.sigma >= 0.0 && d.sigma.is_finite()) {
            return Err(Error::config("data.sigma", "must be finite and >= 0"));
        }
        if d.hold == 0 {
            return Err(Error::config("data.hold", "must be >= 1"));
        }
        if d.intervals.len() != self.graph.n_agents {
            return Err(Error::config(
                "data.intervals",
                format!("{} intervals for {} agents", d.intervals.len(), self.graph.n_agents),
            ));
        }
        for (i, [s, e]) in d.intervals.iter().enumerate() {
            if s >= e || *e > d.steps {
                return Err(Error::config(
                    "data.intervals",
                    format!("interval {} is [{s}, {e}], need start < end <= {}", i + 1, d.steps),
                ));
            }
        }
        if d.train_end == 0 || d.train_end > d.steps {
            return Err(Error::config("data.train_end", format!("must be in 1..={}", d.steps)));
        }
        if d.test[0] >= d.test[1] || d.test[1] > d.steps {
            return Err(Error::config("data.test", format!("need start < end <= {}", d.steps)));
        }
        if self.graph.n_agents == 0 {
            return Err(Error::config("graph.n_agents", "must be >= 1"));
        }
        self.graph()?;
        if let Some(a) = &self.theta.alphas {
            if a.len() != self.graph.n_agents {
                return Err(Error::config("theta.alphas", "need one rate per agent"));
            }
        }
        if self.theta.runs == 0 {
            return Err(Error::config("theta.runs", "must be >= 1"));
        }
        if self.mpc.dt != d.dt {
            return Err(Error::config("mpc.dt", "must equal data.dt"));
        }
        self.mpc.validate()?;
        self.train_config(0, None).validate()
    }

    pub fn graph(&self) -> Result<Graph> {
        let edges: Vec<(usize, usize)> = self.graph.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::from_one_based(self.graph.n_agents, &edges)
    }

    pub fn excitation(&self) -> Excitation {
        Excitation {
            sigma: self.data.sigma,
            hold: self.data.hold,
        }
    }

    pub fn intervals(&self) -> Vec<(usize, usize)> {
        self.data.intervals.iter().map(|i| (i[0], i[1])).collect()
    }

    pub fn generate(&self, seed: u64) -> Result<Trajectory> {
        generate_trajectory(&self.vessel, seed, self.data.steps, self.data.dt, self.excitation())
    }

    pub fn segments(&self, traj: &Trajectory) -> Result<Vec<Segment>> {
        partition_trajectory(traj, &self.intervals())
    }

    /// Training statistics if `data.normalize` is set.
    pub fn normalization(&self, traj: &Trajectory) -> Option<Normalization> {
        self.data
            .normalize
            .then(|| Normalization::fit(&training_velocities(traj, self.data.train_end)))
    }

    /// Trainer settings for run `run`, whose init seed is offset by `run`.
    pub fn train_config(&self, run: u64, normalization: Option<Normalization>) -> TrainConfig {
        TrainConfig {
            s_matrix: self.consensus.s,
            s_theta: self.theta.s_bar,
            outer_rounds: self.theta.rounds,
            c: self.consensus.c,
            alpha: self.theta.alpha,
            alphas: self.theta.alphas.clone(),
            threshold: self.theta.threshold,
            max_theta_steps: self.theta.max_steps,
            baseline_steps: self.theta.baseline_steps,
            init_seed: self.consensus.init_seed.wrapping_add(run),
            lift_dim: self.lift.r,
            hidden: self.lift.hidden,
            weighting: self.consensus.loss_weighting,
            mixing: self.graph.mixing,
            step_rule: self.theta.step_rule,
            matrix_init: self.theta.matrix_init,
            mlp_zero_output: self.theta.mlp_zero_output,
            train_end: self.data.train_end,
            normalization,
            record_oracle: self.consensus.record_oracle,
        }
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.data.test[0]..self.data.test[1]
    }
}
