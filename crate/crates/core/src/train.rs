//! Training loops: the distributed alternation, the centralized baselines and
//! the one-step prediction metric.
//!
//! A distributed run alternates `R` outer rounds. Each round first relifts
//! every agent's data with its own parameters and runs `S` matrix-consensus
//! rounds, then freezes the matrices and runs `S̄` mixing steps on the lift.
//! `R = 1` is the single-pass schedule.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::consensus::{
    block_system, build_consensus_states, centralized_ls_oracle, disagreement, matrix_update_round,
    random_iterates, solve_pair, theta_disagreement, theta_mixing_round, LocalGram, LossWeighting,
    MatrixConsensusState,
};
use crate::error::{Error, Result};
use crate::graph::{mixing_weights, uniform_consensus_weights, Graph, MixingRule};
pub use crate::koopman::VelocityPredictor;
use crate::koopman::{build_data_matrices, segment_columns, DataMatrices, KoopmanModel, Normalization};
use crate::lift::{koopman_grads, loss_and_grad, mse_loss_and_grad, AdamState, MlpParams, INPUT_DIM, STATE_DIM};
use crate::vessel::{ControlInput, Segment, Trajectory, VesselParams};

/// Local descent direction used in the mixing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Per-agent Adam, bias corrected; the step is `alpha` times its direction.
    #[default]
    Adam,
    /// The raw gradient.
    Gradient,
}

/// How the centralized baseline initialises `A, B, C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixInit {
    /// Least-squares optimum for the initial lift.
    #[default]
    LeastSquares,
    /// Standard normal entries scaled by `1/sqrt(r)`.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Matrix-consensus rounds per outer round.
    pub s_matrix: usize,
    /// Lift mixing steps per outer round.
    pub s_theta: usize,
    pub outer_rounds: usize,
    pub c: f64,
    pub alpha: f64,
    /// Per-agent step sizes; `alpha` for every agent when `None`.
    pub alphas: Option<Vec<f64>>,
    pub threshold: f64,
    /// Hard cap on lift steps over the whole run.
    pub max_theta_steps: usize,
    /// Iteration budget of the centralized baselines.
    pub baseline_steps: usize,
    pub init_seed: u64,
    pub lift_dim: usize,
    pub hidden: usize,
    pub weighting: LossWeighting,
    pub mixing: MixingRule,
    pub step_rule: StepRule,
    pub matrix_init: MatrixInit,
    /// Zero the output layer of the direct regression baseline at start.
    pub mlp_zero_output: bool,
    /// Training transitions used by the centralized baselines: `0..train_end`.
    pub train_end: usize,
    pub normalization: Option<Normalization>,
    /// Track distance to the pooled least-squares optimum every matrix round.
    pub record_oracle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            s_matrix: 200,
            s_theta: 100,
            outer_rounds: 50,
            c: 1.0,
            alpha: 1e-4,
            alphas: None,
            threshold: 7e-6,
            max_theta_steps: 200_000,
            baseline_steps: 5000,
            init_seed: 0,
            lift_dim: 8,
            hidden: 256,
            weighting: LossWeighting::Uniform,
            mixing: MixingRule::Metropolis,
            step_rule: StepRule::Adam,
            matrix_init: MatrixInit::LeastSquares,
            mlp_zero_output: false,
            train_end: 4000,
            normalization: None,
            record_oracle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.s_matrix == 0 {
            return Err(Error::config("consensus.s", "must be >= 1"));
        }
        if self.s_theta == 0 {
            return Err(Error::config("theta.s_bar", "must be >= 1"));
        }
        if self.outer_rounds == 0 {
            return Err(Error::config("theta.rounds", "must be >= 1"));
        }
        if !positive(self.c) {
            return Err(Error::config("consensus.c", "must be finite and > 0"));
        }
        if !positive(self.alpha) {
            return Err(Error::config("theta.alpha", "must be finite and > 0"));
        }
        if let Some(a) = &self.alphas {
            if !a.iter().all(|&x| positive(x)) {
                return Err(Error::config("theta.alphas", "every rate must be finite and > 0"));
            }
        }
        if !positive(self.threshold) {
            return Err(Error::config("theta.threshold", "must be finite and > 0"));
        }
        if self.lift_dim == 0 || self.hidden == 0 {
            return Err(Error::config("lift", "dimensions must be >= 1"));
        }
        if self.train_end == 0 {
            return Err(Error::config("data.train_end", "must be >= 1"));
        }
        Ok(())
    }

    fn theta0(&self) -> MlpParams {
        MlpParams::he_uniform(STATE_DIM, self.hidden, self.lift_dim, self.init_seed)
    }

    /// Seed of the random initial matrix iterates.
    pub fn matrix_seed(&self) -> u64 {
        self.init_seed ^ 0x9E37_79B9_7F4A_7C15
    }

    fn agent_alphas(&self, n: usize) -> Result<Vec<f64>> {
        match &self.alphas {
            Some(a) if a.len() != n => Err(Error::config("theta.alphas", format!("need {n} rates, got {}", a.len()))),
            Some(a) => Ok(a.clone()),
            None => Ok(vec![self.alpha; n]),
        }
    }
}

/// One matrix-consensus round.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRecord {
    pub s: usize,
    pub disagreement_m: f64,
    pub disagreement_c: f64,
    /// Largest relative distance of an agent's `M_i` to the pooled optimum; NaN when not tracked.
    pub dist_to_oracle_m: f64,
    pub dist_to_oracle_c: f64,
    pub mean_local_loss: f64,
    pub local_losses: Vec<f64>,
}

/// One lift step; losses are evaluated before the step.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaRecord {
    pub s: usize,
    pub disagreement_theta: f64,
    pub mean_local_loss: f64,
    pub local_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub matrix: Vec<MatrixRecord>,
    pub theta: Vec<ThetaRecord>,
    pub rounds_completed: usize,
    pub converged: bool,
}

/// Per-agent models plus history and wall-clock seconds.
#[derive(Debug, Clone)]
pub struct DistributedOutcome {
    pub models: Vec<KoopmanModel>,
    pub history: RunHistory,
    pub elapsed_s: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn rel_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Private per-agent training data: raw columns never leave this struct.
struct AgentData {
    x: DMatrix<f64>,
    x_next: DMatrix<f64>,
    u: DMatrix<f64>,
}

impl AgentData {
    fn new(seg: &Segment, norm: Option<&Normalization>) -> Result<Self> {
        if seg.transitions() == 0 {
            return Err(Error::EmptySegment);
        }
        let (x, x_next, u) = segment_columns(seg, norm);
        Ok(AgentData { x, x_next, u })
    }

    fn lifted(&self, theta: &MlpParams) -> Result<DataMatrices> {
        DataMatrices::from_columns(self.x.clone(), self.x_next.clone(), self.u.clone(), theta)
    }
}

/// Distributed training over `graph` with one segment per agent.
pub fn run_ddkl_pt(cfg: &TrainConfig, segments: &[Segment], graph: &Graph) -> Result<DistributedOutcome> {
    cfg.validate()?;
    let n = graph.n_agents();
    if segments.len() != n {
        return Err(Error::config(
            "data.intervals",
            format!("{} segments for {n} agents", segments.len()),
        ));
    }
    let start = Instant::now();
    let w = uniform_consensus_weights(graph);
    let w_hat = mixing_weights(graph, cfg.mixing)?;
    let alphas = cfg.agent_alphas(n)?;
    let norm = cfg.normalization.as_ref();

    let data: Vec<AgentData> = segments.iter().map(|s| AgentData::new(s, norm)).collect::<Result<_>>()?;
    let theta0 = cfg.theta0();
    let mut thetas = vec![theta0.clone(); n];
    let mut adams: Vec<AdamState> = (0..n).map(|_| AdamState::new(theta0.len(), 1.0)).collect();
    let mut states: Vec<MatrixConsensusState> = Vec::new();
    let mut history = RunHistory::default();
    let mut theta_steps = 0usize;

    'outer: for round in 0..cfg.outer_rounds {
        // Step 1: matrices for the current lifts.
        let dms: Vec<DataMatrices> = data.iter().zip(&thetas).map(|(d, t)| d.lifted(t)).collect::<Result<_>>()?;
        if round == 0 {
            states = build_consensus_states(&dms, cfg.c, &w, cfg.weighting, cfg.matrix_seed())?;
        } else {
            for (st, dm) in states.iter_mut().zip(&dms) {
                st.refresh(dm)?;
            }
        }
        let oracle = if cfg.record_oracle {
            Some(centralized_ls_oracle(&dms, cfg.weighting)?)
        } else {
            None
        };
        drop(dms);
        for _ in 0..cfg.s_matrix {
            matrix_update_round(&mut states, graph, &w)?;
            let (dm_m, dm_c) = disagreement(&states);
            let (om, oc) = match &oracle {
                Some((m_star, c_star)) => (
                    states.iter().map(|s| rel_dist(&s.m(), m_star)).fold(0.0, f64::max),
                    states.iter().map(|s| rel_dist(&s.c(), c_star)).fold(0.0, f64::max),
                ),
                None => (f64::NAN, f64::NAN),
            };
            let losses: Vec<f64> = states.iter().map(MatrixConsensusState::local_loss).collect();
            history.matrix.push(MatrixRecord {
                s: history.matrix.len(),
                disagreement_m: dm_m,
                disagreement_c: dm_c,
                dist_to_oracle_m: om,
                dist_to_oracle_c: oc,
                mean_local_loss: mean(&losses),
                local_losses: losses,
            });
        }
        if history.matrix.last().is_some_and(|r| r.local_losses.iter().all(|&l| l < cfg.threshold)) {
            history.converged = true;
            history.rounds_completed = round + 1;
            break 'outer;
        }

        // Step 2: lift mixing with frozen matrices.
        let frozen: Vec<(DMatrix<f64>, DMatrix<f64>)> = states.iter().map(|s| (s.m(), s.c())).collect();
        for _ in 0..cfg.s_theta {
            if theta_steps >= cfg.max_theta_steps {
                history.rounds_completed = round + 1;
                break 'outer;
            }
            let mut losses = Vec::with_capacity(n);
            let mut directions = Vec::with_capacity(n);
            for i in 0..n {
                let d = &data[i];
                let (loss, grad) = loss_and_grad(&thetas[i], &frozen[i].0, &frozen[i].1, &d.x, &d.x_next, &d.u)?;
                losses.push(loss);
                directions.push(match cfg.step_rule {
                    StepRule::Adam => adams[i].direction(&grad),
                    StepRule::Gradient => grad,
                });
            }
            history.theta.push(ThetaRecord {
                s: history.theta.len(),
                disagreement_theta: theta_disagreement(&thetas),
                mean_local_loss: mean(&losses),
                local_losses: losses.clone(),
            });
            if losses.iter().all(|&l| l < cfg.threshold) {
                history.converged = true;
                history.rounds_completed = round + 1;
                break 'outer;
            }
            thetas = theta_mixing_round(&thetas, &directions, &w_hat, &alphas)?;
            theta_steps += 1;
        }
        history.rounds_completed = round + 1;
    }

    let models = states
        .iter()
        .zip(&thetas)
        .map(|(s, t)| {
            let mut model = KoopmanModel::from_stacked(&s.m(), s.c(), t.clone())?;
            model.normalization = cfg.normalization;
            Ok(model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistributedOutcome {
        models,
        history,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// The same alternation on one data set without any graph, messages or
/// mixing: a proximal least-squares iteration for the matrices and plain
/// descent on the lift. For a single agent this is what the distributed run
/// must reduce to.
pub fn train_alternating_centralized(cfg: &TrainConfig, segment: &Segment) -> Result<(KoopmanModel, RunHistory)> {
    cfg.validate()?;
    let alpha = cfg.agent_alphas(1)?[0];
    let data = AgentData::new(segment, cfg.normalization.as_ref())?;
    let mut theta = cfg.theta0();
    let mut adam = AdamState::new(theta.len(), 1.0);
    let (r, m, n) = (cfg.lift_dim, INPUT_DIM, STATE_DIM);
    let [mut mt, mut e, mut ct, mut e_hat] = random_iterates(cfg.matrix_seed(), 0, r, m, n);
    let mut history = RunHistory::default();
    let mut theta_steps = 0usize;

    'outer: for round in 0..cfg.outer_rounds {
        let dm = data.lifted(&theta)?;
        let gram = LocalGram::new(&dm);
        let ci = cfg.c
            * match cfg.weighting {
                LossWeighting::Uniform => 1.0,
                LossWeighting::PerAgent => 1.0 / dm.width() as f64,
            };
        let f_lu = block_system(1.0, &(&gram.n_gram * ci)).lu();
        let f_hat_lu = block_system(1.0, &(&gram.g_gram * ci)).lu();
        if !f_lu.is_invertible() || !f_hat_lu.is_invertible() {
            return Err(Error::SingularBlockSystem { agent: 0 });
        }
        let m_data = &gram.n_cross * ci;
        let c_data = &gram.g_cross * ci;
        let oracle = if cfg.record_oracle {
            Some(centralized_ls_oracle(std::slice::from_ref(&dm), cfg.weighting)?)
        } else {
            None
        };
        for _ in 0..cfg.s_matrix {
            let (mt1, e1) = solve_pair(&f_lu, &mt, &e, &e, &mt, &m_data, 1.0)?;
            let (ct1, eh1) = solve_pair(&f_hat_lu, &ct, &e_hat, &e_hat, &ct, &c_data, 1.0)?;
            (mt, e, ct, e_hat) = (mt1, e1, ct1, eh1);
            let loss = gram.loss(&mt, &ct);
            let (om, oc) = match &oracle {
                Some((m_star, c_star)) => (rel_dist(&mt.transpose(), m_star), rel_dist(&ct.transpose(), c_star)),
                None => (f64::NAN, f64::NAN),
            };
            history.matrix.push(MatrixRecord {
                s: history.matrix.len(),
                disagreement_m: 0.0,
                disagreement_c: 0.0,
                dist_to_oracle_m: om,
                dist_to_oracle_c: oc,
                mean_local_loss: loss,
                local_losses: vec![loss],
            });
        }
        if history.matrix.last().is_some_and(|r| r.mean_local_loss < cfg.threshold) {
            history.converged = true;
            history.rounds_completed = round + 1;
            break 'outer;
        }

        let (m_frozen, c_frozen) = (mt.transpose(), ct.transpose());
        for _ in 0..cfg.s_theta {
            if theta_steps >= cfg.max_theta_steps {
                history.rounds_completed = round + 1;
                break 'outer;
            }
            let (loss, grad) = loss_and_grad(&theta, &m_frozen, &c_frozen, &data.x, &data.x_next, &data.u)?;
            history.theta.push(ThetaRecord {
                s: history.theta.len(),
                disagreement_theta: 0.0,
                mean_local_loss: loss,
                local_losses: vec![loss],
            });
            if loss < cfg.threshold {
                history.converged = true;
                history.rounds_completed = round + 1;
                break 'outer;
            }
            let dir = match cfg.step_rule {
                StepRule::Adam => adam.direction(&grad),
                StepRule::Gradient => grad,
            };
            for (p, d) in theta.flat_mut().iter_mut().zip(&dir) {
                *p -= alpha * d;
            }
            theta_steps += 1;
        }
        history.rounds_completed = round + 1;
    }
    let mut model = KoopmanModel::from_stacked(&mt.transpose(), ct.transpose(), theta)?;
    model.normalization = cfg.normalization;
    Ok((model, history))
}

/// Loss per iteration of a centralized baseline.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaselineHistory {
    pub losses: Vec<f64>,
    pub converged: bool,
}

fn training_segment(traj: &Trajectory, cfg: &TrainConfig) -> Result<Segment> {
    traj.segment(0, 0, cfg.train_end)
        .map_err(|_| Error::config("data.train_end", format!("{} exceeds the trajectory length {}", cfg.train_end, traj.len())))
}

/// Joint Adam descent on `(A, B, C, theta)` over the full training slice,
/// starting from the same lift as the distributed run.
pub fn train_dko_centralized(traj: &Trajectory, cfg: &TrainConfig) -> Result<(KoopmanModel, BaselineHistory)> {
    cfg.validate()?;
    let seg = training_segment(traj, cfg)?;
    let mut theta = cfg.theta0();
    let dm = build_data_matrices(&seg, &theta, cfg.normalization.as_ref())?;
    let (r, m_in) = (cfg.lift_dim, INPUT_DIM);
    let (mut m, mut c) = match cfg.matrix_init {
        MatrixInit::LeastSquares => centralized_ls_oracle(std::slice::from_ref(&dm), LossWeighting::Uniform)?,
        MatrixInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.matrix_seed());
            let scale = 1.0 / (r as f64).sqrt();
            let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            let m = draw(r, r + m_in);
            let c = draw(STATE_DIM, r);
            (m, c)
        }
    };
    let DataMatrices { x, x_next, u, .. } = dm;
    let (p, pm) = (theta.len(), m.len());
    let mut adam = AdamState::new(p + pm + c.len(), cfg.alpha);
    let mut history = BaselineHistory::default();
    let mut grad = vec![0.0; adam.first_moment.len()];
    for _ in 0..cfg.baseline_steps {
        let g = koopman_grads(&theta, &m, &c, &x, &x_next, &u, true)?;
        history.losses.push(g.loss);
        if g.loss < cfg.threshold {
            history.converged = true;
            break;
        }
        let gm = g.m.expect("matrix gradients requested");
        let gc = g.c.expect("matrix gradients requested");
        grad[..p].copy_from_slice(&g.theta);
        grad[p..p + pm].copy_from_slice(gm.as_slice());
        grad[p + pm..].copy_from_slice(gc.as_slice());
        let dir = adam.direction(&grad);
        for (v, d) in theta.flat_mut().iter_mut().zip(&dir[..p]) {
            *v -= cfg.alpha * d;
        }
        for (v, d) in m.as_mut_slice().iter_mut().zip(&dir[p..p + pm]) {
            *v -= cfg.alpha * d;
        }
        for (v, d) in c.as_mut_slice().iter_mut().zip(&dir[p + pm..]) {
            *v -= cfg.alpha * d;
        }
    }
    let mut model = KoopmanModel::from_stacked(&m, c, theta)?;
    model.normalization = cfg.normalization;
    Ok((model, history))
}

/// Direct regression `(v_t, u_t) -> v_{t+1}` with one hidden ReLU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBaselineModel {
    pub theta: MlpParams,
    pub normalization: Option<Normalization>,
}

impl MlpBaselineModel {
    pub fn predict(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
        let z = self.normalization.map_or(v, |n| n.scale(v));
        let y = self.theta.forward(&[z[0], z[1], z[2], u[0], u[1]]);
        let out = [y[0], y[1], y[2]];
        self.normalization.map_or(out, |n| n.unscale(out))
    }
}

/// Regression inputs `[v; u]` and targets `v_next` of a segment.
pub fn regression_columns(seg: &Segment, norm: Option<&Normalization>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (x, x_next, u) = segment_columns(seg, norm);
    let mut inputs = DMatrix::zeros(STATE_DIM + INPUT_DIM, x.ncols());
    inputs.rows_mut(0, STATE_DIM).copy_from(&x);
    inputs.rows_mut(STATE_DIM, INPUT_DIM).copy_from(&u);
    (inputs, x_next)
}

pub fn train_mlp_baseline(traj: &Trajectory, cfg: &TrainConfig) -> Result<(MlpBaselineModel, BaselineHistory)> {
    cfg.validate()?;
    let seg = training_segment(traj, cfg)?;
    let (inputs, targets) = regression_columns(&seg, cfg.normalization.as_ref());
    let mut theta = MlpParams::he_uniform(STATE_DIM + INPUT_DIM, cfg.hidden, STATE_DIM, cfg.init_seed);
    if cfg.mlp_zero_output {
        theta.w2_mut().fill(0.0);
        theta.b2_mut().fill(0.0);
    }
    let mut adam = AdamState::new(theta.len(), cfg.alpha);
    let mut history = BaselineHistory::default();
    for _ in 0..cfg.baseline_steps {
        let (loss, grad) = mse_loss_and_grad(&theta, &inputs, &targets)?;
        history.losses.push(loss);
        if loss < cfg.threshold {
            history.converged = true;
            break;
        }
        adam.step(theta.flat_mut(), &grad);
    }
    Ok((
        MlpBaselineModel {
            theta,
            normalization: cfg.normalization,
        },
        history,
    ))
}

impl VelocityPredictor for MlpBaselineModel {
    fn predict_velocity(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
        self.predict(v, u)
    }
}

/// The simulator itself; its error on simulated data is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPredictor {
    pub params: VesselParams,
    pub dt: f64,
}

impl VelocityPredictor for TruthPredictor {
    fn predict_velocity(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
        self.params.step_velocity(v, ControlInput(u), self.dt)
    }
}

/// Always predicts zero velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ZeroPredictor;

impl VelocityPredictor for ZeroPredictor {
    fn predict_velocity(&self, _v: [f64; 3], _u: [f64; 2]) -> [f64; 3] {
        [0.0; 3]
    }
}

/// Mean over transitions `t` in `range` of `||v_hat_{t+1} - v_{t+1}||^2`.
pub fn one_step_error(model: &dyn VelocityPredictor, traj: &Trajectory, range: std::ops::Range<usize>) -> Result<f64> {
    if range.is_empty() || range.end > traj.len() {
        return Err(Error::IntervalOutOfRange {
            start: range.start,
            end: range.end,
            len: traj.len(),
        });
    }
    let count = range.len() as f64;
    let mut total = 0.0;
    for t in range {
        let pred = model.predict_velocity(traj.states[t].v, traj.inputs[t].0);
        let truth = traj.states[t + 1].v;
        total += (0..3).map(|k| (pred[k] - truth[k]).powi(2)).sum::<f64>();
    }
    Ok(total / count)
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

/// Per-run metrics of one method with their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodMetrics {
    pub method: String,
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub methods: Vec<MethodMetrics>,
}

/// Scores a method over several runs. Each run may hold several models (one
/// per agent); its metric averages their errors over the test transitions.
pub fn evaluate_metrics(
    method: &str,
    runs: &[Vec<&dyn VelocityPredictor>],
    traj: &Trajectory,
    test: std::ops::Range<usize>,
) -> Result<MethodMetrics> {
    let mut per_run = Vec::with_capacity(runs.len());
    for models in runs {
        if models.is_empty() {
            return Err(Error::Shape("a run needs at least one model".into()));
        }
        let errs = models
            .iter()
            .map(|m| one_step_error(*m, traj, test.clone()))
            .collect::<Result<Vec<_>>>()?;
        per_run.push(mean(&errs));
    }
    let (mean, std) = mean_std(&per_run);
    Ok(MethodMetrics {
        method: method.to_string(),
        per_run,
        mean,
        std,
    })
}

/// Velocities of the transitions `0..end`, the data a normalization is fit on.
pub fn training_velocities(traj: &Trajectory, end: usize) -> Vec<[f64; 3]> {
    traj.states[..=end.min(traj.len())].iter().map(|s| s.v).collect()
}
