//! Model predictive control with a learned velocity model.
//!
//! The prediction model pairs learned body-velocity dynamics with the exact
//! planar kinematics:
//!
//! ```text
//! v(t+1) = f(v(t), u(t))
//! p(t+1) = p(t) + dt * R(phi(t)) v(t+1)
//! ```
//!
//! Input sequences are optimised by the cross-entropy method: sample from a
//! diagonal Gaussian, clip to the box, keep the cheapest sequences and refit.
//! The previous iteration's elites stay in the pool, so the elite-mean cost
//! never increases across iterations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{FusedPredictor, KoopmanModel, VelocityPredictor};
use crate::vessel::{integrate_pose, step_truth, ControlInput, VesselParams, VesselState};

/// Start of the goal-tracking task.
pub const GOAL_TASK_START: [f64; 6] = [20.0, 10.0, std::f64::consts::FRAC_PI_3, 0.0, 0.0, 0.0];
/// Target of the goal-tracking task.
pub const GOAL_TASK_TARGET: [f64; 6] = [0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0];
/// Reach tolerances of the goal-tracking task: position (m) and yaw (rad).
pub const GOAL_TOLERANCE: (f64, f64) = (0.5, 0.1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal of the stage state weight.
    pub q: [f64; 6],
    /// Diagonal of the terminal state weight.
    pub qf: [f64; 6],
    /// Diagonal of the input weight.
    pub r: [f64; 2],
    pub dt: f64,
    pub samples: usize,
    pub elites: usize,
    pub iterations: usize,
    pub init_std: f64,
    /// Floor on the refitted standard deviation.
    pub min_std: f64,
    pub seed: u64,
    /// Wrap the yaw error to `(-pi, pi]` instead of using the raw difference.
    pub wrap_yaw: bool,
    /// Projected-gradient iterations run on the CEM mean; 0 disables.
    pub refine_iters: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let q = [300.0, 300.0, 500.0, 10.0, 10.0, 10.0];
        MpcConfig {
            horizon: 30,
            q,
            qf: q.map(|x| 2.0 * x),
            r: [1e-3, 1e-3],
            dt: 0.02,
            samples: 400,
            elites: 40,
            iterations: 6,
            init_std: 0.4,
            min_std: 0.01,
            seed: 0,
            wrap_yaw: false,
            refine_iters: 10,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("mpc.horizon", "must be >= 1"));
        }
        let weights = self.q.iter().chain(&self.qf).chain(&self.r);
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("mpc.q", "weights must be finite and >= 0"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("mpc.dt", "must be finite and > 0"));
        }
        if self.samples == 0 || self.iterations == 0 {
            return Err(Error::config("mpc.samples", "samples and iterations must be >= 1"));
        }
        if self.elites == 0 || self.elites > self.samples {
            return Err(Error::config("mpc.elites", "must be in 1..=samples"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) || !(self.min_std >= 0.0 && self.min_std.is_finite()) {
            return Err(Error::config("mpc.init_std", "standard deviations must be finite, init_std > 0"));
        }
        Ok(())
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * std::f64::consts::PI);
    if w > std::f64::consts::PI {
        w - 2.0 * std::f64::consts::PI
    } else {
        w
    }
}

/// `x - goal`, with the yaw component optionally wrapped.
pub fn state_error(x: &[f64; 6], goal: &[f64; 6], wrap_yaw: bool) -> [f64; 6] {
    let mut e = [0.0; 6];
    for k in 0..6 {
        e[k] = x[k] - goal[k];
    }
    if wrap_yaw {
        e[2] = wrap_angle(e[2]);
    }
    e
}

fn check_finite(x: &[f64; 6]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState("predicted state"))
    }
}

/// One step of the combined model from `x = [p; v]`.
pub fn combined_step<P: VelocityPredictor + ?Sized>(model: &P, x: &[f64; 6], u: [f64; 2], dt: f64) -> Result<[f64; 6]> {
    ControlInput::new(u[0], u[1])?;
    let next = unchecked_step(model, x, u, dt);
    check_finite(&next)?;
    Ok(next)
}

fn unchecked_step<P: VelocityPredictor + ?Sized>(model: &P, x: &[f64; 6], u: [f64; 2], dt: f64) -> [f64; 6] {
    let v = model.predict_velocity([x[3], x[4], x[5]], u);
    let p = integrate_pose([x[0], x[1], x[2]], v, dt);
    [p[0], p[1], p[2], v[0], v[1], v[2]]
}

fn quad(w: &[f64], e: &[f64]) -> f64 {
    w.iter().zip(e).map(|(w, e)| w * e * e).sum()
}

fn rollout_cost<P: VelocityPredictor + ?Sized>(model: &P, x0: &[f64; 6], inputs: &[[f64; 2]], goal: &[f64; 6], cfg: &MpcConfig) -> f64 {
    let mut x = *x0;
    let mut cost = 0.0;
    for u in inputs {
        cost += quad(&cfg.q, &state_error(&x, goal, cfg.wrap_yaw)) + quad(&cfg.r, u);
        x = unchecked_step(model, &x, *u, cfg.dt);
    }
    cost + quad(&cfg.qf, &state_error(&x, goal, cfg.wrap_yaw))
}

/// Stage costs over the rollout of `inputs` plus the terminal cost.
pub fn trajectory_cost<P: VelocityPredictor + ?Sized>(
    model: &P,
    x0: &[f64; 6],
    inputs: &[[f64; 2]],
    goal: &[f64; 6],
    cfg: &MpcConfig,
) -> Result<f64> {
    if let Some(u) = inputs.iter().find(|u| !ControlInput(**u).in_box()) {
        ControlInput::new(u[0], u[1])?;
    }
    let cost = rollout_cost(model, x0, inputs, goal, cfg);
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::NonFiniteState("trajectory cost"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub u: [f64; 2],
    /// Cost of the final mean sequence.
    pub cost: f64,
    pub plan: Vec<[f64; 2]>,
    /// Mean cost of the elite set after each iteration.
    pub elite_mean_costs: Vec<f64>,
}

/// Receding-horizon CEM controller with warm starting.
#[derive(Debug, Clone)]
pub struct MpcController<P> {
    model: P,
    cfg: MpcConfig,
    rng: ChaCha8Rng,
    warm: Option<Vec<[f64; 2]>>,
}

impl MpcController<FusedPredictor> {
    /// Controller for a learned Koopman model.
    pub fn for_koopman(model: &KoopmanModel, cfg: MpcConfig) -> Result<Self> {
        model.validate()?;
        Self::new(FusedPredictor::new(model), cfg)
    }
}

impl<P: VelocityPredictor> MpcController<P> {
    pub fn new(model: P, cfg: MpcConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MpcController {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            warm: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &P {
        &self.model
    }

    /// Drops the warm start.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solve(&mut self, x: &[f64; 6], goal: &[f64; 6]) -> Result<MpcSolution> {
        check_finite(x)?;
        match self.cem(x, goal) {
            Ok(sol) => {
                let mut next = sol.plan[1..].to_vec();
                next.push(*sol.plan.last().expect("horizon >= 1"));
                self.warm = Some(next);
                Ok(sol)
            }
            Err(e) => {
                self.warm = None;
                Err(e)
            }
        }
    }

    fn cem(&mut self, x: &[f64; 6], goal: &[f64; 6]) -> Result<MpcSolution> {
        let cfg = &self.cfg;
        let k = cfg.horizon;
        let mut mean = match &self.warm {
            Some(w) if w.len() == k => w.clone(),
            _ => vec![[0.0; 2]; k],
        };
        let mut std = vec![[cfg.init_std; 2]; k];
        let clip = |s: &mut Vec<[f64; 2]>| {
            for u in s.iter_mut() {
                *u = ControlInput::clipped(u[0], u[1]).0;
            }
        };
        let mut elites: Vec<(f64, Vec<[f64; 2]>)> = Vec::new();
        let mut elite_mean_costs = Vec::with_capacity(cfg.iterations);
        for it in 0..cfg.iterations {
            let mut pool = std::mem::take(&mut elites);
            if it == 0 {
                let mut seq = mean.clone();
                clip(&mut seq);
                let c = rollout_cost(&self.model, x, &seq, goal, cfg);
                if c.is_finite() {
                    pool.push((c, seq));
                }
            }
            for _ in 0..cfg.samples {
                let mut seq: Vec<[f64; 2]> = (0..k)
                    .map(|t| {
                        let n0: f64 = StandardNormal.sample(&mut self.rng);
                        let n1: f64 = StandardNormal.sample(&mut self.rng);
                        [mean[t][0] + std[t][0] * n0, mean[t][1] + std[t][1] * n1]
                    })
                    .collect();
                clip(&mut seq);
                let c = rollout_cost(&self.model, x, &seq, goal, cfg);
                if c.is_finite() {
                    pool.push((c, seq));
                }
            }
            if pool.is_empty() {
                return Err(Error::SolverDegenerate);
            }
            pool.sort_by(|a, b| a.0.total_cmp(&b.0));
            pool.truncate(cfg.elites);
            let n = pool.len() as f64;
            elite_mean_costs.push(pool.iter().map(|e| e.0).sum::<f64>() / n);
            for t in 0..k {
                for ch in 0..2 {
                    let m = pool.iter().map(|e| e.1[t][ch]).sum::<f64>() / n;
                    let var = pool.iter().map(|e| (e.1[t][ch] - m).powi(2)).sum::<f64>() / n;
                    mean[t][ch] = m;
                    std[t][ch] = var.sqrt().max(cfg.min_std);
                }
            }
            elites = pool;
        }
        clip(&mut mean);
        let mut cost = rollout_cost(&self.model, x, &mean, goal, cfg);
        if !cost.is_finite() {
            return Err(Error::SolverDegenerate);
        }
        for _ in 0..cfg.refine_iters {
            match refine_step(&self.model, x, &mean, cost, goal, cfg) {
                Some((seq, c)) => {
                    mean = seq;
                    cost = c;
                }
                None => break,
            }
        }
        Ok(MpcSolution {
            u: mean[0],
            cost,
            plan: mean,
            elite_mean_costs,
        })
    }
}

/// Weighted residuals whose squared norm is the rollout cost.
fn rollout_residuals<P: VelocityPredictor + ?Sized>(
    model: &P,
    x0: &[f64; 6],
    inputs: &[[f64; 2]],
    goal: &[f64; 6],
    cfg: &MpcConfig,
    out: &mut Vec<f64>,
) {
    out.clear();
    let mut x = *x0;
    for u in inputs {
        let e = state_error(&x, goal, cfg.wrap_yaw);
        out.extend(e.iter().zip(&cfg.q).map(|(e, w)| w.sqrt() * e));
        out.extend(u.iter().zip(&cfg.r).map(|(u, w)| w.sqrt() * u));
        x = unchecked_step(model, &x, *u, cfg.dt);
    }
    let e = state_error(&x, goal, cfg.wrap_yaw);
    out.extend(e.iter().zip(&cfg.qf).map(|(e, w)| w.sqrt() * e));
}

/// One projected Levenberg-Marquardt step on the shooting problem. The
/// Jacobian is taken by central differences and the step is clipped to the
/// input box. Returns `None` when no damping gives a lower cost.
fn refine_step<P: VelocityPredictor + ?Sized>(
    model: &P,
    x: &[f64; 6],
    seq: &[[f64; 2]],
    cost: f64,
    goal: &[f64; 6],
    cfg: &MpcConfig,
) -> Option<(Vec<[f64; 2]>, f64)> {
    const H: f64 = 1e-6;
    let n = 2 * seq.len();
    let mut r = Vec::new();
    rollout_residuals(model, x, seq, goal, cfg, &mut r);
    let mut jac = DMatrix::<f64>::zeros(r.len(), n);
    let (mut up, mut down) = (Vec::new(), Vec::new());
    let mut probe = seq.to_vec();
    for t in 0..seq.len() {
        for ch in 0..2 {
            let u = seq[t][ch];
            probe[t][ch] = u + H;
            rollout_residuals(model, x, &probe, goal, cfg, &mut up);
            probe[t][ch] = u - H;
            rollout_residuals(model, x, &probe, goal, cfg, &mut down);
            probe[t][ch] = u;
            for (i, (a, b)) in up.iter().zip(&down).enumerate() {
                jac[(i, 2 * t + ch)] = (a - b) / (2.0 * H);
            }
        }
    }
    let r = DVector::from_vec(r);
    let jtj = jac.tr_mul(&jac);
    let jtr = jac.tr_mul(&r);
    if jtr.iter().any(|g| !g.is_finite()) || jtr.norm() == 0.0 {
        return None;
    }
    let scale = jtj.diagonal().max().max(f64::MIN_POSITIVE);
    let mut lambda = 1e-6 * scale;
    for _ in 0..12 {
        let mut sys = jtj.clone();
        for i in 0..n {
            sys[(i, i)] += lambda;
        }
        if let Some(chol) = sys.cholesky() {
            let delta = chol.solve(&jtr);
            let cand: Vec<[f64; 2]> = seq
                .iter()
                .enumerate()
                .map(|(t, u)| ControlInput::clipped(u[0] - delta[2 * t], u[1] - delta[2 * t + 1]).0)
                .collect();
            let c = rollout_cost(model, x, &cand, goal, cfg);
            if c.is_finite() && c < cost {
                return Some((cand, c));
            }
        }
        lambda *= 10.0;
    }
    None
}

/// One cold-start solve with the configured seed.
pub fn solve_mpc<P: VelocityPredictor>(model: P, x: &[f64; 6], goal: &[f64; 6], cfg: &MpcConfig) -> Result<MpcSolution> {
    MpcController::new(model, cfg.clone())?.solve(x, goal)
}

/// A closed-loop run on the true plant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClosedLoopTrace {
    /// `steps + 1` states, starting with `x0`.
    pub states: Vec<[f64; 6]>,
    /// `steps` applied inputs.
    pub inputs: Vec<[f64; 2]>,
    /// Planar distance to the goal position, per state.
    pub err_pos: Vec<f64>,
    /// Yaw error per state, raw or wrapped as configured.
    pub err_yaw: Vec<f64>,
    /// Wall-clock time of each solve, milliseconds.
    pub solve_ms: Vec<f64>,
}

impl ClosedLoopTrace {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// First step index at which both tolerances hold.
    pub fn first_reach(&self, pos_tol: f64, yaw_tol: f64) -> Option<usize> {
        (0..self.states.len()).find(|&t| self.err_pos[t] < pos_tol && self.err_yaw[t].abs() < yaw_tol)
    }

    pub fn max_pos_error(&self) -> f64 {
        self.err_pos.iter().copied().fold(0.0, f64::max)
    }
}

/// Re-solves at every step against `controller`'s model and applies the first
/// input to the true vessel.
pub fn run_closed_loop<P: VelocityPredictor>(
    truth: &VesselParams,
    controller: &mut MpcController<P>,
    x0: [f64; 6],
    goal: [f64; 6],
    max_steps: usize,
) -> Result<ClosedLoopTrace> {
    if max_steps == 0 {
        return Err(Error::config("mpc.steps", "must be >= 1"));
    }
    let dt = controller.config().dt;
    let wrap = controller.config().wrap_yaw;
    let mut trace = ClosedLoopTrace::default();
    let record = |trace: &mut ClosedLoopTrace, x: &[f64; 6]| {
        let e = state_error(x, &goal, wrap);
        trace.states.push(*x);
        trace.err_pos.push(e[0].hypot(e[1]));
        trace.err_yaw.push(e[2]);
    };
    let mut state = VesselState::from_array(x0);
    record(&mut trace, &x0);
    for _ in 0..max_steps {
        let x = state.to_array();
        let start = Instant::now();
        let sol = controller.solve(&x, &goal)?;
        trace.solve_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let u = ControlInput::clipped(sol.u[0], sol.u[1]);
        state = step_truth(truth, &state, u, dt)?;
        trace.inputs.push(u.0);
        record(&mut trace, &state.to_array());
    }
    Ok(trace)
}

/// Convenience wrapper for a learned model.
pub fn run_closed_loop_koopman(
    truth: &VesselParams,
    model: &KoopmanModel,
    x0: [f64; 6],
    goal: [f64; 6],
    cfg: &MpcConfig,
    max_steps: usize,
) -> Result<ClosedLoopTrace> {
    let mut ctl = MpcController::for_koopman(model, cfg.clone())?;
    run_closed_loop(truth, &mut ctl, x0, goal, max_steps)
}
