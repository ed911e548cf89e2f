//! Checks shared by the property, gradient, privacy and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ddkl::consensus::{
    build_consensus_states, centralized_ls_oracle, disagreement, matrix_update_round, theta_mixing_round,
    LossWeighting, MatrixMessage, ThetaMessage,
};
use ddkl::graph::{metropolis_weights, uniform_consensus_weights, Graph};
use ddkl::io::{read_trajectory_csv, write_trajectory_csv, Provenance};
use ddkl::koopman::{local_loss, predict_next, DataMatrices, FusedPredictor, KoopmanModel, VelocityPredictor};
use ddkl::lift::{koopman_grads, loss_and_grad, mse_loss_and_grad, MlpParams};
use ddkl::mpc::{combined_step, run_closed_loop, trajectory_cost, MpcConfig, MpcController};
use ddkl::train::TruthPredictor;
use ddkl::vessel::{
    generate_trajectory, partition_trajectory, step_truth, ControlInput, Excitation, VesselParams, VesselState,
};
use nalgebra::{DMatrix, Rotation2, Vector2};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// He-uniform weights plus random biases.
pub fn random_mlp(n_in: usize, hidden: usize, n_out: usize, seed: u64) -> MlpParams {
    let mut p = MlpParams::he_uniform(n_in, hidden, n_out, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for b in p.b1_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    for b in p.b2_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    p
}

/// Random data with `m` input channels lifted by `theta`.
pub fn random_dm(seed: u64, theta: &MlpParams, m: usize, width: usize) -> DataMatrices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, 3, width);
    let xn = randn(&mut rng, 3, width);
    let u = randn(&mut rng, m, width);
    DataMatrices::from_columns(x, xn, u, theta).unwrap()
}

/// A spanning tree plus random extra edges.
pub fn random_connected_graph(n: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for k in 1..n {
        edges.push((rng.gen_range(0..k), k));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(0.25) {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, &edges).unwrap()
}

pub fn random_koopman(seed: u64, hidden: usize, scale: f64) -> KoopmanModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = randn(&mut rng, 8, 8) * (scale / 8f64.sqrt());
    let b = randn(&mut rng, 8, 2) * scale;
    let c = randn(&mut rng, 3, 8) * (scale / 8f64.sqrt());
    KoopmanModel::new(a, b, c, random_mlp(3, hidden, 8, seed)).unwrap()
}

// ---------------------------------------------------------------------------
// Gradient checks

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        self.checked += 1;
        self.worst = self.worst.max(rel);
        if !(rel <= GRAD_REL_TOL) {
            self.failures.push(format!("{what}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"));
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn near_kink(theta: &MlpParams, cols: &[&DMatrix<f64>]) -> bool {
    let (n_in, hidden, _) = theta.dims();
    cols.iter().any(|x| {
        (0..x.ncols()).any(|t| {
            (0..hidden).any(|j| {
                let pre = theta.b1()[j] + (0..n_in).map(|k| theta.w1()[n_in * j + k] * x[(k, t)]).sum::<f64>();
                pre.abs() < KINK_MARGIN
            })
        })
    })
}

/// Central differences on the Koopman loss in the lift parameters, `M` and
/// `C`, for `instances` random problems with `T` cycling through 1..=8.
pub fn koopman_gradcheck(instances: u64, theta_coords: usize, matrix_coords: usize) -> GradReport {
    let mut report = GradReport::default();
    let mut seed = 0u64;
    for inst in 0..instances {
        let t_len = 1 + (inst as usize % 8);
        let (theta, m, c, x, xn, u) = loop {
            seed += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random_mlp(3, 256, 8, seed);
            let m = randn(&mut rng, 8, 10) * 0.5;
            let c = randn(&mut rng, 3, 8) * 0.5;
            let x = randn(&mut rng, 3, t_len);
            let xn = randn(&mut rng, 3, t_len);
            let u = randn(&mut rng, 2, t_len);
            if !near_kink(&theta, &[&x, &xn]) {
                break (theta, m, c, x, xn, u);
            }
        };
        let g = koopman_grads(&theta, &m, &c, &x, &xn, &u, true).unwrap();
        let (loss2, grad2) = loss_and_grad(&theta, &m, &c, &x, &xn, &u).unwrap();
        assert_eq!((g.loss, &g.theta), (loss2, &grad2));
        let loss_at = |th: &MlpParams, m: &DMatrix<f64>, c: &DMatrix<f64>| loss_and_grad(th, m, c, &x, &xn, &u).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
        for _ in 0..theta_coords {
            let k = rng.gen_range(0..theta.len());
            let mut plus = theta.clone();
            plus.flat_mut()[k] += FD_STEP;
            let mut minus = theta.clone();
            minus.flat_mut()[k] -= FD_STEP;
            let fd = (loss_at(&plus, &m, &c) - loss_at(&minus, &m, &c)) / (2.0 * FD_STEP);
            report.record(format!("instance {inst} theta[{k}]"), g.theta[k], fd);
        }
        let gm = g.m.as_ref().unwrap();
        let gc = g.c.as_ref().unwrap();
        for _ in 0..matrix_coords {
            let (i, j) = (rng.gen_range(0..m.nrows()), rng.gen_range(0..m.ncols()));
            let (mut mp, mut mm) = (m.clone(), m.clone());
            mp[(i, j)] += FD_STEP;
            mm[(i, j)] -= FD_STEP;
            let fd = (loss_at(&theta, &mp, &c) - loss_at(&theta, &mm, &c)) / (2.0 * FD_STEP);
            report.record(format!("instance {inst} M[{i},{j}]"), gm[(i, j)], fd);

            let (i, j) = (rng.gen_range(0..c.nrows()), rng.gen_range(0..c.ncols()));
            let (mut cp, mut cm) = (c.clone(), c.clone());
            cp[(i, j)] += FD_STEP;
            cm[(i, j)] -= FD_STEP;
            let fd = (loss_at(&theta, &m, &cp) - loss_at(&theta, &m, &cm)) / (2.0 * FD_STEP);
            report.record(format!("instance {inst} C[{i},{j}]"), gc[(i, j)], fd);
        }
    }
    report
}

/// Central differences on the direct-regression loss.
pub fn mlp_gradcheck(instances: u64, coords: usize) -> GradReport {
    let mut report = GradReport::default();
    let mut seed = 100u64;
    for inst in 0..instances {
        let t_len = 1 + (inst as usize % 8);
        let (theta, z, y) = loop {
            seed += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = random_mlp(5, 256, 3, seed);
            let z = randn(&mut rng, 5, t_len);
            let y = randn(&mut rng, 3, t_len);
            if !near_kink(&theta, &[&z]) {
                break (theta, z, y);
            }
        };
        let (_, grad) = mse_loss_and_grad(&theta, &z, &y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1);
        for _ in 0..coords {
            let k = rng.gen_range(0..theta.len());
            let mut plus = theta.clone();
            plus.flat_mut()[k] += FD_STEP;
            let mut minus = theta.clone();
            minus.flat_mut()[k] -= FD_STEP;
            let lp = mse_loss_and_grad(&plus, &z, &y).unwrap().0;
            let lm = mse_loss_and_grad(&minus, &z, &y).unwrap().0;
            report.record(format!("instance {inst} theta[{k}]"), grad[k], (lp - lm) / (2.0 * FD_STEP));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Privacy audit

fn json_keys<T: serde::Serialize>(msg: &T) -> BTreeSet<String> {
    match serde_json::to_value(msg).unwrap() {
        serde_json::Value::Object(map) => map.keys().cloned().collect(),
        v => panic!("message is not a struct: {v}"),
    }
}

/// The two inter-agent message types carry exactly `(M, E, C, Ê)` and `θ`
/// besides the sender id, and no payload has a data-length dimension.
pub fn privacy_audit() -> Result<(), String> {
    let theta = random_mlp(3, 16, 4, 1);
    let widths = [37usize, 53, 71];
    let all_dm: Vec<DataMatrices> = widths
        .iter()
        .enumerate()
        .map(|(i, &w)| random_dm(i as u64, &theta, 2, w))
        .collect();
    let g = Graph::ring(3).unwrap();
    let w = uniform_consensus_weights(&g);
    let states = build_consensus_states(&all_dm, 1.0, &w, LossWeighting::Uniform, 0).map_err(|e| e.to_string())?;

    let want: BTreeSet<String> = ["from", "m", "e", "c", "e_hat"].iter().map(|s| s.to_string()).collect();
    for s in &states {
        let msg: MatrixMessage = s.message();
        let keys = json_keys(&msg);
        if keys != want {
            return Err(format!("matrix message fields {keys:?}"));
        }
        for (name, mat) in [("m", &msg.m), ("e", &msg.e), ("c", &msg.c), ("e_hat", &msg.e_hat)] {
            if widths.contains(&mat.nrows()) || widths.contains(&mat.ncols()) {
                return Err(format!("{name} has a data-sized dimension {:?}", mat.shape()));
            }
        }
        if msg.m.shape() != (6, 4) || msg.e.shape() != (6, 4) || msg.c.shape() != (4, 3) || msg.e_hat.shape() != (4, 3) {
            return Err("unexpected message shapes".into());
        }
    }
    let tm = ThetaMessage {
        from: 0,
        theta: theta.flat().to_vec(),
    };
    let keys = json_keys(&tm);
    if keys != ["from", "theta"].iter().map(|s| s.to_string()).collect::<BTreeSet<_>>() {
        return Err(format!("theta message fields {keys:?}"));
    }
    if tm.theta.len() != theta.len() {
        return Err("theta payload is not the parameter vector".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Property suites

pub type Suite = (&'static str, fn() -> Result<(), String>);

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(TestCaseError::fail(format!($($fmt)*)));
        }
    };
}

pub fn metropolis_doubly_stochastic() -> Result<(), String> {
    check(200, (2usize..=12, any::<u64>()), |(n, seed)| {
        let g = random_connected_graph(n, seed);
        let w = metropolis_weights(&g);
        ensure!(w.w_hat == w.w_hat.transpose(), "not symmetric");
        ensure!(w.is_doubly_stochastic(1e-12), "not doubly stochastic: {}", w.w_hat);
        ensure!(w.w_hat.iter().all(|&x| x >= 0.0), "negative weight");
        let slem = w.second_largest_eigen_magnitude();
        ensure!(slem < 1.0 - 1e-9, "second eigenvalue magnitude {slem}");
        Ok(())
    })
}

pub fn consensus_weights_symmetric() -> Result<(), String> {
    check(200, (1usize..=12, any::<u64>()), |(n, seed)| {
        let g = random_connected_graph(n, seed);
        let w = uniform_consensus_weights(&g);
        ensure!(w.w == w.w.transpose(), "w_ij != w_ji");
        for i in 0..n {
            ensure!(w.d[i] == g.neighbors(i).len() as f64, "d_i mismatch");
        }
        Ok(())
    })
}

fn velocity() -> impl Strategy<Value = [f64; 3]> {
    [-2.0..2.0f64, -1.0..1.0f64, -2.0..2.0f64]
}

fn input() -> impl Strategy<Value = [f64; 2]> {
    [-1.0..=1.0f64, -1.0..=1.0f64]
}

pub fn energy_dissipation() -> Result<(), String> {
    check(100, velocity(), |v| {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let params = VesselParams::default();
        let mut s = VesselState { p: [0.0; 3], v };
        let mut ke = params.kinetic_energy(v);
        for k in 0..300 {
            s = step_truth(&params, &s, ControlInput([0.0, 0.0]), 0.02).unwrap();
            let next = params.kinetic_energy(s.v);
            ensure!(next <= ke, "energy rose at step {k}: {ke:e} -> {next:e}");
            ke = next;
        }
        Ok(())
    })
}

pub fn rotation_consistency() -> Result<(), String> {
    check(300, ([-50.0..50.0f64, -50.0..50.0f64, -10.0..10.0f64], velocity(), input()), |(p, v, u)| {
        let params = VesselParams::default();
        let dt = 0.02;
        let next = step_truth(&params, &VesselState { p, v }, ControlInput(u), dt).unwrap();
        let vn = params.step_velocity(v, ControlInput(u), dt);
        let d = Rotation2::new(p[2]) * Vector2::new(vn[0], vn[1]) * dt;
        ensure!((next.p[0] - p[0] - d.x).abs() <= 1e-12, "x displacement");
        ensure!((next.p[1] - p[1] - d.y).abs() <= 1e-12, "y displacement");
        ensure!((next.p[2] - p[2] - dt * vn[2]).abs() <= 1e-12, "yaw displacement");
        Ok(())
    })
}

pub fn replay_determinism() -> Result<(), String> {
    check(10, (any::<u64>(), 1usize..150, 1usize..150), |(seed, a, len)| {
        let traj = generate_trajectory(&VesselParams::default(), seed, 300, 0.02, Excitation::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory_csv(&path, &traj, &Provenance::new("h", seed)).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        ensure!(back == traj, "trajectory changed on reload");
        let iv = [(0, 1), (a, a + len), (100, 300)];
        let s1 = partition_trajectory(&traj, &iv).unwrap();
        let s2 = partition_trajectory(&back, &iv).unwrap();
        ensure!(s1 == s2, "segments differ");
        Ok(())
    })
}

fn koopman_instance(seed: u64, t_len: usize) -> (MlpParams, DMatrix<f64>, DMatrix<f64>, DataMatrices) {
    let theta = random_mlp(3, 32, 8, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    let m = randn(&mut rng, 8, 10);
    let c = randn(&mut rng, 3, 8);
    (theta.clone(), m, c, random_dm(seed, &theta, 2, t_len))
}

fn permuted(dm: &DataMatrices, perm: &[usize], theta: &MlpParams) -> DataMatrices {
    let pick = |x: &DMatrix<f64>| DMatrix::from_fn(x.nrows(), perm.len(), |i, j| x[(i, perm[j])]);
    DataMatrices::from_columns(pick(&dm.x), pick(&dm.x_next), pick(&dm.u), theta).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

pub fn lift_loss_nonnegative() -> Result<(), String> {
    check(100, (any::<u64>(), 1usize..=16), |(seed, t)| {
        let (theta, m, c, dm) = koopman_instance(seed, t);
        let (loss, _) = loss_and_grad(&theta, &m, &c, &dm.x, &dm.x_next, &dm.u).unwrap();
        ensure!(loss >= 0.0, "negative loss {loss}");
        Ok(())
    })
}

pub fn lift_permutation_insensitive() -> Result<(), String> {
    check(50, (any::<u64>(), 2usize..=16), |(seed, t)| {
        let (theta, m, c, dm) = koopman_instance(seed, t);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pdm = permuted(&dm, &perm, &theta);
        let (l1, g1) = loss_and_grad(&theta, &m, &c, &dm.x, &dm.x_next, &dm.u).unwrap();
        let (l2, g2) = loss_and_grad(&theta, &m, &c, &pdm.x, &pdm.x_next, &pdm.u).unwrap();
        ensure!(close(l1, l2, 1e-12), "loss {l1} vs {l2}");
        let gmax = g1.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        for (a, b) in g1.iter().zip(&g2) {
            ensure!((a - b).abs() <= 1e-12 * gmax, "grad {a} vs {b}");
        }
        Ok(())
    })
}

/// Per-pair sum with explicit loops.
fn loop_form_loss(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, dm: &DataMatrices) -> f64 {
    let (r, m, n, t_len) = (a.nrows(), b.ncols(), c.nrows(), dm.width());
    let mut total = 0.0;
    for t in 0..t_len {
        for i in 0..r {
            let mut pred = 0.0;
            for k in 0..r {
                pred += a[(i, k)] * dm.g[(k, t)];
            }
            for k in 0..m {
                pred += b[(i, k)] * dm.u[(k, t)];
            }
            total += (dm.g_next[(i, t)] - pred).powi(2);
        }
        for i in 0..n {
            let mut rec = 0.0;
            for k in 0..r {
                rec += c[(i, k)] * dm.g[(k, t)];
            }
            total += (dm.x[(i, t)] - rec).powi(2);
        }
    }
    total / (2.0 * t_len as f64)
}

pub fn loss_form_equivalence() -> Result<(), String> {
    check(100, (any::<u64>(), 1usize..=40), |(seed, t)| {
        let (_, m, c, dm) = koopman_instance(seed, t);
        let (a, b) = (m.columns(0, 8).into_owned(), m.columns(8, 2).into_owned());
        let frob = local_loss(&a, &b, &c, &dm);
        let lp = loop_form_loss(&a, &b, &c, &dm);
        ensure!(close(frob, lp, 1e-12), "{frob} vs {lp}");
        Ok(())
    })
}

pub fn local_loss_permutation_invariant() -> Result<(), String> {
    check(50, (any::<u64>(), 2usize..=40), |(seed, t)| {
        let (theta, m, c, dm) = koopman_instance(seed, t);
        let (a, b) = (m.columns(0, 8).into_owned(), m.columns(8, 2).into_owned());
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pdm = permuted(&dm, &perm, &theta);
        let (l1, l2) = (local_loss(&a, &b, &c, &dm), local_loss(&a, &b, &c, &pdm));
        ensure!(close(l1, l2, 1e-12), "{l1} vs {l2}");
        Ok(())
    })
}

pub fn prediction_linear_in_input() -> Result<(), String> {
    check(100, (any::<u64>(), velocity(), input(), input()), |(seed, v, u1, u2)| {
        let model = random_koopman(seed, 32, 1.0);
        let sum = [u1[0] + u2[0], u1[1] + u2[1]];
        let lhs = predict_next(&model, v, sum);
        let p2 = predict_next(&model, v, u2);
        let p1 = predict_next(&model, v, u1);
        let p0 = predict_next(&model, v, [0.0, 0.0]);
        for k in 0..3 {
            let (l, r) = (lhs[k] - p2[k], p1[k] - p0[k]);
            let scale = lhs[k].abs().max(p2[k].abs()).max(p1[k].abs()).max(p0[k].abs()).max(1.0);
            ensure!((l - r).abs() <= 1e-12 * scale, "channel {k}: {l} vs {r}");
        }
        Ok(())
    })
}

pub fn mixing_preserves_average() -> Result<(), String> {
    check(100, (2usize..=12, any::<u64>()), |(n, seed)| {
        let g = random_connected_graph(n, seed);
        let w = metropolis_weights(&g);
        let thetas: Vec<MlpParams> = (0..n).map(|i| random_mlp(3, 8, 4, seed.wrapping_add(i as u64))).collect();
        let zero = vec![vec![0.0; thetas[0].len()]; n];
        let alphas = vec![1e-3; n];
        let mixed = theta_mixing_round(&thetas, &zero, &w, &alphas).unwrap();
        let avg = |ts: &[MlpParams], k: usize| ts.iter().map(|t| t.flat()[k]).sum::<f64>() / n as f64;
        for k in 0..thetas[0].len() {
            let (a, b) = (avg(&thetas, k), avg(&mixed, k));
            ensure!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "coordinate {k}: {a} vs {b}");
        }
        Ok(())
    })
}

/// Small random consensus problem: `n` agents, lift `r`, `m` inputs, `T_i = width`.
fn consensus_problem(seed: u64, n: usize, r: usize, m: usize, width: usize) -> Vec<DataMatrices> {
    let theta = random_mlp(3, 16, r, seed);
    (0..n).map(|i| random_dm(seed.wrapping_mul(31).wrapping_add(i as u64), &theta, m, width)).collect()
}

pub fn stationary_point_is_fixed() -> Result<(), String> {
    check(5, any::<u64>(), |seed| {
        let all = consensus_problem(seed, 3, 4, 1, 20);
        let g = Graph::ring(3).unwrap();
        let w = uniform_consensus_weights(&g);
        let mut states = build_consensus_states(&all, 1.0, &w, LossWeighting::Uniform, seed).unwrap();
        for _ in 0..6000 {
            matrix_update_round(&mut states, &g, &w).unwrap();
        }
        let before: Vec<_> = states.iter().map(|s| (s.m(), s.c())).collect();
        matrix_update_round(&mut states, &g, &w).unwrap();
        for (s, (m, c)) in states.iter().zip(&before) {
            ensure!((s.m() - m).amax() <= 1e-9, "M moved by {}", (s.m() - m).amax());
            ensure!((s.c() - c).amax() <= 1e-9, "C moved by {}", (s.c() - c).amax());
        }
        Ok(())
    })
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn oracle_convergence_small() -> Result<(), String> {
    check(5, any::<u64>(), |seed| {
        let all = consensus_problem(seed, 3, 4, 1, 20);
        let g = Graph::ring(3).unwrap();
        let w = uniform_consensus_weights(&g);
        let mut states = build_consensus_states(&all, 1.0, &w, LossWeighting::Uniform, seed).unwrap();
        for _ in 0..5000 {
            matrix_update_round(&mut states, &g, &w).unwrap();
        }
        let (m_star, c_star) = centralized_ls_oracle(&all, LossWeighting::Uniform).unwrap();
        for s in &states {
            ensure!(rel(&s.m(), &m_star) <= 1e-6, "M error {}", rel(&s.m(), &m_star));
            ensure!(rel(&s.c(), &c_star) <= 1e-6, "C error {}", rel(&s.c(), &c_star));
        }
        Ok(())
    })
}

/// Least-squares slope and R^2 of `ys` against `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

pub fn disagreement_trend_decreasing() -> Result<(), String> {
    check(5, any::<u64>(), |seed| {
        let all = consensus_problem(seed, 4, 4, 2, 30);
        let g = Graph::ring(4).unwrap();
        let w = uniform_consensus_weights(&g);
        let mut states = build_consensus_states(&all, 1.0, &w, LossWeighting::Uniform, seed).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for s in 0..=2000 {
            if s >= 100 {
                let (dm, dc) = disagreement(&states);
                xs.push(s as f64);
                ys.push(dm.max(dc).max(f64::MIN_POSITIVE).ln());
            }
            matrix_update_round(&mut states, &g, &w).unwrap();
        }
        let (slope, _) = linear_fit(&xs, &ys);
        ensure!(slope < 0.0, "slope {slope}");
        Ok(())
    })
}

fn state6() -> impl Strategy<Value = [f64; 6]> {
    [-30.0..30.0f64, -30.0..30.0f64, -4.0..4.0f64, -1.0..1.0f64, -0.5..0.5f64, -1.0..1.0f64]
}

pub fn translation_commutes() -> Result<(), String> {
    check(200, (any::<u64>(), state6(), input(), [-1e3..1e3f64, -1e3..1e3f64]), |(seed, x, u, s)| {
        let model = FusedPredictor::new(&random_koopman(seed % 16, 32, 1.0));
        let shifted = [x[0] + s[0], x[1] + s[1], x[2], x[3], x[4], x[5]];
        let a = combined_step(&model, &x, u, 0.02).unwrap();
        let b = combined_step(&model, &shifted, u, 0.02).unwrap();
        let tol = 1e-12 * (1.0 + x[0].abs().max(x[1].abs()) + s[0].abs().max(s[1].abs()));
        ensure!((b[0] - a[0] - s[0]).abs() <= tol && (b[1] - a[1] - s[1]).abs() <= tol, "position shift");
        ensure!(a[2..] == b[2..], "heading or velocity changed");
        Ok(())
    })
}

/// `v+ = 0.9 v + 0.1 [u0 + u1, 0, u1 - u0]`: at rest with zero input it stays put.
pub struct DampedToy;

impl VelocityPredictor for DampedToy {
    fn predict_velocity(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
        [0.9 * v[0] + 0.1 * (u[0] + u[1]), 0.9 * v[1], 0.9 * v[2] + 0.1 * (u[1] - u[0])]
    }
}

pub fn cost_nonnegative_and_zero_only_at_goal() -> Result<(), String> {
    let inputs = proptest::collection::vec(input(), 1..12);
    check(200, (any::<u64>(), state6(), state6(), inputs), |(seed, x, goal, us)| {
        let cfg = MpcConfig::default();
        let model = FusedPredictor::new(&random_koopman(seed % 16, 32, 1.0));
        let c = trajectory_cost(&model, &x, &us, &goal, &cfg).unwrap();
        ensure!(c >= 0.0, "negative cost {c}");

        let rest = [goal[0], goal[1], goal[2], 0.0, 0.0, 0.0];
        let zero = vec![[0.0; 2]; us.len()];
        let c0 = trajectory_cost(&DampedToy, &rest, &zero, &rest, &cfg).unwrap();
        ensure!(c0 == 0.0, "cost {c0} at goal with zero input");
        if us.iter().any(|u| u[0] != 0.0 || u[1] != 0.0) {
            let c1 = trajectory_cost(&DampedToy, &rest, &us, &rest, &cfg).unwrap();
            ensure!(c1 > 0.0, "zero cost with nonzero input");
        }
        if x != rest {
            let c2 = trajectory_cost(&DampedToy, &x, &zero, &rest, &cfg).unwrap();
            ensure!(c2 > 0.0, "zero cost away from goal");
        }
        Ok(())
    })
}

/// Twenty seeded problems; final elite-mean cost never exceeds the first.
pub fn cem_elite_mean_monotone() -> Result<(), String> {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: [f64; 6] = std::array::from_fn(|k| rng.gen_range(-1.0..1.0) * if k < 2 { 10.0 } else { 1.0 });
        let goal: [f64; 6] = std::array::from_fn(|k| if k < 3 { rng.gen_range(-3.0..3.0) } else { 0.0 });
        let cfg = MpcConfig {
            seed,
            samples: 100,
            elites: 10,
            iterations: 6,
            horizon: 15,
            ..MpcConfig::default()
        };
        let model = FusedPredictor::new(&random_koopman(seed, 32, 1.0));
        let mut ctl = MpcController::new(model, cfg).map_err(|e| e.to_string())?;
        let sol = ctl.solve(&x, &goal).map_err(|e| e.to_string())?;
        let costs = &sol.elite_mean_costs;
        if costs.last() > costs.first() {
            return Err(format!("seed {seed}: elite means {costs:?}"));
        }
        for w in costs.windows(2) {
            if w[1] > w[0] {
                return Err(format!("seed {seed}: elite mean rose {costs:?}"));
            }
        }
    }
    Ok(())
}

pub fn applied_inputs_in_box() -> Result<(), String> {
    check(6, (any::<u64>(), state6(), state6()), |(seed, x0, goal)| {
        let cfg = MpcConfig {
            seed,
            samples: 60,
            elites: 6,
            iterations: 3,
            horizon: 10,
            init_std: 2.0,
            ..MpcConfig::default()
        };
        let truth = VesselParams::default();
        let mut ctl = MpcController::new(TruthPredictor { params: truth.clone(), dt: 0.02 }, cfg.clone()).unwrap();
        let trace = run_closed_loop(&truth, &mut ctl, x0, goal, 15).unwrap();
        for u in &trace.inputs {
            ensure!(ControlInput(*u).in_box(), "input {u:?} outside the box");
        }
        let mut ctl = MpcController::new(FusedPredictor::new(&random_koopman(seed % 16, 32, 1.0)), cfg).unwrap();
        let sol = ctl.solve(&x0, &goal).unwrap();
        ensure!(sol.plan.iter().all(|u| ControlInput(*u).in_box()), "plan outside the box");
        Ok(())
    })
}

pub fn property_suites() -> Vec<Suite> {
    vec![
        ("metropolis weights doubly stochastic", metropolis_doubly_stochastic),
        ("consensus weights symmetric", consensus_weights_symmetric),
        ("kinetic energy non-increasing at zero input", energy_dissipation),
        ("pose update is the body-to-world rotation", rotation_consistency),
        ("trajectory replay and partition", replay_determinism),
        ("lift loss non-negative", lift_loss_nonnegative),
        ("lift loss and gradient permutation insensitive", lift_permutation_insensitive),
        ("loop and Frobenius loss forms agree", loss_form_equivalence),
        ("local loss permutation invariant", local_loss_permutation_invariant),
        ("prediction linear in the input", prediction_linear_in_input),
        ("mixing preserves the average", mixing_preserves_average),
        ("stationary point is a fixed point", stationary_point_is_fixed),
        ("matrix consensus reaches the pooled optimum", oracle_convergence_small),
        ("disagreement trends down", disagreement_trend_decreasing),
        ("pose step commutes with translation", translation_commutes),
        ("MPC cost non-negative, zero only at goal", cost_nonnegative_and_zero_only_at_goal),
        ("CEM elite mean non-increasing", cem_elite_mean_monotone),
        ("applied inputs stay in the box", applied_inputs_in_box),
    ]
}
