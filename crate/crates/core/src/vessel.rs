//! Ground-truth surface vessel, random-excitation data generation and the
//! split of one trajectory into per-agent partial trajectories.
//!
//! The plant is a 3-DOF surge/sway/yaw model with differential thrust:
//!
//! ```text
//! m11 u' = tau_x + m22 v r - (X_u + X_uu |u|) u
//! m22 v' =        -m11 u r - (Y_v + Y_vv |v|) v
//! m33 r' = tau_n + (m11 - m22) u v - (N_r + N_rr |r|) r
//! ```
//!
//! with `tau_x = T (u_left + u_right)` and `tau_n = T l (u_right - u_left)`.
//! Body velocities advance with one RK4 step; the pose then moves by the
//! yaw rotation of the *new* velocity, `p' = p + dt R(phi) v(t+1)`, the same
//! kinematics the learned-model controller uses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pose `[p_x, p_y, phi]` in the world frame and body velocities `[v_x, v_y, dphi]`.
/// Yaw is stored unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VesselState {
    pub p: [f64; 3],
    pub v: [f64; 3],
}

impl VesselState {
    pub fn from_array(x: [f64; 6]) -> Self {
        VesselState {
            p: [x[0], x[1], x[2]],
            v: [x[3], x[4], x[5]],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.p[0], self.p[1], self.p[2], self.v[0], self.v[1], self.v[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Left/right thrust commands, each in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput(pub [f64; 2]);

impl ControlInput {
    pub fn new(left: f64, right: f64) -> Result<Self> {
        let u = ControlInput([left, right]);
        if u.in_box() {
            Ok(u)
        } else {
            Err(Error::config(
                "input",
                format!("thrust command [{left}, {right}] outside [-1, 1]"),
            ))
        }
    }

    pub fn clipped(left: f64, right: f64) -> Self {
        ControlInput([left.clamp(-1.0, 1.0), right.clamp(-1.0, 1.0)])
    }

    pub fn in_box(&self) -> bool {
        self.0.iter().all(|x| (-1.0..=1.0).contains(x))
    }

    pub fn left(&self) -> f64 {
        self.0[0]
    }

    pub fn right(&self) -> f64 {
        self.0[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesselParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub yaw_inertia: f64,
    /// Added mass in surge, sway (kg) and yaw (kg m^2).
    pub added_mass: [f64; 3],
    pub linear_damping: [f64; 3],
    pub quadratic_damping: [f64; 3],
    /// Lateral distance of each thruster from the centre line, m.
    pub thruster_offset: f64,
    /// Thrust of one motor at full command, N.
    pub max_thrust: f64,
}

impl Default for VesselParams {
    fn default() -> Self {
        VesselParams {
            mass: 180.0,
            yaw_inertia: 50.0,
            added_mass: [18.0, 90.0, 10.0],
            linear_damping: [50.0, 100.0, 40.0],
            quadratic_damping: [25.0, 50.0, 20.0],
            thruster_offset: 1.0,
            max_thrust: 250.0,
        }
    }
}

impl VesselParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vessel.mass", self.mass),
            ("vessel.yaw_inertia", self.yaw_inertia),
            ("vessel.thruster_offset", self.thruster_offset),
            ("vessel.max_thrust", self.max_thrust),
        ];
        for (field, x) in positive {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        for (field, arr) in [
            ("vessel.added_mass", self.added_mass),
            ("vessel.linear_damping", self.linear_damping),
            ("vessel.quadratic_damping", self.quadratic_damping),
        ] {
            if arr.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::config(field, "entries must be finite and >= 0"));
            }
        }
        Ok(())
    }

    fn inertia(&self) -> [f64; 3] {
        [
            self.mass + self.added_mass[0],
            self.mass + self.added_mass[1],
            self.yaw_inertia + self.added_mass[2],
        ]
    }

    /// Body-frame acceleration.
    pub fn velocity_derivative(&self, v: [f64; 3], u: ControlInput) -> [f64; 3] {
        let [m11, m22, m33] = self.inertia();
        let [vx, vy, r] = v;
        let tau_x = self.max_thrust * (u.left() + u.right());
        let tau_n = self.max_thrust * self.thruster_offset * (u.right() - u.left());
        let damp = |k: usize, x: f64| (self.linear_damping[k] + self.quadratic_damping[k] * x.abs()) * x;
        [
            (tau_x + m22 * vy * r - damp(0, vx)) / m11,
            (-m11 * vx * r - damp(1, vy)) / m22,
            (tau_n + (m11 - m22) * vx * vy - damp(2, r)) / m33,
        ]
    }

    /// Kinetic energy of the body motion, including added mass.
    pub fn kinetic_energy(&self, v: [f64; 3]) -> f64 {
        let m = self.inertia();
        0.5 * (0..3).map(|k| m[k] * v[k] * v[k]).sum::<f64>()
    }

    /// One RK4 step of the body velocities.
    pub fn step_velocity(&self, v: [f64; 3], u: ControlInput, dt: f64) -> [f64; 3] {
        let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
        let k1 = self.velocity_derivative(v, u);
        let k2 = self.velocity_derivative(add(v, k1, 0.5 * dt), u);
        let k3 = self.velocity_derivative(add(v, k2, 0.5 * dt), u);
        let k4 = self.velocity_derivative(add(v, k3, dt), u);
        let mut out = v;
        for k in 0..3 {
            out[k] += dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
        }
        out
    }
}

/// World-frame rate of the pose given heading `phi` and body velocity `v`.
pub fn pose_rate(phi: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = phi.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

/// Advances the pose by `dt` using the heading at the start of the step and
/// the body velocity at its end.
pub fn integrate_pose(p: [f64; 3], v_next: [f64; 3], dt: f64) -> [f64; 3] {
    let rate = pose_rate(p[2], v_next);
    [p[0] + rate[0] * dt, p[1] + rate[1] * dt, p[2] + rate[2] * dt]
}

/// One step of the ground-truth plant.
pub fn step_truth(params: &VesselParams, s: &VesselState, u: ControlInput, dt: f64) -> Result<VesselState> {
    let v = params.step_velocity(s.v, u, dt);
    let next = VesselState {
        p: integrate_pose(s.p, v, dt),
        v,
    };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::NonFiniteState("vessel step"))
    }
}

/// Random excitation: i.i.d. Gaussian thrust per channel, clipped to the box
/// and held for `hold` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub sigma: f64,
    pub hold: usize,
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation { sigma: 0.5, hold: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<VesselState>,
    pub inputs: Vec<ControlInput>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// The sub-trajectory covering time indices `start..=end`.
    pub fn segment(&self, agent_id: usize, start: usize, end: usize) -> Result<Segment> {
        if start >= end || end > self.len() {
            return Err(Error::IntervalOutOfRange {
                start,
                end,
                len: self.len(),
            });
        }
        Ok(Segment {
            agent_id,
            start,
            states: self.states[start..=end].to_vec(),
            inputs: self.inputs[start..end].to_vec(),
        })
    }
}

pub fn generate_trajectory(
    params: &VesselParams,
    seed: u64,
    steps: usize,
    dt: f64,
    excitation: Excitation,
) -> Result<Trajectory> {
    if steps < 2 {
        return Err(Error::config("data.steps", "must be at least 2"));
    }
    if !(dt > 0.0) {
        return Err(Error::config("data.dt", "must be > 0"));
    }
    let hold = excitation.hold.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut state = VesselState::default();
    states.push(state);
    let mut current = ControlInput::default();
    for t in 0..steps {
        if t % hold == 0 {
            let left: f64 = StandardNormal.sample(&mut rng);
            let right: f64 = StandardNormal.sample(&mut rng);
            current = ControlInput::clipped(excitation.sigma * left, excitation.sigma * right);
        }
        state = step_truth(params, &state, current, dt)?;
        inputs.push(current);
        states.push(state);
    }
    Ok(Trajectory {
        dt,
        states,
        inputs,
        seed,
    })
}

/// One agent's private slice: `T_i + 1` states and the `T_i` inputs between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub agent_id: usize,
    pub start: usize,
    pub states: Vec<VesselState>,
    pub inputs: Vec<ControlInput>,
}

impl Segment {
    /// Number of transitions `T_i`.
    pub fn transitions(&self) -> usize {
        self.inputs.len()
    }

    pub fn end(&self) -> usize {
        self.start + self.transitions()
    }
}

/// Cuts the trajectory into one segment per `(start, end)` interval. Intervals
/// may overlap.
pub fn partition_trajectory(traj: &Trajectory, intervals: &[(usize, usize)]) -> Result<Vec<Segment>> {
    intervals
        .iter()
        .enumerate()
        .map(|(i, &(start, end))| traj.segment(i, start, end))
        .collect()
}
