//! Koopman model container, per-agent data matrices, the local loss and
//! one-step / multi-step velocity prediction.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lift::{self, MlpParams};
use crate::vessel::Segment;

/// Per-channel affine scaling of the velocity, stored with a model so that
/// predictions come back in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Channel statistics of a set of velocities. Channels with zero spread keep unit scale.
    pub fn fit(velocities: &[[f64; 3]]) -> Self {
        let n = velocities.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for v in velocities {
            for k in 0..3 {
                mean[k] += v[k] / n;
            }
        }
        let mut std = [0.0; 3];
        for v in velocities {
            for k in 0..3 {
                std[k] += (v[k] - mean[k]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn scale(&self, v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| (v[k] - self.mean[k]) / self.std[k])
    }

    pub fn unscale(&self, z: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.mean[k] + self.std[k] * z[k])
    }
}

/// `{A, B, C, theta}`: lifted dynamics `g+ = A g + B u`, projection `v = C g`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub theta: MlpParams,
    pub normalization: Option<Normalization>,
}

impl KoopmanModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, theta: MlpParams) -> Result<Self> {
        let model = KoopmanModel {
            a,
            b,
            c,
            theta,
            normalization: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Splits `M = [A B]`.
    pub fn from_stacked(m: &DMatrix<f64>, c: DMatrix<f64>, theta: MlpParams) -> Result<Self> {
        let r = m.nrows();
        if m.ncols() < r {
            return Err(Error::Shape(format!("M has {} columns, need at least {r}", m.ncols())));
        }
        let a = m.columns(0, r).into_owned();
        let b = m.columns(r, m.ncols() - r).into_owned();
        Self::new(a, b, c, theta)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.theta.n_out();
        let n = self.theta.n_in();
        if self.a.shape() != (r, r) || self.b.nrows() != r || self.c.shape() != (n, r) {
            return Err(Error::Shape(format!(
                "inconsistent model: A {:?}, B {:?}, C {:?} for lift {n} -> {r}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape()
            )));
        }
        let finite = self.a.iter().chain(self.b.iter()).chain(self.c.iter()).all(|x| x.is_finite());
        if !finite || !self.theta.is_finite() {
            return Err(Error::NonFiniteState("Koopman model"));
        }
        Ok(())
    }

    /// Stacked `M = [A B]`.
    pub fn m(&self) -> DMatrix<f64> {
        let r = self.a.nrows();
        let mut m = DMatrix::zeros(r, r + self.b.ncols());
        m.columns_mut(0, r).copy_from(&self.a);
        m.columns_mut(r, self.b.ncols()).copy_from(&self.b);
        m
    }

    pub fn state_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn lift_dim(&self) -> usize {
        self.a.nrows()
    }
}

/// `X, Xbar, U` and their lifts `G, Gbar` for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub x: DMatrix<f64>,
    pub x_next: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub g_next: DMatrix<f64>,
}

impl DataMatrices {
    /// Builds the matrices from raw columns and lifts them with `theta`.
    pub fn from_columns(x: DMatrix<f64>, x_next: DMatrix<f64>, u: DMatrix<f64>, theta: &MlpParams) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(Error::EmptySegment);
        }
        if x_next.shape() != x.shape() || u.ncols() != x.ncols() {
            return Err(Error::Shape("X, Xbar and U must share width".into()));
        }
        let g = lift::lift_batch(theta, &x);
        let g_next = lift::lift_batch(theta, &x_next);
        Ok(DataMatrices { x, x_next, u, g, g_next })
    }

    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    /// `N = [G; U]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (r, m) = (self.g.nrows(), self.u.nrows());
        let mut n = DMatrix::zeros(r + m, self.width());
        n.rows_mut(0, r).copy_from(&self.g);
        n.rows_mut(r, m).copy_from(&self.u);
        n
    }

    /// Re-lifts with new parameters, keeping the raw data.
    pub fn relift(&mut self, theta: &MlpParams) {
        self.g = lift::lift_batch(theta, &self.x);
        self.g_next = lift::lift_batch(theta, &self.x_next);
    }
}

/// Raw velocity/input columns of a segment, optionally normalised.
pub fn segment_columns(seg: &Segment, norm: Option<&Normalization>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let t_len = seg.transitions();
    let vel = |k: usize| {
        let v = seg.states[k].v;
        norm.map_or(v, |n| n.scale(v))
    };
    let x = DMatrix::from_fn(3, t_len, |i, k| vel(k)[i]);
    let x_next = DMatrix::from_fn(3, t_len, |i, k| vel(k + 1)[i]);
    let u = DMatrix::from_fn(2, t_len, |i, k| seg.inputs[k].0[i]);
    (x, x_next, u)
}

pub fn build_data_matrices(seg: &Segment, theta: &MlpParams, norm: Option<&Normalization>) -> Result<DataMatrices> {
    if seg.transitions() == 0 {
        return Err(Error::EmptySegment);
    }
    let (x, x_next, u) = segment_columns(seg, norm);
    DataMatrices::from_columns(x, x_next, u, theta)
}

/// `(1/2T)(||Gbar - [A B][G; U]||_F^2 + ||X - C G||_F^2)`.
pub fn local_loss(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, dm: &DataMatrices) -> f64 {
    let dyn_res = &dm.g_next - a * &dm.g - b * &dm.u;
    let rec_res = &dm.x - c * &dm.g;
    (dyn_res.norm_squared() + rec_res.norm_squared()) / (2.0 * dm.width() as f64)
}

/// One-step velocity prediction `C (A g(v) + B u)`.
pub fn predict_next(model: &KoopmanModel, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
    let z = model.normalization.map_or(v, |n| n.scale(v));
    let g = model.theta.forward(&z);
    let r = model.lift_dim();
    let mut lifted = vec![0.0; r];
    for i in 0..r {
        let mut acc = 0.0;
        for k in 0..r {
            acc += model.a[(i, k)] * g[k];
        }
        for k in 0..model.input_dim() {
            acc += model.b[(i, k)] * u[k];
        }
        lifted[i] = acc;
    }
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..r).map(|k| model.c[(i, k)] * lifted[k]).sum();
    }
    model.normalization.map_or(out, |n| n.unscale(out))
}

/// Iterated one-step prediction.
pub fn rollout(model: &KoopmanModel, v0: [f64; 3], inputs: &[[f64; 2]]) -> Result<Vec<[f64; 3]>> {
    let mut v = v0;
    let mut out = Vec::with_capacity(inputs.len());
    for u in inputs {
        v = predict_next(model, v, *u);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState("Koopman rollout"));
        }
        out.push(v);
    }
    Ok(out)
}

/// Maps `(v_t, u_t)` to a predicted `v_{t+1}`.
pub trait VelocityPredictor {
    fn predict_velocity(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3];
}

impl VelocityPredictor for KoopmanModel {
    fn predict_velocity(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
        predict_next(self, v, u)
    }
}

/// The model collapsed for fast repeated evaluation: `C A W2` is 3 x hidden,
/// so one prediction is a single pass over the hidden units.
#[derive(Debug, Clone)]
pub struct FusedPredictor {
    /// Per hidden unit: `[w1 (3), b1, CAW2 column (3)]`.
    units: Vec<[f64; 7]>,
    offset: [f64; 3],
    cb: [[f64; 2]; 3],
    normalization: Option<Normalization>,
}

impl FusedPredictor {
    pub fn new(model: &KoopmanModel) -> Self {
        let hidden = model.theta.hidden();
        let ca = &model.c * &model.a;
        let w2 = DMatrix::from_row_slice(model.lift_dim(), hidden, model.theta.w2());
        let b2 = DMatrix::from_column_slice(model.lift_dim(), 1, model.theta.b2());
        let caw2 = &ca * w2;
        let off = &ca * b2;
        let cb = &model.c * &model.b;
        let (w1, b1) = (model.theta.w1(), model.theta.b1());
        let units = (0..hidden)
            .map(|j| {
                [
                    w1[3 * j],
                    w1[3 * j + 1],
                    w1[3 * j + 2],
                    b1[j],
                    caw2[(0, j)],
                    caw2[(1, j)],
                    caw2[(2, j)],
                ]
            })
            .collect();
        FusedPredictor {
            units,
            offset: [off[0], off[1], off[2]],
            cb: [0, 1, 2].map(|i| [cb[(i, 0)], cb[(i, 1)]]),
            normalization: model.normalization,
        }
    }

    pub fn predict(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
        let z = self.normalization.map_or(v, |n| n.scale(v));
        let mut out = [0.0; 3];
        for w in &self.units {
            let pre = w[3] + w[0] * z[0] + w[1] * z[1] + w[2] * z[2];
            if pre > 0.0 {
                out[0] += w[4] * pre;
                out[1] += w[5] * pre;
                out[2] += w[6] * pre;
            }
        }
        for i in 0..3 {
            out[i] += self.offset[i] + self.cb[i][0] * u[0] + self.cb[i][1] * u[1];
        }
        self.normalization.map_or(out, |n| n.unscale(out))
    }

    pub fn hidden(&self) -> usize {
        self.units.len()
    }
}

impl VelocityPredictor for FusedPredictor {
    fn predict_velocity(&self, v: [f64; 3], u: [f64; 2]) -> [f64; 3] {
        self.predict(v, u)
    }
}
