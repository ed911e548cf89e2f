//! One-hidden-layer ReLU network used as the Koopman lifting function, with
//! hand-written reverse-mode gradients and an Adam optimizer.
//!
//! Parameters live in one flat vector laid out as `[W1, b1, W2, b2]`, both
//! weight matrices row-major. Consensus mixing and Adam work directly on that
//! vector.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 3;
pub const INPUT_DIM: usize = 2;
pub const LIFT_DIM: usize = 8;
pub const HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    n_in: usize,
    hidden: usize,
    n_out: usize,
    data: Vec<f64>,
}

impl MlpParams {
    pub fn param_count(n_in: usize, hidden: usize, n_out: usize) -> usize {
        hidden * n_in + hidden + n_out * hidden + n_out
    }

    pub fn zeros(n_in: usize, hidden: usize, n_out: usize) -> Self {
        MlpParams {
            n_in,
            hidden,
            n_out,
            data: vec![0.0; Self::param_count(n_in, hidden, n_out)],
        }
    }

    /// He-uniform weights (`|w| <= sqrt(6 / fan_in)`), zero biases.
    pub fn he_uniform(n_in: usize, hidden: usize, n_out: usize, seed: u64) -> Self {
        let mut p = Self::zeros(n_in, hidden, n_out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = (6.0 / n_in as f64).sqrt();
        let b2 = (6.0 / hidden as f64).sqrt();
        for w in p.w1_mut() {
            *w = rng.gen_range(-b1..=b1);
        }
        for w in p.w2_mut() {
            *w = rng.gen_range(-b2..=b2);
        }
        p
    }

    pub fn from_flat(n_in: usize, hidden: usize, n_out: usize, data: Vec<f64>) -> Result<Self> {
        let want = Self::param_count(n_in, hidden, n_out);
        if data.len() != want {
            return Err(Error::Shape(format!(
                "expected {want} parameters for a {n_in}-{hidden}-{n_out} network, got {}",
                data.len()
            )));
        }
        Ok(MlpParams {
            n_in,
            hidden,
            n_out,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_in, self.hidden, self.n_out)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.n_in;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.n_out * self.hidden;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[f64] {
        let [w1, b1, ..] = self.offsets();
        &self.data[w1..b1]
    }

    pub fn b1(&self) -> &[f64] {
        let [_, b1, w2, _] = self.offsets();
        &self.data[b1..w2]
    }

    pub fn w2(&self) -> &[f64] {
        let [.., w2, b2] = self.offsets();
        &self.data[w2..b2]
    }

    pub fn b2(&self) -> &[f64] {
        let [.., b2] = self.offsets();
        &self.data[b2..]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let [w1, b1, ..] = self.offsets();
        &mut self.data[w1..b1]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let [_, b1, w2, _] = self.offsets();
        &mut self.data[b1..w2]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let [.., w2, b2] = self.offsets();
        &mut self.data[w2..b2]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let [.., b2] = self.offsets();
        &mut self.data[b2..]
    }

    /// Hidden activations for one input.
    pub fn hidden_layer(&self, x: &[f64], h: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        let w1 = self.w1();
        let b1 = self.b1();
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &w1[j * self.n_in..(j + 1) * self.n_in];
            let pre = b1[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            *hj = if pre > 0.0 { pre } else { 0.0 };
        }
    }

    /// Output layer applied to hidden activations.
    pub fn output_layer(&self, h: &[f64], out: &mut [f64]) {
        let w2 = self.w2();
        for (o, y) in out.iter_mut().enumerate() {
            let row = &w2[o * self.hidden..(o + 1) * self.hidden];
            *y = self.b2()[o] + dot(row, h);
        }
    }

    pub fn forward_into(&self, x: &[f64], h: &mut [f64], out: &mut [f64]) {
        self.hidden_layer(x, h);
        self.output_layer(h, out);
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        let mut out = vec![0.0; self.n_out];
        self.forward_into(x, &mut h, &mut out);
        out
    }

    /// Adds the parameter gradient of `delta . g(x)` to `grad`, given the
    /// hidden activations `h` of `x`.
    pub fn accumulate_grad(&self, x: &[f64], h: &[f64], delta: &[f64], grad: &mut [f64], dh: &mut [f64]) {
        let [w1o, b1o, w2o, b2o] = self.offsets();
        let (n_in, hidden) = (self.n_in, self.hidden);
        let w2 = self.w2();
        dh.iter_mut().for_each(|x| *x = 0.0);
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[b2o + o] += d;
            let gw2 = &mut grad[w2o + o * hidden..w2o + (o + 1) * hidden];
            for (g, hj) in gw2.iter_mut().zip(h) {
                *g += d * hj;
            }
            let row = &w2[o * hidden..(o + 1) * hidden];
            for (acc, w) in dh.iter_mut().zip(row) {
                *acc += d * w;
            }
        }
        for j in 0..hidden {
            // ReLU subgradient at zero is taken as zero.
            if h[j] <= 0.0 {
                continue;
            }
            let d = dh[j];
            grad[b1o + j] += d;
            let gw1 = &mut grad[w1o + j * n_in..w1o + (j + 1) * n_in];
            for (g, xk) in gw1.iter_mut().zip(x) {
                *g += d * xk;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise the reduction.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Shared initial lifting parameters for the vessel problem (3 -> 256 -> 8).
pub fn init_params(seed: u64) -> MlpParams {
    MlpParams::he_uniform(STATE_DIM, HIDDEN, LIFT_DIM, seed)
}

pub fn lift_forward(theta: &MlpParams, v: &[f64]) -> Vec<f64> {
    theta.forward(v)
}

/// Columnwise lift of an `n x K` matrix.
pub fn lift_batch(theta: &MlpParams, v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(theta.n_out(), v.ncols());
    let mut h = vec![0.0; theta.hidden()];
    let mut y = vec![0.0; theta.n_out()];
    for k in 0..v.ncols() {
        let col: Vec<f64> = v.column(k).iter().copied().collect();
        theta.forward_into(&col, &mut h, &mut y);
        out.column_mut(k).copy_from_slice(&y);
    }
    out
}

/// Loss and gradients of the local Koopman objective.
#[derive(Debug, Clone)]
pub struct KoopmanGrads {
    pub loss: f64,
    pub theta: Vec<f64>,
    /// Gradient with respect to `M = [A B]`, when requested.
    pub m: Option<DMatrix<f64>>,
    pub c: Option<DMatrix<f64>>,
}

/// `(1/2T) (||Gbar - [A B][G; U]||_F^2 + ||X - C G||_F^2)` and its exact
/// gradient with respect to the lifting parameters. The lift depends on the
/// parameters through both `G` and `Gbar`, and both paths are differentiated.
pub fn loss_and_grad(
    theta: &MlpParams,
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
    x: &DMatrix<f64>,
    x_next: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<(f64, Vec<f64>)> {
    let g = koopman_grads(theta, m, c, x, x_next, u, false)?;
    Ok((g.loss, g.theta))
}

/// Like [`loss_and_grad`], optionally also returning the gradients in `M` and `C`.
pub fn koopman_grads(
    theta: &MlpParams,
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
    x: &DMatrix<f64>,
    x_next: &DMatrix<f64>,
    u: &DMatrix<f64>,
    with_matrices: bool,
) -> Result<KoopmanGrads> {
    let t_len = x.ncols();
    if t_len == 0 {
        return Err(Error::EmptySegment);
    }
    let (n, r) = (theta.n_in(), theta.n_out());
    let n_u = u.nrows();
    if x.nrows() != n || x_next.nrows() != n || x_next.ncols() != t_len || u.ncols() != t_len {
        return Err(Error::Shape("X, Xbar and U must share width and match the lift input".into()));
    }
    if m.nrows() != r || m.ncols() != r + n_u || c.nrows() != n || c.ncols() != r {
        return Err(Error::Shape(format!(
            "M must be {r}x{} and C {n}x{r}, got {}x{} and {}x{}",
            r + n_u,
            m.nrows(),
            m.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }

    // Contiguous segments share all but one point between X and Xbar; lift
    // each distinct point once and sum the two upstream gradients.
    let shifted = (0..t_len - 1).all(|t| x_next.column(t) == x.column(t + 1));
    let mut points: Vec<Vec<f64>> = x.column_iter().map(|c| c.iter().copied().collect()).collect();
    let next_index: Vec<usize> = if shifted {
        points.push(x_next.column(t_len - 1).iter().copied().collect());
        (1..=t_len).collect()
    } else {
        points.extend(x_next.column_iter().map(|c| c.iter().copied().collect()));
        (t_len..2 * t_len).collect()
    };

    let hidden = theta.hidden();
    let mut acts = vec![0.0; points.len() * hidden];
    let mut lifts = vec![0.0; points.len() * r];
    for (k, p) in points.iter().enumerate() {
        let (h, y) = (&mut acts[k * hidden..(k + 1) * hidden], &mut lifts[k * r..(k + 1) * r]);
        theta.forward_into(p, h, y);
    }

    let a_rows: Vec<f64> = m.transpose().iter().copied().collect(); // row-major M
    let c_rows: Vec<f64> = c.transpose().iter().copied().collect(); // row-major C
    let width = r + n_u;
    let scale = 1.0 / t_len as f64;
    let mut deltas = vec![0.0; points.len() * r];
    let mut grad_m = with_matrices.then(|| DMatrix::<f64>::zeros(r, width));
    let mut grad_c = with_matrices.then(|| DMatrix::<f64>::zeros(n, r));
    let mut sq = 0.0;
    let mut r1 = vec![0.0; r];
    let mut r2 = vec![0.0; n];
    for t in 0..t_len {
        let gi = &lifts[t * r..(t + 1) * r];
        let nb = next_index[t];
        let gb = &lifts[nb * r..(nb + 1) * r];
        for i in 0..r {
            let row = &a_rows[i * width..(i + 1) * width];
            let mut pred = 0.0;
            for k in 0..r {
                pred += row[k] * gi[k];
            }
            for k in 0..n_u {
                pred += row[r + k] * u[(k, t)];
            }
            r1[i] = gb[i] - pred;
        }
        for i in 0..n {
            let row = &c_rows[i * r..(i + 1) * r];
            let pred: f64 = row.iter().zip(gi).map(|(a, b)| a * b).sum();
            r2[i] = x[(i, t)] - pred;
        }
        sq += r1.iter().map(|e| e * e).sum::<f64>() + r2.iter().map(|e| e * e).sum::<f64>();

        // dL/dg_t = -(A' r1 + C' r2) / T, dL/dgbar_t = r1 / T.
        for k in 0..r {
            let mut acc = 0.0;
            for i in 0..r {
                acc += a_rows[i * width + k] * r1[i];
            }
            for i in 0..n {
                acc += c_rows[i * r + k] * r2[i];
            }
            deltas[t * r + k] -= scale * acc;
            deltas[nb * r + k] += scale * r1[k];
        }
        if let (Some(gm), Some(gc)) = (grad_m.as_mut(), grad_c.as_mut()) {
            for i in 0..r {
                for k in 0..r {
                    gm[(i, k)] -= scale * r1[i] * gi[k];
                }
                for k in 0..n_u {
                    gm[(i, r + k)] -= scale * r1[i] * u[(k, t)];
                }
            }
            for i in 0..n {
                for k in 0..r {
                    gc[(i, k)] -= scale * r2[i] * gi[k];
                }
            }
        }
    }

    let mut grad = vec![0.0; theta.len()];
    let mut dh = vec![0.0; hidden];
    for (k, p) in points.iter().enumerate() {
        theta.accumulate_grad(
            p,
            &acts[k * hidden..(k + 1) * hidden],
            &deltas[k * r..(k + 1) * r],
            &mut grad,
            &mut dh,
        );
    }
    let loss = 0.5 * scale * sq;
    if !loss.is_finite() {
        return Err(Error::NonFiniteState("Koopman loss"));
    }
    Ok(KoopmanGrads {
        loss,
        theta: grad,
        m: grad_m,
        c: grad_c,
    })
}

/// `(1/T) sum_t ||f(z_t) - y_t||^2` and its gradient, for direct regression
/// networks.
pub fn mse_loss_and_grad(theta: &MlpParams, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    let t_len = inputs.ncols();
    if t_len == 0 {
        return Err(Error::EmptySegment);
    }
    if inputs.nrows() != theta.n_in() || targets.nrows() != theta.n_out() || targets.ncols() != t_len {
        return Err(Error::Shape("regression inputs/targets do not match the network".into()));
    }
    let scale = 1.0 / t_len as f64;
    let mut grad = vec![0.0; theta.len()];
    let mut h = vec![0.0; theta.hidden()];
    let mut dh = vec![0.0; theta.hidden()];
    let mut y = vec![0.0; theta.n_out()];
    let mut delta = vec![0.0; theta.n_out()];
    let mut sq = 0.0;
    let mut z = vec![0.0; theta.n_in()];
    for t in 0..t_len {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = inputs[(k, t)];
        }
        theta.forward_into(&z, &mut h, &mut y);
        for o in 0..theta.n_out() {
            let e = y[o] - targets[(o, t)];
            sq += e * e;
            delta[o] = 2.0 * scale * e;
        }
        theta.accumulate_grad(&z, &h, &delta, &mut grad, &mut dh);
    }
    let loss = scale * sq;
    if !loss.is_finite() {
        return Err(Error::NonFiniteState("regression loss"));
    }
    Ok((loss, grad))
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// Advances the moments with `grad` and returns the unscaled step
    /// direction `m_hat / (sqrt(v_hat) + eps)`; the update is `-lr` times it.
    pub fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.first_moment.len(), "gradient length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut dir = vec![0.0; grad.len()];
        for k in 0..grad.len() {
            let g = grad[k];
            self.first_moment[k] = self.beta1 * self.first_moment[k] + (1.0 - self.beta1) * g;
            self.second_moment[k] = self.beta2 * self.second_moment[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[k] / c1;
            let v_hat = self.second_moment[k] / c2;
            dir[k] = m_hat / (v_hat.sqrt() + self.eps);
        }
        dir
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let dir = self.direction(grad);
        for (p, d) in params.iter_mut().zip(&dir) {
            *p -= self.lr * d;
        }
    }
}

/// One Adam update of the parameter vector.
pub fn adam_step(state: &mut AdamState, theta: &mut MlpParams, grad: &[f64]) {
    state.step(theta.flat_mut(), grad);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn param_count_matches_vessel_network() {
        assert_eq!(MlpParams::param_count(3, 256, 8), 3080);
        assert_eq!(init_params(0).len(), 3080);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(11);
        assert_eq!(a, init_params(11));
        assert_ne!(a, init_params(12));
        let b1 = (6.0f64 / 3.0).sqrt();
        let b2 = (6.0f64 / 256.0).sqrt();
        assert!(a.w1().iter().all(|w| w.abs() <= b1));
        assert!(a.w2().iter().all(|w| w.abs() <= b2));
        assert!(a.b1().iter().all(|&b| b == 0.0));
        assert!(a.b2().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let a = init_params(5);
        let b = MlpParams::from_flat(3, 256, 8, a.flat().to_vec()).unwrap();
        assert_eq!(a, b);
        assert!(MlpParams::from_flat(3, 256, 8, vec![0.0; 10]).is_err());
    }

    #[test]
    fn constant_network() {
        let mut p = init_params(1);
        p.w2_mut().iter_mut().for_each(|w| *w = 0.0);
        p.b2_mut()[0] = 1.0;
        for v in [[0.0, 0.0, 0.0], [1.0, -2.0, 3.0]] {
            assert_eq!(lift_forward(&p, &v), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let z = MlpParams::zeros(3, 256, 8);
        assert_eq!(lift_forward(&z, &[0.3, 0.1, -0.7]), vec![0.0; 8]);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = init_params(2);
        for b in p.b1_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        for b in p.b2_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let v = [0.4, -1.1, 0.25];
        // Independent evaluation with nalgebra matrices.
        let w1 = DMatrix::from_row_slice(256, 3, p.w1());
        let w2 = DMatrix::from_row_slice(8, 256, p.w2());
        let b1 = DMatrix::from_column_slice(256, 1, p.b1());
        let b2 = DMatrix::from_column_slice(8, 1, p.b2());
        let x = DMatrix::from_column_slice(3, 1, &v);
        let h = (w1 * x + b1).map(|z| z.max(0.0));
        let expected = w2 * h + b2;
        let got = lift_forward(&p, &v);
        for k in 0..8 {
            assert!((got[k] - expected[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_matches_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_params(4);
        let v = randn(&mut rng, 3, 5);
        let out = lift_batch(&p, &v);
        assert_eq!(out.shape(), (8, 5));
        for k in 0..5 {
            let col: Vec<f64> = v.column(k).iter().copied().collect();
            assert_eq!(out.column(k).iter().copied().collect::<Vec<_>>(), lift_forward(&p, &col));
        }
        assert_eq!(lift_batch(&p, &DMatrix::zeros(3, 0)).shape(), (8, 0));
    }

    #[test]
    fn zero_network_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MlpParams::zeros(3, 256, 8);
        let x = randn(&mut rng, 3, 6);
        let xn = randn(&mut rng, 3, 6);
        let u = randn(&mut rng, 2, 6);
        let (loss, grad) = loss_and_grad(&p, &DMatrix::zeros(8, 10), &DMatrix::zeros(3, 8), &x, &xn, &u).unwrap();
        assert!((loss - x.norm_squared() / 12.0).abs() < 1e-14);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_transition_matches_scalar_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = MlpParams::he_uniform(3, 16, 8, 5);
        let m = randn(&mut rng, 8, 10);
        let c = randn(&mut rng, 3, 8);
        let x = randn(&mut rng, 3, 1);
        let xn = randn(&mut rng, 3, 1);
        let u = randn(&mut rng, 2, 1);
        let g = lift_forward(&p, x.as_slice());
        let gb = lift_forward(&p, xn.as_slice());
        let mut expected = 0.0;
        for i in 0..8 {
            let mut e = gb[i];
            for k in 0..8 {
                e -= m[(i, k)] * g[k];
            }
            e -= m[(i, 8)] * u[0] + m[(i, 9)] * u[1];
            expected += e * e;
        }
        for i in 0..3 {
            let mut e = x[i];
            for k in 0..8 {
                e -= c[(i, k)] * g[k];
            }
            expected += e * e;
        }
        expected /= 2.0;
        let (loss, _) = loss_and_grad(&p, &m, &c, &x, &xn, &u).unwrap();
        assert!((loss - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn empty_segment_rejected() {
        let p = MlpParams::zeros(3, 4, 8);
        let e = DMatrix::zeros(3, 0);
        let r = loss_and_grad(&p, &DMatrix::zeros(8, 10), &DMatrix::zeros(3, 8), &e, &e, &DMatrix::zeros(2, 0));
        assert!(matches!(r, Err(Error::EmptySegment)));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = init_params(3);
        let before = p.clone();
        let mut s = AdamState::new(p.len(), 1e-4);
        adam_step(&mut s, &mut p, &vec![0.0; 3080]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_on_unit_gradient() {
        let mut p = init_params(3);
        let before = p.clone();
        let mut s = AdamState::new(p.len(), 1e-4);
        let mut g = vec![0.0; p.len()];
        g[17] = 1.0;
        adam_step(&mut s, &mut p, &g);
        // m_hat = 1, v_hat = 1 at t = 1.
        let expected = before.flat()[17] - 1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p.flat()[17] - expected).abs() < 1e-18);
        for k in (0..p.len()).filter(|&k| k != 17) {
            assert_eq!(p.flat()[k], before.flat()[k]);
        }
    }

    #[test]
    fn adam_bookkeeping() {
        let mut s = AdamState::new(2, 1e-3);
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[1.0, -2.0]);
        s.step(&mut p, &[3.0, 0.5]);
        assert_eq!(s.step, 2);
        let m0 = 0.9 * (0.1 * 1.0) + 0.1 * 3.0;
        let v1 = 0.999 * (0.001 * 4.0) + 0.001 * 0.25;
        assert!((s.first_moment[0] - m0).abs() < 1e-15);
        assert!((s.second_moment[1] - v1).abs() < 1e-15);
    }

    #[test]
    fn mse_zero_output_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = MlpParams::he_uniform(5, 32, 3, 1);
        p.w2_mut().iter_mut().for_each(|w| *w = 0.0);
        let z = randn(&mut rng, 5, 7);
        let y = randn(&mut rng, 3, 7);
        let (loss, _) = mse_loss_and_grad(&p, &z, &y).unwrap();
        let expected = y.column_iter().map(|c| c.norm_squared()).sum::<f64>() / 7.0;
        assert!((loss - expected).abs() < 1e-14);
    }
}
