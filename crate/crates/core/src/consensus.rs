//! The two distributed update rules.
//!
//! *Matrix consensus.* For a fixed lift, every agent `i` keeps `M_i' = [A_i B_i]'`,
//! `C_i'` and auxiliaries `E_i`, `Ê_i`, and per round solves
//!
//! ```text
//! F_i [M_i'(s+1); E_i(s+1)] = [d_i M_i'(s) + sum_j w_ij E_j(s) + c N_i Gbar_i';
//!                              -sum_j w_ij M_j'(s) + d_i E_i(s)]
//! F_i = [[d_i I + c N_i N_i', d_i I], [-d_i I, d_i I]],   N_i = [G_i; U_i]
//! ```
//!
//! and the same system for `C_i'` with `G_i G_i'` and `G_i X_i'`. Identity
//! blocks are sized `r + m` and `r` respectively, and `E_i` is stored as
//! `(r + m) x r` so it stacks under `M_i'`. Summed over agents the fixed
//! point gives the normal equations of the pooled least-squares problem.
//!
//! *Parameter mixing.* `theta_i(s+1) = sum_j ŵ_ij theta_j(s) - alpha_i d_i`
//! with a doubly stochastic `Ŵ` and a local descent direction `d_i`.
//!
//! Both rounds are synchronous: every agent reads its neighbours' messages
//! from the same snapshot. Messages carry only the iterates; data matrices
//! stay inside [`MatrixConsensusState`].

use nalgebra::{DMatrix, Dyn, LU};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConsensusWeights, Graph, MixingWeights};
use crate::koopman::DataMatrices;
use crate::lift::MlpParams;

/// How agents' local losses are weighted in the consensus objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeighting {
    /// Plain sum of squared residuals over all agents' columns.
    #[default]
    Uniform,
    /// Each agent's residual scaled by `1 / T_i`, as in the per-agent loss.
    PerAgent,
}

impl LossWeighting {
    fn factor(self, width: usize) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::PerAgent => 1.0 / width as f64,
        }
    }
}

/// Iterates an agent publishes in a matrix-consensus round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixMessage {
    pub from: usize,
    /// `M_j'`, `(r + m) x r`.
    pub m: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// `C_j'`, `r x n`.
    pub c: DMatrix<f64>,
    pub e_hat: DMatrix<f64>,
}

/// Lifting parameters an agent publishes in a mixing round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaMessage {
    pub from: usize,
    pub theta: Vec<f64>,
}

/// Sufficient statistics of one agent's data, used for local loss
/// monitoring without keeping the raw columns around.
#[derive(Debug, Clone)]
pub(crate) struct LocalGram {
    pub(crate) width: usize,
    pub(crate) n_gram: DMatrix<f64>,
    pub(crate) n_cross: DMatrix<f64>,
    pub(crate) g_next_sq: f64,
    pub(crate) g_gram: DMatrix<f64>,
    pub(crate) g_cross: DMatrix<f64>,
    pub(crate) x_sq: f64,
}

impl LocalGram {
    pub(crate) fn new(dm: &DataMatrices) -> Self {
        let n = dm.stacked();
        LocalGram {
            width: dm.width(),
            n_gram: &n * n.transpose(),
            n_cross: &n * dm.g_next.transpose(),
            g_next_sq: dm.g_next.norm_squared(),
            g_gram: &dm.g * dm.g.transpose(),
            g_cross: &dm.g * dm.x.transpose(),
            x_sq: dm.x.norm_squared(),
        }
    }

    // ||Y - W'Z||^2 = ||Y||^2 - 2 tr(W' Z Y') + tr(W' Z Z' W)
    fn residual(sq: f64, gram: &DMatrix<f64>, cross: &DMatrix<f64>, wt: &DMatrix<f64>) -> f64 {
        let lin = wt.component_mul(cross).sum();
        let quad = (wt.transpose() * gram).component_mul(&wt.transpose()).sum();
        (sq - 2.0 * lin + quad).max(0.0)
    }

    pub(crate) fn loss(&self, mt: &DMatrix<f64>, ct: &DMatrix<f64>) -> f64 {
        let dynm = Self::residual(self.g_next_sq, &self.n_gram, &self.n_cross, mt);
        let rec = Self::residual(self.x_sq, &self.g_gram, &self.g_cross, ct);
        (dynm + rec) / (2.0 * self.width as f64)
    }
}

/// One agent's matrix-consensus state.
#[derive(Debug, Clone)]
pub struct MatrixConsensusState {
    pub agent: usize,
    /// `M_i'`, `(r + m) x r`.
    pub mt: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// `C_i'`, `r x n`.
    pub ct: DMatrix<f64>,
    pub e_hat: DMatrix<f64>,
    d: f64,
    c: f64,
    f_lu: LU<f64, Dyn, Dyn>,
    f_hat_lu: LU<f64, Dyn, Dyn>,
    m_data_term: DMatrix<f64>,
    c_data_term: DMatrix<f64>,
    f_dim: usize,
    f_hat_dim: usize,
    gram: LocalGram,
}

pub(crate) fn block_system(d: f64, c_gram: &DMatrix<f64>) -> DMatrix<f64> {
    let k = c_gram.nrows();
    let eye = DMatrix::<f64>::identity(k, k) * d;
    let mut f = DMatrix::zeros(2 * k, 2 * k);
    f.view_mut((0, 0), (k, k)).copy_from(&(&eye + c_gram));
    f.view_mut((0, k), (k, k)).copy_from(&eye);
    f.view_mut((k, 0), (k, k)).copy_from(&(-&eye));
    f.view_mut((k, k), (k, k)).copy_from(&eye);
    f
}

fn factorize(f: DMatrix<f64>, agent: usize) -> Result<LU<f64, Dyn, Dyn>> {
    let lu = f.lu();
    if !lu.is_invertible() {
        return Err(Error::SingularBlockSystem { agent });
    }
    Ok(lu)
}

impl MatrixConsensusState {
    /// Builds the state of `agent` with explicit initial iterates.
    pub fn with_iterates(
        agent: usize,
        dm: &DataMatrices,
        c: f64,
        d: f64,
        weighting: LossWeighting,
        iterates: [DMatrix<f64>; 4],
    ) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::config("consensus.c", "must be finite and > 0"));
        }
        let [mt, e, ct, e_hat] = iterates;
        let (r, m, n) = (dm.g.nrows(), dm.u.nrows(), dm.x.nrows());
        if mt.shape() != (r + m, r) || e.shape() != (r + m, r) || ct.shape() != (r, n) || e_hat.shape() != (r, n) {
            return Err(Error::Shape("initial consensus iterates have wrong shapes".into()));
        }
        let gram = LocalGram::new(dm);
        let ci = c * weighting.factor(dm.width());
        let f = block_system(d, &(&gram.n_gram * ci));
        let f_hat = block_system(d, &(&gram.g_gram * ci));
        Ok(MatrixConsensusState {
            agent,
            mt,
            e,
            ct,
            e_hat,
            d,
            c: ci,
            f_dim: f.nrows(),
            f_hat_dim: f_hat.nrows(),
            f_lu: factorize(f, agent)?,
            f_hat_lu: factorize(f_hat, agent)?,
            m_data_term: &gram.n_cross * ci,
            c_data_term: &gram.g_cross * ci,
            gram,
        })
    }

    /// Replaces the data (after the lift changed) and refactorises, keeping
    /// the current iterates as a warm start.
    pub fn refresh(&mut self, dm: &DataMatrices) -> Result<()> {
        let fresh = Self::with_iterates(
            self.agent,
            dm,
            self.c,
            self.d,
            LossWeighting::Uniform,
            [self.mt.clone(), self.e.clone(), self.ct.clone(), self.e_hat.clone()],
        )?;
        *self = fresh;
        Ok(())
    }

    /// Dimensions of the two block systems.
    pub fn block_dims(&self) -> (usize, usize) {
        (self.f_dim, self.f_hat_dim)
    }

    pub fn message(&self) -> MatrixMessage {
        MatrixMessage {
            from: self.agent,
            m: self.mt.clone(),
            e: self.e.clone(),
            c: self.ct.clone(),
            e_hat: self.e_hat.clone(),
        }
    }

    /// `M_i = [A_i B_i]`.
    pub fn m(&self) -> DMatrix<f64> {
        self.mt.transpose()
    }

    pub fn c(&self) -> DMatrix<f64> {
        self.ct.transpose()
    }

    /// Local loss at the current iterates and the lift the state was built with.
    pub fn local_loss(&self) -> f64 {
        self.gram.loss(&self.mt, &self.ct)
    }

    fn update(&mut self, inbox: &[MatrixMessage], neighbors: &[usize], w: &ConsensusWeights) -> Result<()> {
        let i = self.agent;
        let mut sum_e = DMatrix::zeros(self.e.nrows(), self.e.ncols());
        let mut sum_m = DMatrix::zeros(self.mt.nrows(), self.mt.ncols());
        let mut sum_eh = DMatrix::zeros(self.e_hat.nrows(), self.e_hat.ncols());
        let mut sum_c = DMatrix::zeros(self.ct.nrows(), self.ct.ncols());
        for &j in neighbors {
            let msg = &inbox[j];
            let wij = w.weight(i, j);
            sum_e += &msg.e * wij;
            sum_m += &msg.m * wij;
            sum_eh += &msg.e_hat * wij;
            sum_c += &msg.c * wij;
        }
        let (mt, e) = solve_pair(&self.f_lu, &self.mt, &self.e, &sum_e, &sum_m, &self.m_data_term, self.d)?;
        let (ct, e_hat) = solve_pair(&self.f_hat_lu, &self.ct, &self.e_hat, &sum_eh, &sum_c, &self.c_data_term, self.d)?;
        if mt.iter().chain(e.iter()).chain(ct.iter()).chain(e_hat.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState("matrix consensus"));
        }
        self.mt = mt;
        self.e = e;
        self.ct = ct;
        self.e_hat = e_hat;
        Ok(())
    }
}

pub(crate) fn solve_pair(
    lu: &LU<f64, Dyn, Dyn>,
    x: &DMatrix<f64>,
    aux: &DMatrix<f64>,
    sum_aux: &DMatrix<f64>,
    sum_x: &DMatrix<f64>,
    data_term: &DMatrix<f64>,
    d: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (k, cols) = x.shape();
    let mut rhs = DMatrix::zeros(2 * k, cols);
    rhs.rows_mut(0, k).copy_from(&(x * d + sum_aux + data_term));
    rhs.rows_mut(k, k).copy_from(&(aux * d - sum_x));
    let sol = lu.solve(&rhs).ok_or(Error::NonFiniteState("block solve"))?;
    Ok((sol.rows(0, k).into_owned(), sol.rows(k, k).into_owned()))
}

/// Seeded standard-normal initial iterates for one agent.
pub fn random_iterates(seed: u64, agent: usize, r: usize, m: usize, n: usize) -> [DMatrix<f64>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64);
    let mut draw = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let mt = draw(r + m, r);
    let e = draw(r + m, r);
    let ct = draw(r, n);
    let e_hat = draw(r, n);
    [mt, e, ct, e_hat]
}

/// Builds every agent's state from its data, the weights and a seed.
pub fn build_consensus_states(
    all_dm: &[DataMatrices],
    c: f64,
    w: &ConsensusWeights,
    weighting: LossWeighting,
    init_seed: u64,
) -> Result<Vec<MatrixConsensusState>> {
    all_dm
        .iter()
        .enumerate()
        .map(|(i, dm)| {
            let (r, m, n) = (dm.g.nrows(), dm.u.nrows(), dm.x.nrows());
            let it = random_iterates(init_seed, i, r, m, n);
            MatrixConsensusState::with_iterates(i, dm, c, w.d[i], weighting, it)
        })
        .collect()
}

/// One synchronous round of the matrix update for every agent.
pub fn matrix_update_round(states: &mut [MatrixConsensusState], g: &Graph, w: &ConsensusWeights) -> Result<()> {
    let inbox: Vec<MatrixMessage> = states.iter().map(MatrixConsensusState::message).collect();
    for (i, state) in states.iter_mut().enumerate() {
        state.update(&inbox, g.neighbors(i), w)?;
    }
    Ok(())
}

fn max_pairwise<T>(items: &[T], dist: impl Fn(&T, &T) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            worst = worst.max(dist(&items[i], &items[j]));
        }
    }
    worst
}

/// Largest pairwise Frobenius distance of `M_i` and of `C_i`.
pub fn disagreement(states: &[MatrixConsensusState]) -> (f64, f64) {
    (
        max_pairwise(states, |a, b| (&a.mt - &b.mt).norm()),
        max_pairwise(states, |a, b| (&a.ct - &b.ct).norm()),
    )
}

/// Largest pairwise Euclidean distance between parameter vectors.
pub fn theta_disagreement(thetas: &[MlpParams]) -> f64 {
    max_pairwise(thetas, |a, b| {
        a.flat().iter().zip(b.flat()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    })
}

/// Consensus optimum for a fixed lift: `(M*, C*)` solving the pooled normal
/// equations, with a pseudo-inverse when they are rank deficient.
pub fn centralized_ls_oracle(all_dm: &[DataMatrices], weighting: LossWeighting) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = all_dm.first().ok_or(Error::EmptySegment)?;
    let (r, m, n) = (first.g.nrows(), first.u.nrows(), first.x.nrows());
    let mut n_gram = DMatrix::zeros(r + m, r + m);
    let mut n_cross = DMatrix::zeros(r + m, r);
    let mut g_gram = DMatrix::zeros(r, r);
    let mut g_cross = DMatrix::zeros(r, n);
    for dm in all_dm {
        let wt = weighting.factor(dm.width());
        let nn = dm.stacked();
        n_gram += (&nn * nn.transpose()) * wt;
        n_cross += (&nn * dm.g_next.transpose()) * wt;
        g_gram += (&dm.g * dm.g.transpose()) * wt;
        g_cross += (&dm.g * dm.x.transpose()) * wt;
    }
    let mt = pinv_solve(n_gram, &n_cross)?;
    let ct = pinv_solve(g_gram, &g_cross)?;
    Ok((mt.transpose(), ct.transpose()))
}

fn pinv_solve(gram: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = gram.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-13 * svd.singular_values.len() as f64;
    svd.solve(rhs, eps)
        .map_err(|_| Error::NonFiniteState("least-squares oracle"))
}

/// One synchronous mixing round: `theta_i <- sum_j ŵ_ij theta_j - alpha_i d_i`.
pub fn theta_mixing_round(
    thetas: &[MlpParams],
    directions: &[Vec<f64>],
    w_hat: &MixingWeights,
    alphas: &[f64],
) -> Result<Vec<MlpParams>> {
    let n = thetas.len();
    if directions.len() != n || alphas.len() != n || w_hat.w_hat.nrows() != n {
        return Err(Error::Shape("one parameter vector, direction and rate per agent".into()));
    }
    let inbox: Vec<ThetaMessage> = thetas
        .iter()
        .enumerate()
        .map(|(i, t)| ThetaMessage {
            from: i,
            theta: t.flat().to_vec(),
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = vec![0.0; thetas[i].len()];
        for msg in &inbox {
            let wij = w_hat.w_hat[(i, msg.from)];
            if wij == 0.0 {
                continue;
            }
            for (a, t) in acc.iter_mut().zip(&msg.theta) {
                *a += wij * t;
            }
        }
        for (a, d) in acc.iter_mut().zip(&directions[i]) {
            *a -= alphas[i] * d;
        }
        if acc.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState("parameter mixing"));
        }
        let (n_in, hidden, n_out) = thetas[i].dims();
        out.push(MlpParams::from_flat(n_in, hidden, n_out, acc)?);
    }
    Ok(out)
}
