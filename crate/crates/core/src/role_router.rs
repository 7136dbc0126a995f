//! State-conditioned role distribution and cumulative-threshold role selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::state::RoleId;

/// Learnable role network: a bilinear similarity between a projection of
/// `concat(query, context)` and a projection of each role description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolePolicyParams {
    /// `d_lat x 2d`
    pub w_state: Matrix,
    /// `d_lat x d`
    pub w_role: Matrix,
}

impl RolePolicyParams {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init<R: Rng>(dim: usize, d_lat: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            w_state: Matrix::uniform(d_lat, 2 * dim, bound, rng),
            w_role: Matrix::uniform(d_lat, dim, bound, rng),
        }
    }

    pub fn zeros(dim: usize, d_lat: usize) -> Self {
        Self {
            w_state: Matrix::zeros(d_lat, 2 * dim),
            w_role: Matrix::zeros(d_lat, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.d_lat())
    }

    pub fn dim(&self) -> usize {
        self.w_role.cols()
    }

    pub fn d_lat(&self) -> usize {
        self.w_role.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_state.rows() != self.w_role.rows() || self.w_state.cols() != 2 * self.w_role.cols() {
            return Err(Error::Dimension(format!(
                "role params: w_state {:?} inconsistent with w_role {:?}",
                self.w_state.shape(),
                self.w_role.shape()
            )));
        }
        if !self.w_state.is_finite() || !self.w_role.is_finite() {
            return Err(Error::Config("role params contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.w_state.add_scaled(scale, &other.w_state)?;
        self.w_role.add_scaled(scale, &other.w_role)
    }

    pub fn sq_norm(&self) -> f64 {
        self.w_state.sq_norm() + self.w_role.sq_norm()
    }

    pub fn scale(&mut self, s: f64) {
        self.w_state.scale(s);
        self.w_role.scale(s);
    }

    fn check_inputs(&self, q: &Embedding, c: &Embedding, roles: &[Embedding]) -> Result<()> {
        let d = self.dim();
        if q.dim() != d || c.dim() != d || roles.iter().any(|r| r.dim() != d) {
            return Err(Error::Dimension(format!(
                "role router expects embeddings of dim {d}"
            )));
        }
        if roles.is_empty() {
            return Err(Error::Config("role registry is empty".into()));
        }
        Ok(())
    }

    /// Returns `(state projection, per-role projections, scores)`.
    fn forward(
        &self,
        q: &Embedding,
        c: &Embedding,
        roles: &[Embedding],
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<f64> = q.values().iter().chain(c.values()).copied().collect();
        let h = self.w_state.matvec(&x);
        let scale = 1.0 / (self.d_lat() as f64).sqrt();
        let g: Vec<Vec<f64>> = roles.iter().map(|r| self.w_role.matvec(r.values())).collect();
        let scores = g.iter().map(|gi| linalg::dot(&h, gi) * scale).collect();
        (h, g, scores)
    }

    pub fn scores(&self, q: &Embedding, c: &Embedding, roles: &[Embedding]) -> Result<Vec<f64>> {
        self.check_inputs(q, c, roles)?;
        Ok(self.forward(q, c, roles).2)
    }
}

/// Probabilities over registered roles, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleDistribution {
    pub roles: Vec<RoleId>,
    pub probs: Vec<f64>,
    /// Registry index of the EarlyStop role, if registered.
    pub early_stop: Option<usize>,
}

impl RoleDistribution {
    pub fn from_scores(roles: Vec<RoleId>, scores: &[f64], early_stop: Option<usize>) -> Self {
        Self {
            roles,
            probs: linalg::softmax(scores),
            early_stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleSelection {
    /// Registry indices, by descending probability (ties by registry order).
    pub selected: Vec<usize>,
    pub selection_logprob: f64,
    pub early_stop: bool,
}

pub fn role_distribution(
    q_emb: &Embedding,
    c_emb: &Embedding,
    role_embs: &[Embedding],
    roles: &[RoleId],
    early_stop: Option<usize>,
    params: &RolePolicyParams,
) -> Result<RoleDistribution> {
    if roles.len() != role_embs.len() {
        return Err(Error::Config(format!(
            "{} role ids but {} role embeddings",
            roles.len(),
            role_embs.len()
        )));
    }
    let scores = params.scores(q_emb, c_emb, role_embs)?;
    Ok(RoleDistribution::from_scores(roles.to_vec(), &scores, early_stop))
}

/// Order of indices by descending probability, ties broken by index.
pub(crate) fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Selects the shortest prefix of roles (by descending probability) whose
/// cumulative mass reaches `theta`.
pub fn select_roles(dist: &RoleDistribution, theta: f64) -> Result<RoleSelection> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidArgument(format!("theta must be in (0, 1], got {theta}")));
    }
    let order = descending_order(&dist.probs);
    let mut selected = Vec::new();
    let mut mass = 0.0;
    for idx in order {
        selected.push(idx);
        mass += dist.probs[idx];
        if mass >= theta {
            break;
        }
    }
    let selection_logprob = selected.iter().map(|&i| dist.probs[i].ln()).sum();
    let early_stop = dist.early_stop.is_some_and(|es| selected.contains(&es));
    Ok(RoleSelection {
        selected,
        selection_logprob,
        early_stop,
    })
}

/// Analytic gradient of `sum_{i in selected} log p_i` with respect to the role params.
pub fn grad_role_logprob(
    q_emb: &Embedding,
    c_emb: &Embedding,
    role_embs: &[Embedding],
    params: &RolePolicyParams,
    selected: &[usize],
) -> Result<RolePolicyParams> {
    params.check_inputs(q_emb, c_emb, role_embs)?;
    if let Some(&bad) = selected.iter().find(|&&i| i >= role_embs.len()) {
        return Err(Error::InvalidArgument(format!("selected role index {bad} out of range")));
    }
    let (h, g, scores) = params.forward(q_emb, c_emb, role_embs);
    let coeff = linalg::log_softmax_grad(&linalg::softmax(&scores), selected);
    let scale = 1.0 / (params.d_lat() as f64).sqrt();

    let mut grad = params.zeros_like();
    // d score_j / d W_state = g_j x^T * scale
    let mut g_mix = vec![0.0; params.d_lat()];
    for (cj, gj) in coeff.iter().zip(&g) {
        for (m, v) in g_mix.iter_mut().zip(gj) {
            *m += cj * v;
        }
    }
    let x: Vec<f64> = q_emb.values().iter().chain(c_emb.values()).copied().collect();
    grad.w_state.add_outer(scale, &g_mix, &x);
    // d score_j / d W_role = h e_j^T * scale
    let mut e_mix = vec![0.0; params.dim()];
    for (cj, ej) in coeff.iter().zip(role_embs) {
        for (m, v) in e_mix.iter_mut().zip(ej.values()) {
            *m += cj * v;
        }
    }
    grad.w_role.add_outer(scale, &h, &e_mix);
    Ok(grad)
}
