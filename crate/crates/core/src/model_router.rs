//! Per-(state, role) distribution over backends and the greedy or sampled choice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::role_router::descending_order;
use crate::state::ModelId;

/// Learnable model network: projection of `concat(query, context, role)`
/// scored against one learned vector per backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPolicyParams {
    /// `d_lat x 3d`
    pub w_ctx: Matrix,
    /// One `d_lat` row per backend, in registry order.
    pub model_table: Matrix,
}

impl ModelPolicyParams {
    pub fn init<R: Rng>(dim: usize, d_lat: usize, n_models: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            w_ctx: Matrix::uniform(d_lat, 3 * dim, bound, rng),
            model_table: Matrix::uniform(n_models, d_lat, 1.0 / (d_lat as f64).sqrt(), rng),
        }
    }

    pub fn zeros(dim: usize, d_lat: usize, n_models: usize) -> Self {
        Self {
            w_ctx: Matrix::zeros(d_lat, 3 * dim),
            model_table: Matrix::zeros(n_models, d_lat),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.d_lat(), self.n_models())
    }

    pub fn dim(&self) -> usize {
        self.w_ctx.cols() / 3
    }

    pub fn d_lat(&self) -> usize {
        self.w_ctx.rows()
    }

    pub fn n_models(&self) -> usize {
        self.model_table.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.w_ctx.cols().is_multiple_of(3) || self.model_table.cols() != self.w_ctx.rows() {
            return Err(Error::Dimension(format!(
                "model params: w_ctx {:?} inconsistent with model_table {:?}",
                self.w_ctx.shape(),
                self.model_table.shape()
            )));
        }
        if !self.w_ctx.is_finite() || !self.model_table.is_finite() {
            return Err(Error::Config("model params contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.w_ctx.add_scaled(scale, &other.w_ctx)?;
        self.model_table.add_scaled(scale, &other.model_table)
    }

    pub fn sq_norm(&self) -> f64 {
        self.w_ctx.sq_norm() + self.model_table.sq_norm()
    }

    pub fn scale(&mut self, s: f64) {
        self.w_ctx.scale(s);
        self.model_table.scale(s);
    }

    fn input(&self, q: &Embedding, c: &Embedding, r: &Embedding) -> Result<Vec<f64>> {
        let d = self.dim();
        if q.dim() != d || c.dim() != d || r.dim() != d {
            return Err(Error::Dimension(format!(
                "model router expects embeddings of dim {d}"
            )));
        }
        Ok(q.values()
            .iter()
            .chain(c.values())
            .chain(r.values())
            .copied()
            .collect())
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.w_ctx.matvec(x);
        let scale = 1.0 / (self.d_lat() as f64).sqrt();
        let scores = (0..self.n_models())
            .map(|j| linalg::dot(&h, self.model_table.row(j)) * scale)
            .collect();
        (h, scores)
    }

    pub fn scores(&self, q: &Embedding, c: &Embedding, r: &Embedding) -> Result<Vec<f64>> {
        let x = self.input(q, c, r)?;
        Ok(self.forward(&x).1)
    }
}

/// Probabilities over backends, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDistribution {
    pub models: Vec<ModelId>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoiceMode {
    Greedy,
    Sample(u64),
}

pub fn model_distribution(
    q_emb: &Embedding,
    c_emb: &Embedding,
    role_emb: &Embedding,
    models: &[ModelId],
    params: &ModelPolicyParams,
) -> Result<ModelDistribution> {
    if models.len() != params.n_models() {
        return Err(Error::Config(format!(
            "{} backends registered but model table has {} rows",
            models.len(),
            params.n_models()
        )));
    }
    let scores = params.scores(q_emb, c_emb, role_emb)?;
    Ok(ModelDistribution {
        models: models.to_vec(),
        probs: linalg::softmax(&scores),
    })
}

/// Returns the chosen registry index and its log-probability.
pub fn choose_model(dist: &ModelDistribution, mode: ChoiceMode) -> (usize, f64) {
    let idx = match mode {
        ChoiceMode::Greedy => descending_order(&dist.probs)[0],
        ChoiceMode::Sample(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_index(&dist.probs, rng.random::<f64>())
        }
    };
    (idx, dist.probs[idx].ln())
}

/// Inverse-CDF draw for `u` in `[0, 1)`.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Analytic gradient of `log p_chosen` with respect to the model params.
pub fn grad_model_logprob(
    q_emb: &Embedding,
    c_emb: &Embedding,
    role_emb: &Embedding,
    params: &ModelPolicyParams,
    chosen: usize,
) -> Result<ModelPolicyParams> {
    if chosen >= params.n_models() {
        return Err(Error::InvalidArgument(format!("model index {chosen} out of range")));
    }
    let x = params.input(q_emb, c_emb, role_emb)?;
    let (h, scores) = params.forward(&x);
    let coeff = linalg::log_softmax_grad(&linalg::softmax(&scores), &[chosen]);
    let scale = 1.0 / (params.d_lat() as f64).sqrt();

    let mut grad = params.zeros_like();
    let mut v_mix = vec![0.0; params.d_lat()];
    for (j, cj) in coeff.iter().enumerate() {
        for (m, v) in v_mix.iter_mut().zip(params.model_table.row(j)) {
            *m += cj * v;
        }
    }
    grad.w_ctx.add_outer(scale, &v_mix, &x);
    let mut table = Matrix::zeros(params.n_models(), params.d_lat());
    table.add_outer(scale, &coeff, &h);
    grad.model_table = table;
    Ok(grad)
}
