//! Joint parameter snapshot of the role and model networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_router::ModelPolicyParams;
use crate::role_router::RolePolicyParams;
use crate::seeding::derive_seed;

pub const DEFAULT_D_LAT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub role: RolePolicyParams,
    pub model: ModelPolicyParams,
}

impl PolicyParams {
    /// Seeded initialization from the `"init"` stream of `seed`.
    pub fn init(dim: usize, d_lat: usize, n_models: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", &[]));
        let role = RolePolicyParams::init(dim, d_lat, &mut rng);
        let model = ModelPolicyParams::init(dim, d_lat, n_models, &mut rng);
        Self { role, model }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            role: self.role.zeros_like(),
            model: self.model.zeros_like(),
        }
    }

    pub fn validate(&self, dim: usize, n_models: usize) -> Result<()> {
        self.role.validate()?;
        self.model.validate()?;
        if self.role.dim() != dim || self.model.dim() != dim {
            return Err(Error::Dimension(format!(
                "parameters expect embedding dim {} / {}, embedder has {dim}",
                self.role.dim(),
                self.model.dim()
            )));
        }
        if self.model.n_models() != n_models {
            return Err(Error::Dimension(format!(
                "model table has {} rows for {n_models} backends",
                self.model.n_models()
            )));
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.role.add_scaled(scale, &other.role)?;
        self.model.add_scaled(scale, &other.model)
    }

    pub fn norm(&self) -> f64 {
        (self.role.sq_norm() + self.model.sq_norm()).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.role.scale(s);
        self.model.scale(s);
    }

    /// Flat view of every parameter, role block first.
    pub fn flat(&self) -> Vec<f64> {
        [
            self.role.w_state.data(),
            self.role.w_role.data(),
            self.model.w_ctx.data(),
            self.model.model_table.data(),
        ]
        .concat()
    }

    pub fn n_params(&self) -> usize {
        self.role.w_state.data().len()
            + self.role.w_role.data().len()
            + self.model.w_ctx.data().len()
            + self.model.model_table.data().len()
    }

    /// Mutable access to parameter `i` of the flat view.
    pub fn flat_mut(&mut self, mut i: usize) -> &mut f64 {
        for m in [
            &mut self.role.w_state,
            &mut self.role.w_role,
            &mut self.model.w_ctx,
            &mut self.model.model_table,
        ] {
            let n = m.data().len();
            if i < n {
                return &mut m.data_mut()[i];
            }
            i -= n;
        }
        panic!("flat parameter index out of range");
    }
}
