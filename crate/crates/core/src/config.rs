//! Run configuration: TOML schema, defaults, validation and engine assembly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendPool, BackendSpec};
use crate::conductor::{ConductorConfig, Engine, RoutingMode};
use crate::cost::{PriceConfig, PriceTable};
use crate::embedding::{CachedEmbedder, EmbedderConfig, DEFAULT_CACHE_CAPACITY};
use crate::error::{Error, Result};
use crate::roles::{default_roles, ArithmeticVerifier, RoleRegistry, RoleSpec};
use crate::state::ModelId;
use crate::trainer::TrainingConfig;

/// A role either picked by name from the built-in set or declared in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoleEntry {
    Builtin(String),
    Custom(RoleSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConductorSection {
    pub max_turns: usize,
    pub theta: f64,
    pub char_budget: usize,
    pub mode: RoutingMode,
    pub max_tokens: u32,
}

impl Default for ConductorSection {
    fn default() -> Self {
        let c = ConductorConfig::default();
        Self {
            max_turns: c.max_turns,
            theta: c.theta,
            char_budget: c.char_budget,
            mode: c.mode,
            max_tokens: c.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub log_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub dataset: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            log_dir: PathBuf::from("runs/logs"),
            checkpoint_dir: PathBuf::from("runs/checkpoints"),
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub prices: PriceConfig,
    pub backends: Vec<BackendSpec>,
    /// Defaults to the nine built-in roles.
    #[serde(default)]
    pub roles: Option<Vec<RoleEntry>>,
    #[serde(default)]
    pub conductor: ConductorSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub paths: PathsSection,
    /// Backend used when the model router is disabled; defaults to the
    /// largest registered backend.
    #[serde(default)]
    pub large_backend: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn registry(&self) -> Result<RoleRegistry> {
        let Some(entries) = &self.roles else {
            return Ok(RoleRegistry::default_registry());
        };
        let builtin = default_roles();
        let specs = entries
            .iter()
            .map(|e| match e {
                RoleEntry::Custom(spec) => Ok(spec.clone()),
                RoleEntry::Builtin(name) => builtin
                    .iter()
                    .find(|s| &s.id == name)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("roles: unknown built-in role {name}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        RoleRegistry::new(specs)
    }

    pub fn conductor_config(&self) -> ConductorConfig {
        ConductorConfig {
            max_turns: self.conductor.max_turns,
            theta: self.conductor.theta,
            char_budget: self.conductor.char_budget,
            mode: self.conductor.mode,
            max_tokens: self.conductor.max_tokens,
            force_model: None,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    /// The backend forced by the model-router ablation.
    pub fn large_backend(&self, prices: &PriceTable) -> Result<ModelId> {
        match &self.large_backend {
            Some(m) => ModelId::new(m.clone()),
            None => {
                let registered: Vec<&str> = self.backends.iter().map(|b| b.model.as_str()).collect();
                prices
                    .entries()
                    .filter(|e| registered.contains(&e.model.as_str()))
                    .max_by(|a, b| {
                        let ka = (a.params_b.unwrap_or(0.0), a.price_out);
                        let kb = (b.params_b.unwrap_or(0.0), b.price_out);
                        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .map(|e| e.model.clone())
                    .ok_or_else(|| Error::Config("no registered backend has a price".into()))
            }
        }
    }

    /// Checks every cross-module invariant without touching the network.
    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        let prices = PriceTable::from_config(&self.prices)?;
        if self.backends.is_empty() {
            return Err(Error::Config("backends: at least one backend is required".into()));
        }
        let mut seen = Vec::new();
        for b in &self.backends {
            let id = ModelId::new(b.model.clone())?;
            if prices.get(&id).is_none() {
                return Err(Error::Config(format!(
                    "backend {} references an undefined price entry",
                    b.model
                )));
            }
            if seen.contains(&id) {
                return Err(Error::Config(format!("backend {} declared twice", b.model)));
            }
            seen.push(id);
        }
        if let Some(m) = &self.large_backend {
            if !self.backends.iter().any(|b| &b.model == m) {
                return Err(Error::Config(format!("large_backend {m} is not a declared backend")));
            }
        }
        self.registry()?;
        self.conductor_config().validate()?;
        self.training_config().validate()?;
        Ok(())
    }

    /// Builds prices, backends, embedder and roles into an engine.
    pub fn build_engine(&self) -> Result<Engine> {
        let prices = PriceTable::from_config(&self.prices)?;
        let mut pool = BackendPool::new();
        for b in &self.backends {
            pool.register(ModelId::new(b.model.clone())?, b.build()?)?;
        }
        let embedder = CachedEmbedder::new(self.embedder.build()?, DEFAULT_CACHE_CAPACITY);
        Engine::new(
            self.registry()?,
            pool,
            prices,
            embedder,
            Box::new(ArithmeticVerifier),
        )
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
