//! Token-based dollar costs and the parameter-count price scaling law
//! `C(m) = C_base * (P(m) / P_base)^alpha`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{ModelId, RoleId};

pub const TOKENS_PER_PRICE_UNIT: f64 = 1e6;

/// Unit prices in USD per million tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceEntry {
    pub model: ModelId,
    pub price_in: f64,
    pub price_out: f64,
    pub params_b: Option<f64>,
}

/// Price declaration as written in config; a missing price is imputed by the
/// scaling law from `params_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSpec {
    pub model: String,
    #[serde(default)]
    pub price_in: Option<f64>,
    #[serde(default)]
    pub price_out: Option<f64>,
    #[serde(default)]
    pub params_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    /// Model whose price and size anchor extrapolation.
    pub base: String,
    /// `[known, reference]` pair used to fit the exponent.
    pub fit_pair: [String; 2],
    pub models: Vec<PriceSpec>,
}

impl Default for PriceConfig {
    fn default() -> Self {
        let spec = |m: &str, p: Option<f64>, b: f64| PriceSpec {
            model: m.into(),
            price_in: p,
            price_out: p,
            params_b: Some(b),
        };
        Self {
            base: "Qwen2.5-7B".into(),
            fit_pair: ["Llama3.1-70B".into(), "Llama3.1-8B".into()],
            models: vec![
                spec("Llama3.1-70B", Some(0.88), 70.0),
                spec("Llama3.1-8B", Some(0.18), 8.0),
                spec("Qwen2.5-7B", Some(0.30), 7.0),
                spec("Qwen2.5-3B", None, 3.0),
            ],
        }
    }
}

/// Resolved prices keyed by model, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    entries: IndexMap<ModelId, PriceEntry>,
    base: ModelId,
    alpha: Option<f64>,
    imputed: Vec<ModelId>,
}

/// Dollar cost of one backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub model: ModelId,
    pub role: RoleId,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub usd: f64,
}

pub fn call_cost(tokens_in: u64, tokens_out: u64, entry: &PriceEntry) -> f64 {
    (tokens_in as f64 * entry.price_in + tokens_out as f64 * entry.price_out) / TOKENS_PER_PRICE_UNIT
}

/// Exponent of the scaling law through a `(params_b, price)` pair.
pub fn fit_alpha(known: (f64, f64), base: (f64, f64)) -> Result<f64> {
    let (pk, ck) = known;
    let (pb, cb) = base;
    if [pk, ck, pb, cb].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "scaling-law inputs must be positive and finite".into(),
        ));
    }
    if pk == pb {
        return Err(Error::InvalidArgument(
            "cannot fit exponent from equal parameter counts".into(),
        ));
    }
    Ok((ck / cb).ln() / (pk / pb).ln())
}

pub fn extrapolate_price(target_params_b: f64, base_price: f64, base_params_b: f64, alpha: f64) -> f64 {
    base_price * (target_params_b / base_params_b).powf(alpha)
}

impl PriceTable {
    pub fn from_config(cfg: &PriceConfig) -> Result<Self> {
        let mut specs: IndexMap<ModelId, &PriceSpec> = IndexMap::new();
        for s in &cfg.models {
            let id = ModelId::new(s.model.clone())?;
            if specs.insert(id, s).is_some() {
                return Err(Error::Config(format!("duplicate price entry for {}", s.model)));
            }
            if let Some(p) = s.params_b {
                if !(p > 0.0) {
                    return Err(Error::Config(format!("{}: params_b must be > 0", s.model)));
                }
            }
            for p in [s.price_in, s.price_out].into_iter().flatten() {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(Error::Config(format!("{}: prices must be >= 0", s.model)));
                }
            }
            if s.price_in.is_some() != s.price_out.is_some() {
                return Err(Error::Config(format!(
                    "{}: give both price_in and price_out, or neither",
                    s.model
                )));
            }
        }
        let base = ModelId::new(cfg.base.clone())?;
        let base_spec = specs
            .get(&base)
            .ok_or_else(|| Error::Config(format!("price base {} has no price entry", cfg.base)))?;
        let (Some(base_price), Some(base_params)) = (base_spec.price_in, base_spec.params_b) else {
            return Err(Error::Config(format!(
                "price base {} needs both a price and params_b",
                cfg.base
            )));
        };

        let needs_fit = specs.values().any(|s| s.price_in.is_none());
        let alpha = if needs_fit || specs.len() > 1 {
            let known_pair = || -> Result<f64> {
                let mut out = [(0.0, 0.0); 2];
                for (slot, name) in out.iter_mut().zip(&cfg.fit_pair) {
                    let id = ModelId::new(name.clone())?;
                    let s = specs.get(&id).ok_or_else(|| {
                        Error::Config(format!("fit_pair model {name} has no price entry"))
                    })?;
                    match (s.params_b, s.price_in) {
                        (Some(p), Some(c)) => *slot = (p, c),
                        _ => {
                            return Err(Error::Config(format!(
                                "fit_pair model {name} needs a price and params_b"
                            )))
                        }
                    }
                }
                fit_alpha(out[0], out[1])
            };
            match known_pair() {
                Ok(a) => Some(a),
                Err(e) if needs_fit => return Err(Error::Config(e.to_string())),
                Err(_) => None,
            }
        } else {
            None
        };

        let mut entries = IndexMap::new();
        let mut imputed = Vec::new();
        for (id, s) in specs {
            let (price_in, price_out) = match (s.price_in, s.price_out) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    let params = s.params_b.ok_or_else(|| {
                        Error::Config(format!("{}: no price and no params_b to impute from", s.model))
                    })?;
                    let alpha = alpha.expect("alpha fitted when any price is missing");
                    let p = extrapolate_price(params, base_price, base_params, alpha);
                    imputed.push(id.clone());
                    (p, p)
                }
            };
            entries.insert(
                id.clone(),
                PriceEntry {
                    model: id,
                    price_in,
                    price_out,
                    params_b: s.params_b,
                },
            );
        }
        Ok(Self {
            entries,
            base,
            alpha,
            imputed,
        })
    }

    pub fn get(&self, model: &ModelId) -> Option<&PriceEntry> {
        self.entries.get(model)
    }

    pub fn entries(&self) -> impl Iterator<Item = &PriceEntry> {
        self.entries.values()
    }

    pub fn base(&self) -> &ModelId {
        &self.base
    }

    /// Fitted scaling exponent at full precision.
    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn is_imputed(&self, model: &ModelId) -> bool {
        self.imputed.contains(model)
    }

    /// Model with the largest parameter count (falls back to the highest output price).
    pub fn largest(&self) -> Option<&ModelId> {
        self.entries
            .values()
            .max_by(|a, b| {
                let ka = (a.params_b.unwrap_or(0.0), a.price_out);
                let kb = (b.params_b.unwrap_or(0.0), b.price_out);
                ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|e| &e.model)
    }

    /// Plain-text table: model, input and output price per million tokens.
    pub fn render_table(&self) -> String {
        let width = self
            .entries
            .keys()
            .map(|k| k.as_str().len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>10}\n", "Model", "Input($)", "Output($)");
        for e in self.entries.values() {
            let mark = if self.is_imputed(&e.model) { " *" } else { "" };
            out.push_str(&format!(
                "{:<width$}  {:>9.2}  {:>10.2}{mark}\n",
                e.model.as_str(),
                e.price_in,
                e.price_out
            ));
        }
        out
    }
}
