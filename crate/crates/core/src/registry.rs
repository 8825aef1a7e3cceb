//! The model pool: which models exist, how big they are, and where their
//! backends live.
//!
//! A [`Registry`] is immutable once loaded. Reloading builds a fresh one and
//! swaps it in whole.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::SimConfig;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("config syntax: {0}")]
    ConfigSyntax(String),
    #[error("duplicate model name {0:?}")]
    DuplicateModel(String),
    #[error("model {name:?}: declared size class {declared} but {params_billions}B params classify as {derived}")]
    ClassMismatch {
        name: String,
        declared: SizeClass,
        derived: SizeClass,
        params_billions: f64,
    },
    #[error("model {name:?}: incomplete backend endpoint: {reason}")]
    IncompleteEndpoint { name: String, reason: String },
    #[error("invalid parameter count {0}")]
    InvalidParamCount(f64),
    #[error("model {name:?}: {reason}")]
    InvalidModel { name: String, reason: String },
    #[error("model {0:?} not found")]
    ModelNotFound(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeClass {
    Large,
    Medium,
    Small,
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeClass::Large => "Large",
            SizeClass::Medium => "Medium",
            SizeClass::Small => "Small",
        })
    }
}

/// Large above 6B parameters, Small below 3B, Medium in the closed interval
/// between.
pub fn classify_size(params_billions: f64) -> Result<SizeClass, RegistryError> {
    if !params_billions.is_finite() || params_billions <= 0.0 {
        return Err(RegistryError::InvalidParamCount(params_billions));
    }
    Ok(if params_billions > 6.0 {
        SizeClass::Large
    } else if params_billions >= 3.0 {
        SizeClass::Medium
    } else {
        SizeClass::Small
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatTemplate {
    #[default]
    Generic,
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendEndpoint {
    HttpCompletion { url: String },
    Simulated(SimConfig),
}

impl BackendEndpoint {
    pub fn kind_label(&self) -> &'static str {
        match self {
            BackendEndpoint::HttpCompletion { .. } => "http",
            BackendEndpoint::Simulated(_) => "sim",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub params_billions: f64,
    pub size_class: SizeClass,
    pub quantization: String,
    pub backend: BackendEndpoint,
    pub chat_template: ChatTemplate,
    pub max_context_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    models: Vec<ModelSpec>,
}

/// Public descriptor of a model; carries no backend details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub name: String,
    pub size_class: SizeClass,
    pub params_billions: f64,
    pub quantization: String,
}

// Wire schema of the config document.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    models: Vec<RawModel>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    params_billions: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size_class: Option<SizeClass>,
    #[serde(default)]
    quantization: String,
    backend: RawBackend,
    max_context_tokens: u64,
    #[serde(default)]
    chat_template: ChatTemplate,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    kind: RawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sim: Option<SimConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Http,
    Sim,
}

impl Registry {
    /// Parses and validates a JSON registry document.
    pub fn from_json(doc: &str) -> Result<Registry, RegistryError> {
        let raw: RawConfig =
            serde_json::from_str(doc).map_err(|e| RegistryError::ConfigSyntax(e.to_string()))?;
        if raw.models.is_empty() {
            return Err(RegistryError::ConfigSyntax("models list is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut models = Vec::with_capacity(raw.models.len());
        for m in raw.models {
            if !seen.insert(m.name.clone()) {
                return Err(RegistryError::DuplicateModel(m.name));
            }
            models.push(validate(m)?);
        }
        Ok(Registry { models })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Registry, RegistryError> {
        Registry::from_json(&std::fs::read_to_string(path)?)
    }

    /// Serializes back to the config schema, with derived size classes made
    /// explicit.
    pub fn to_json(&self) -> String {
        let raw = RawConfig {
            models: self
                .models
                .iter()
                .map(|m| {
                    let (kind, url, sim) = match &m.backend {
                        BackendEndpoint::HttpCompletion { url } => {
                            (RawKind::Http, Some(url.clone()), None)
                        }
                        BackendEndpoint::Simulated(c) => (RawKind::Sim, None, Some(c.clone())),
                    };
                    RawModel {
                        name: m.name.clone(),
                        params_billions: m.params_billions,
                        size_class: Some(m.size_class),
                        quantization: m.quantization.clone(),
                        backend: RawBackend { kind, url, sim },
                        max_context_tokens: m.max_context_tokens,
                        chat_template: m.chat_template,
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("registry serializes")
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    /// Case-sensitive lookup.
    pub fn get(&self, name: &str) -> Result<&ModelSpec, RegistryError> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| RegistryError::ModelNotFound(name.to_string()))
    }

    pub fn resolve_backend(&self, name: &str) -> Result<&BackendEndpoint, RegistryError> {
        self.get(name).map(|m| &m.backend)
    }

    /// Copy of this registry with every simulated backend reseeded.
    pub fn with_sim_seed(&self, seed: u64) -> Registry {
        let mut models = self.models.clone();
        for m in &mut models {
            if let BackendEndpoint::Simulated(c) = &mut m.backend {
                c.seed = seed;
            }
        }
        Registry { models }
    }

    pub fn descriptors(&self) -> Vec<ModelDescriptor> {
        self.models
            .iter()
            .map(|m| ModelDescriptor {
                name: m.name.clone(),
                size_class: m.size_class,
                params_billions: m.params_billions,
                quantization: m.quantization.clone(),
            })
            .collect()
    }
}

fn validate(m: RawModel) -> Result<ModelSpec, RegistryError> {
    if m.name.is_empty() {
        return Err(RegistryError::ConfigSyntax("model name is empty".into()));
    }
    let invalid = |reason: String| RegistryError::InvalidModel {
        name: m.name.clone(),
        reason,
    };
    let derived = classify_size(m.params_billions)
        .map_err(|_| invalid(format!("params_billions must be positive, got {}", m.params_billions)))?;
    if let Some(declared) = m.size_class {
        if declared != derived {
            return Err(RegistryError::ClassMismatch {
                name: m.name,
                declared,
                derived,
                params_billions: m.params_billions,
            });
        }
    }
    if m.max_context_tokens == 0 {
        return Err(invalid("max_context_tokens must be positive".into()));
    }
    let incomplete = |reason: &str| RegistryError::IncompleteEndpoint {
        name: m.name.clone(),
        reason: reason.to_string(),
    };
    let backend = match (m.backend.kind, m.backend.url, m.backend.sim) {
        (RawKind::Http, Some(url), None) => {
            if url.trim().is_empty() {
                return Err(incomplete("url is empty"));
            }
            BackendEndpoint::HttpCompletion { url }
        }
        (RawKind::Http, None, _) => return Err(incomplete("kind \"http\" requires url")),
        (RawKind::Http, Some(_), Some(_)) => {
            return Err(incomplete("kind \"http\" must not carry sim"))
        }
        (RawKind::Sim, None, Some(sim)) => {
            sim.validate().map_err(|e| invalid(e.to_string()))?;
            BackendEndpoint::Simulated(sim)
        }
        (RawKind::Sim, _, None) => return Err(incomplete("kind \"sim\" requires sim")),
        (RawKind::Sim, Some(_), Some(_)) => {
            return Err(incomplete("kind \"sim\" must not carry url"))
        }
    };
    Ok(ModelSpec {
        name: m.name,
        params_billions: m.params_billions,
        size_class: derived,
        quantization: m.quantization,
        backend,
        chat_template: m.chat_template,
        max_context_tokens: m.max_context_tokens,
    })
}
