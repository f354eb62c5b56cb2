//! The ordered expert chain and the base model it falls back to.
//!
//! Experts are appended one stage at a time and never modified afterwards.
//! Routing walks them newest-first.

use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruct::IndicatorConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub expert_id: String,
    pub task_id: String,
    pub stage: u32,
    /// Base URL of a completion server; requests go to `{endpoint}/v1/completions`.
    pub endpoint: String,
    pub model_name: String,
    pub indicators: IndicatorConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModel {
    pub endpoint: String,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    experts: Vec<ExpertSpec>,
    base: BaseModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    schema_version: u32,
    base: BaseModel,
    experts: Vec<ExpertSpec>,
}

fn check_endpoint(endpoint: &str) -> Result<()> {
    let url = reqwest::Url::parse(endpoint).map_err(|e| Error::Registry(format!("bad endpoint `{endpoint}`: {e}")))?;
    if !matches!(url.scheme(), "http" | "https") {
        return Err(Error::Registry(format!("endpoint `{endpoint}` must be http(s)")));
    }
    Ok(())
}

impl Registry {
    pub fn new(base: BaseModel) -> Result<Self> {
        check_endpoint(&base.endpoint)?;
        Ok(Self {
            experts: Vec::new(),
            base,
        })
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    /// Experts in registration (stage-ascending) order.
    pub fn experts(&self) -> &[ExpertSpec] {
        &self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn max_stage(&self) -> u32 {
        self.experts.last().map_or(0, |e| e.stage)
    }

    /// Returns a new registry with `spec` appended. The stage must be exactly
    /// one past the current maximum.
    pub fn register_expert(&self, spec: ExpertSpec) -> Result<Registry> {
        let expected = self.max_stage() + 1;
        if spec.stage != expected {
            return Err(Error::NonContiguousStage {
                expected,
                got: spec.stage,
            });
        }
        if self.experts.iter().any(|e| e.expert_id == spec.expert_id) {
            return Err(Error::Registry(format!("duplicate expert id `{}`", spec.expert_id)));
        }
        check_endpoint(&spec.endpoint)?;
        let mut experts = self.experts.clone();
        experts.push(spec);
        Ok(Registry {
            experts,
            base: self.base.clone(),
        })
    }

    /// Newest first: stage N, N-1, ..., 1.
    pub fn routing_order(&self) -> impl ExactSizeIterator<Item = &ExpertSpec> + DoubleEndedIterator {
        self.experts.iter().rev()
    }

    pub fn find(&self, expert_id: &str) -> Option<&ExpertSpec> {
        self.experts.iter().find(|e| e.expert_id == expert_id)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = RegistryFile {
            schema_version: SCHEMA_VERSION,
            base: self.base.clone(),
            experts: self.experts.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and re-validates a registry document. Unknown fields are
    /// rejected; a schema bump is required to add any.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Registry(format!("malformed registry: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Registry(format!(
                    "schema version {v} unsupported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Registry("missing schema_version".into())),
        }
        let file: RegistryFile =
            serde_json::from_value(value).map_err(|e| Error::Registry(format!("malformed registry: {e}")))?;
        let mut reg = Registry::new(file.base)?;
        for spec in file.experts {
            reg = reg.register_expert(spec)?;
        }
        Ok(reg)
    }
}

pub fn save_registry(registry: &Registry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = registry.to_json()?;
    // write-then-rename so readers never see a torn file
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, doc).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<Registry> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Registry::from_json(&text)
}

/// Shared, swappable registry. Readers take an immutable snapshot; a
/// registration replaces the whole chain at once.
#[derive(Debug, Clone)]
pub struct RegistryHandle {
    inner: Arc<RwLock<Arc<Registry>>>,
}

impl RegistryHandle {
    pub fn new(registry: Registry) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(registry))),
        }
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        Arc::clone(&self.inner.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn register(&self, spec: ExpertSpec) -> Result<Arc<Registry>> {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let next = Arc::new(guard.register_expert(spec)?);
        *guard = Arc::clone(&next);
        Ok(next)
    }
}
