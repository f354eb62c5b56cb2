//! Task datasets of `(query, response)` pairs stored as JSON lines.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

impl Instance {
    pub fn new(query: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            response: Some(response.into()),
        }
    }

    pub fn query_only(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            response: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_id: String,
    pub split: Split,
    pub instances: Vec<Instance>,
    /// Set when at least one instance has no response. Such datasets can feed
    /// rehearsal pools and OOD streams but not positive samples.
    pub queries_only: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    query: Option<String>,
    #[serde(default)]
    response: Option<String>,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, split: Split, instances: Vec<Instance>) -> Self {
        let queries_only = instances.iter().any(|i| i.response.is_none());
        Self {
            task_id: task_id.into(),
            split,
            instances,
            queries_only,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Reads one JSON object per line. Blank lines are skipped; line numbers in
/// errors are 1-based positions in the file.
pub fn load_task_dataset(path: impl AsRef<Path>, task_id: &str, split: Split) -> Result<TaskDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_dataset(&text, path, task_id, split)
}

pub(crate) fn parse_task_dataset(text: &str, path: &Path, task_id: &str, split: Split) -> Result<TaskDataset> {
    if task_id.trim().is_empty() {
        return Err(Error::invalid("task id must not be empty"));
    }
    let mut instances = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let query = raw.query.ok_or_else(|| malformed("missing field `query`".into()))?;
        if query.trim().is_empty() {
            return Err(malformed("`query` is empty".into()));
        }
        instances.push(Instance {
            query,
            response: raw.response,
        });
    }
    if instances.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(TaskDataset::new(task_id, split, instances))
}

pub fn write_task_dataset(dataset: &TaskDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in &dataset.instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Rejects a scenario whose datasets reuse a task id.
pub fn check_unique_task_ids<'a>(datasets: impl IntoIterator<Item = &'a TaskDataset>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for ds in datasets {
        if !seen.insert(ds.task_id.as_str()) {
            return Err(Error::DuplicateTask(ds.task_id.clone()));
        }
    }
    Ok(())
}
