use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{rules, Oracle, OracleError, OracleRequest};

/// One line of a mock script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Informational; matching uses the digest only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub digest: String,
    pub response: String,
}

type Fallback = Arc<dyn Fn(&OracleRequest) -> Option<String> + Send + Sync>;

/// Deterministic oracle: scripted replies by request digest, then an optional
/// fallback. Requests matched by neither are errors.
#[derive(Clone, Default)]
pub struct MockOracle {
    script: BTreeMap<String, String>,
    fallback: Option<Fallback>,
}

impl std::fmt::Debug for MockOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockOracle")
            .field("scripted", &self.script.len())
            .field("fallback", &self.fallback.is_some())
            .finish()
    }
}

impl MockOracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mock answering every bundled template with [`rules::respond`].
    pub fn rule_based() -> Self {
        Self::new().with_fallback(rules::respond)
    }

    pub fn with_fallback(
        mut self,
        f: impl Fn(&OracleRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.fallback = Some(Arc::new(f));
        self
    }

    pub fn with_entry(mut self, digest: impl Into<String>, response: impl Into<String>) -> Self {
        self.script.entry(digest.into()).or_insert(response.into());
        self
    }

    /// Adds entries from a JSONL script; the first entry for a digest wins.
    pub fn with_script(mut self, path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OracleError::Config(format!("{}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| OracleError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            self.script.entry(e.digest).or_insert(e.response);
        }
        Ok(self)
    }
}

impl Oracle for MockOracle {
    fn complete(&self, request: &OracleRequest) -> Result<String, OracleError> {
        let digest = request.digest();
        if let Some(r) = self.script.get(&digest) {
            return Ok(r.clone());
        }
        self.fallback
            .as_ref()
            .and_then(|f| f(request))
            .ok_or(OracleError::Unscripted(digest))
    }
}
