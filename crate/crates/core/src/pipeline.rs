//! Staged, cached execution over scene manifests.
//!
//! | stage    | artifacts under the output directory                                  |
//! |----------|-----------------------------------------------------------------------|
//! | clean    | `clean/<scene>.json`, canonically rotated frames in `clean/frames/`    |
//! | annotate | `annotate/<scene>.json`, box-drawn object views                        |
//! | graph    | `graph/label_graph.json`, `graph/<scene>.json`, `scene_graphs/<scene>.jsonl` |
//! | refer    | `referrals/<scene>.jsonl`, `refer/<scene>.json`                        |
//! | generate | `dataset.jsonl`, `dataset_manifest.json`                              |
//!
//! Each unit of work leaves a stamp in `stamps/<stage>/` with the hash of its
//! inputs and of every file it wrote. A unit whose stamp still matches is
//! skipped, so no oracle is consulted. Stage summaries go to
//! `reports/<stage>.json`.

mod config;
mod stages;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    load_points, BoxRecord, ObjectRecord, OracleConfig, OracleKind, OracleRoles, PipelineConfig,
    Role, SceneManifest, Thresholds,
};
pub use stages::{
    Annotations, CleanDiagnostics, CleanFrame, CleanObject, CleanScene, SceneGroups, SceneReferrals,
};

use crate::oracle::{bundled_templates, OracleClient, ScriptEntry, TemplateSet};
use crate::util::{sha256_hex, write_atomic};

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
    schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Clean,
    Annotate,
    Graph,
    Refer,
    Generate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Clean,
        Stage::Annotate,
        Stage::Graph,
        Stage::Refer,
        Stage::Generate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Clean => "clean",
            Stage::Annotate => "annotate",
            Stage::Graph => "graph",
            Stage::Refer => "refer",
            Stage::Generate => "generate",
        }
    }

    /// Parses a comma-separated list such as `clean,graph,refer,generate`.
    pub fn parse_list(text: &str) -> Result<BTreeSet<Stage>, PipelineError> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Stage::from_str)
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {path}: {reason}")]
    Input {
        stage: Stage,
        path: PathBuf,
        reason: String,
    },
    #[error("{stage}: missing {path}; run the {needs} stage first")]
    MissingUpstream {
        stage: Stage,
        needs: Stage,
        path: PathBuf,
    },
    #[error("{stage}: {} oracle failures exceed the budget of {budget}", .failures.len())]
    Budget {
        stage: Stage,
        budget: usize,
        failures: Vec<String>,
    },
    #[error("{stage}: cannot write {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub stage: Option<Stage>,
    pub units: usize,
    pub cached: usize,
    pub oracle_calls: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub stages: Vec<StageSummary>,
}

/// Output files (relative path, bytes) and oracle failure notes of one unit.
pub(crate) type Computed = (Vec<(String, Vec<u8>)>, Vec<String>);

#[derive(Serialize, Deserialize)]
struct Stamp {
    input: String,
    outputs: BTreeMap<String, String>,
}

/// Incremental digest over tagged, length-prefixed parts.
pub(crate) struct InputHash(Sha256);

impl InputHash {
    pub(crate) fn new(stage: Stage) -> Self {
        let mut h = InputHash(Sha256::new());
        h.add("version", env!("CARGO_PKG_VERSION").as_bytes());
        h.add("stage", stage.name().as_bytes());
        h
    }

    pub(crate) fn add(&mut self, tag: &str, bytes: &[u8]) {
        for part in [tag.as_bytes(), bytes] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part);
        }
    }

    pub(crate) fn json(&mut self, tag: &str, v: &impl Serialize) {
        self.add(
            tag,
            serde_json::to_string(v)
                .expect("value serializes")
                .as_bytes(),
        );
    }

    pub(crate) fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Result of one unit of work, not yet committed.
pub(crate) struct Unit {
    pub key: String,
    pub input: String,
    pub outputs: Vec<(String, Vec<u8>)>,
    pub failures: Vec<String>,
    pub cached: bool,
}

#[derive(Debug, Default)]
pub(crate) struct Exclusions {
    pub scenes: BTreeSet<String>,
    pub frames: BTreeSet<(String, String)>,
}

impl Exclusions {
    fn parse(&mut self, text: &str) {
        for line in text.lines() {
            let entry = line.split('#').next().unwrap_or("").trim();
            if entry.is_empty() {
                continue;
            }
            match entry.split_once('/') {
                Some((s, f)) => self.frames.insert((s.to_string(), f.to_string())),
                None => self.scenes.insert(entry.to_string()),
            };
        }
    }
}

/// A configured run over a fixed set of scenes.
pub struct Pipeline {
    pub(crate) config: PipelineConfig,
    pub(crate) base: PathBuf,
    pub(crate) out: PathBuf,
    pub(crate) cache: PathBuf,
    pub(crate) clients: BTreeMap<Role, OracleClient>,
    pub(crate) fingerprints: BTreeMap<Role, String>,
    pub(crate) exclusions: Exclusions,
    pub(crate) pool: rayon::ThreadPool,
}

fn sanitize(key: &str) -> String {
    key.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl Pipeline {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let config = PipelineConfig::from_toml(&text)?;
        let base = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        Self::new(config, &base)
    }

    /// `base` anchors every relative path in `config`.
    pub fn new(config: PipelineConfig, base: &Path) -> Result<Self, PipelineError> {
        config.validate()?;
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let out = resolve(&config.output_dir);
        let cache = config
            .cache_dir
            .as_deref()
            .map(resolve)
            .unwrap_or_else(|| out.join("cache"));
        let templates: TemplateSet = match &config.prompts {
            Some(p) => TemplateSet::with_overrides(&resolve(p))
                .map_err(|e| PipelineError::Config(e.to_string()))?,
            None => bundled_templates().clone(),
        };
        let prompts_hash = config
            .prompts
            .as_ref()
            .and_then(|p| std::fs::read(resolve(p)).ok())
            .map(|b| sha256_hex(&b))
            .unwrap_or_default();
        let default = config.oracles.default.build(base, &templates)?;
        let mut clients = BTreeMap::new();
        let mut fingerprints = BTreeMap::new();
        for role in Role::ALL {
            let client = match config.oracles.get(role) {
                Some(c) => c.build(base, &templates)?,
                None => default.clone(),
            };
            clients.insert(role, client);
            fingerprints.insert(
                role,
                config.oracles.effective(role).fingerprint(base) + &prompts_hash,
            );
        }
        let mut exclusions = Exclusions::default();
        for p in &config.exclusions {
            let p = resolve(p);
            let text = std::fs::read_to_string(&p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            exclusions.parse(&text);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            config,
            base: base.to_path_buf(),
            out,
            cache,
            clients,
            fingerprints,
            exclusions,
            pool,
        })
    }

    /// Routes every role to `client`, e.g. a scripted mock in tests.
    pub fn with_oracle(mut self, client: OracleClient, fingerprint: &str) -> Self {
        for role in Role::ALL {
            self.clients.insert(role, client.clone());
            self.fingerprints.insert(role, fingerprint.to_string());
        }
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub(crate) fn client(&self, role: Role) -> &OracleClient {
        &self.clients[&role]
    }

    /// Backend calls made so far across all roles. Roles sharing a client are
    /// counted once.
    pub fn oracle_calls(&self) -> usize {
        let mut seen: Vec<&OracleClient> = Vec::new();
        let mut total = 0;
        for c in self.clients.values() {
            if !seen.iter().any(|s| s.same_backend(c)) {
                total += c.call_count();
                seen.push(c);
            }
        }
        total
    }

    /// Completed backend calls as script entries, sorted by digest, one per
    /// digest. Feeding them back through a mock replays the run.
    pub fn recorded_script(&self) -> Vec<ScriptEntry> {
        let mut seen: Vec<&OracleClient> = Vec::new();
        let mut entries: BTreeMap<String, (String, String)> = BTreeMap::new();
        for c in self.clients.values() {
            if seen.iter().any(|s| s.same_backend(c)) {
                continue;
            }
            seen.push(c);
            for r in c.call_log() {
                entries.entry(r.digest).or_insert((r.template, r.response));
            }
        }
        entries
            .into_iter()
            .map(|(digest, (template, response))| ScriptEntry {
                template: Some(template),
                digest,
                response,
            })
            .collect()
    }

    pub(crate) fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn manifests(&self) -> Result<Vec<SceneManifest>, PipelineError> {
        let mut out: Vec<SceneManifest> = Vec::new();
        for p in &self.config.scenes {
            let path = self.resolve(p);
            let m = SceneManifest::load(&path).map_err(|reason| PipelineError::Input {
                stage: Stage::Clean,
                path: path.clone(),
                reason,
            })?;
            if out.iter().any(|o| o.scene_id == m.scene_id) {
                return Err(PipelineError::Input {
                    stage: Stage::Clean,
                    path,
                    reason: format!("duplicate scene id {}", m.scene_id),
                });
            }
            out.push(m);
        }
        out.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        Ok(out)
    }

    /// Runs the requested stages in pipeline order.
    pub fn run(&self, stages: &BTreeSet<Stage>) -> Result<RunSummary, PipelineError> {
        let manifests = self.manifests()?;
        let mut summary = RunSummary::default();
        for stage in Stage::ALL.into_iter().filter(|s| stages.contains(s)) {
            let before = self.oracle_calls();
            let units = match stage {
                Stage::Clean => self.stage_clean(&manifests)?,
                Stage::Annotate => self.stage_annotate(&manifests)?,
                Stage::Graph => self.stage_graph(&manifests)?,
                Stage::Refer => self.stage_refer(&manifests)?,
                Stage::Generate => self.stage_generate(&manifests)?,
            };
            let failures: usize = units.iter().map(|u| u.failures.len()).sum();
            let s = StageSummary {
                stage: Some(stage),
                units: units.len(),
                cached: units.iter().filter(|u| u.cached).count(),
                oracle_calls: self.oracle_calls() - before,
                failures,
            };
            self.commit(stage, units)?;
            self.write_report(stage, &manifests)?;
            log::info!(
                "{stage}: {} units, {} cached, {} oracle calls, {} failures",
                s.units,
                s.cached,
                s.oracle_calls,
                s.failures
            );
            summary.stages.push(s);
        }
        Ok(summary)
    }

    fn stamp_path(&self, stage: Stage, key: &str) -> PathBuf {
        self.out
            .join("stamps")
            .join(stage.name())
            .join(format!("{}.json", sanitize(key)))
    }

    /// True when the stamp for `key` records `input` and every recorded output
    /// is still on disk unchanged.
    pub(crate) fn fresh(&self, stage: Stage, key: &str, input: &str) -> bool {
        let Ok(bytes) = std::fs::read(self.stamp_path(stage, key)) else {
            return false;
        };
        let Ok(stamp) = serde_json::from_slice::<Stamp>(&bytes) else {
            return false;
        };
        stamp.input == input
            && stamp.outputs.iter().all(|(rel, sha)| {
                std::fs::read(self.out.join(rel)).is_ok_and(|b| &sha256_hex(&b) == sha)
            })
    }

    /// Skips `compute` when the stamp for `key` is fresh.
    pub(crate) fn unit(
        &self,
        stage: Stage,
        key: &str,
        input: String,
        compute: impl FnOnce() -> Result<Computed, PipelineError>,
    ) -> Result<Unit, PipelineError> {
        if self.fresh(stage, key, &input) {
            return Ok(Unit {
                key: key.to_string(),
                input,
                outputs: Vec::new(),
                failures: Vec::new(),
                cached: true,
            });
        }
        let (outputs, failures) = compute()?;
        Ok(Unit {
            key: key.to_string(),
            input,
            outputs,
            failures,
            cached: false,
        })
    }

    pub(crate) fn write(&self, stage: Stage, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.out.join(rel);
        write_atomic(&path, bytes).map_err(|source| PipelineError::Io {
            stage,
            path,
            source,
        })
    }

    /// Enforces the failure budget, then writes outputs and stamps.
    fn commit(&self, stage: Stage, units: Vec<Unit>) -> Result<(), PipelineError> {
        let failures: Vec<String> = units
            .iter()
            .flat_map(|u| u.failures.iter().cloned())
            .collect();
        if failures.len() > self.config.failure_budget {
            return Err(PipelineError::Budget {
                stage,
                budget: self.config.failure_budget,
                failures,
            });
        }
        for u in units.into_iter().filter(|u| !u.cached) {
            let mut recorded = BTreeMap::new();
            for (rel, bytes) in &u.outputs {
                self.write(stage, rel, bytes)?;
                recorded.insert(rel.clone(), sha256_hex(bytes));
            }
            let stamp = Stamp {
                input: u.input,
                outputs: recorded,
            };
            let path = self.stamp_path(stage, &u.key);
            let bytes = serde_json::to_vec_pretty(&stamp).expect("stamp serializes");
            write_atomic(&path, &bytes).map_err(|source| PipelineError::Io {
                stage,
                path,
                source,
            })?;
        }
        Ok(())
    }

    /// Reads an artifact written by `needs`.
    pub(crate) fn read_artifact(
        &self,
        stage: Stage,
        needs: Stage,
        rel: &str,
    ) -> Result<Vec<u8>, PipelineError> {
        let path = self.out.join(rel);
        std::fs::read(&path).map_err(|_| PipelineError::MissingUpstream { stage, needs, path })
    }

    pub(crate) fn parse_artifact<T: serde::de::DeserializeOwned>(
        &self,
        stage: Stage,
        rel: &str,
        bytes: &[u8],
    ) -> Result<T, PipelineError> {
        serde_json::from_slice(bytes).map_err(|e| PipelineError::Input {
            stage,
            path: self.out.join(rel),
            reason: e.to_string(),
        })
    }
}

/// JSON schema of [`PipelineConfig`].
pub fn config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(PipelineConfig)).expect("schema serializes")
}

/// JSON schema of [`SceneManifest`].
pub fn manifest_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(SceneManifest)).expect("schema serializes")
}
