use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geometry::{Point3, PointCloud};
use crate::imaging::{CameraFrame, PoseClusterParams, DEFAULT_SCENE_FRAME_CAP, DEFAULT_VIEW_BETA};
use crate::oracle::{
    rules, HttpOracle, MockOracle, Oracle, OracleClient, RetryPolicy, TemplateSet,
    DEFAULT_CONCURRENCY,
};
use crate::referring::{
    AnchorParams, AppearanceAttributes, ReferParams, ANCHOR_MIN_DISTANCE, DEFAULT_SIZE_TAU,
    DEFAULT_SUBSET_CAP, RELATION_PROXIMITY, SIGHT_MARGIN_DEG, SIGHT_MIN_SEPARATION,
};
use crate::scene_graph::RelationParams;
use crate::taskgen::GenerationConfig;
use crate::ObjectId;

/// One scan: objects with either a point file or a box, plus posed frames.
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub scene_id: String,
    /// Dataset the scan comes from.
    #[serde(default)]
    pub source: String,
    /// Frames form a continuous video and are sampled at even intervals.
    #[serde(default)]
    pub is_video: bool,
    pub objects: Vec<ObjectRecord>,
    #[serde(default)]
    pub frames: Vec<CameraFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub id: ObjectId,
    /// Unlabeled objects get a category from the annotation stage.
    #[serde(default)]
    pub label: Option<String>,
    /// Whitespace-separated `x y z` per line; extra columns are ignored.
    #[serde(default)]
    pub points: Option<PathBuf>,
    #[serde(default, rename = "box")]
    pub obb: Option<BoxRecord>,
    #[serde(default)]
    pub attributes: Option<AppearanceAttributes>,
    #[serde(default)]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

impl SceneManifest {
    /// Reads, resolves and validates a manifest.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let mut m: SceneManifest = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for o in &mut m.objects {
            if let Some(p) = &o.points {
                o.points = Some(resolve(dir, p));
            }
        }
        for f in &mut m.frames {
            f.image = resolve(dir, &f.image);
            if let Some(d) = &f.depth {
                f.depth = Some(resolve(dir, d));
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.scene_id.trim().is_empty() {
            return Err("empty scene_id".into());
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(format!("duplicate object id {}", o.id));
            }
            if o.points.is_some() == o.obb.is_some() {
                return Err(format!(
                    "object {} needs exactly one of points or box",
                    o.id
                ));
            }
        }
        let mut frames = BTreeSet::new();
        for f in &self.frames {
            if !frames.insert(&f.frame_id) {
                return Err(format!("duplicate frame id {}", f.frame_id));
            }
        }
        Ok(())
    }

    /// Every file the manifest points at, in a fixed order.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = self
            .objects
            .iter()
            .filter_map(|o| o.points.clone())
            .collect();
        for f in &self.frames {
            out.push(f.image.clone());
            out.extend(f.depth.clone());
        }
        out
    }
}

pub fn load_points(path: &Path) -> Result<PointCloud, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .take(3)
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| format!("{}:{}: {e}", path.display(), n + 1))?;
        if vals.len() < 3 {
            return Err(format!("{}:{}: expected x y z", path.display(), n + 1));
        }
        pts.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    Ok(PointCloud::new(pts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Mock: JSONL file of `{"digest", "response"}` entries.
    pub script: Option<PathBuf>,
    /// Mock: answer unscripted requests with the rule-based responder.
    pub rules: bool,
    /// HTTP: chat-completions endpoint.
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub retry: RetryPolicy,
    /// Maximum in-flight requests.
    pub concurrency: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Mock,
            script: None,
            rules: true,
            base_url: None,
            model: None,
            retry: RetryPolicy::default(),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.retry.validate().map_err(|e| e.to_string())?;
        if self.concurrency == 0 {
            return Err("oracle concurrency must be at least 1".into());
        }
        if self.kind == OracleKind::Http && (self.base_url.is_none() || self.model.is_none()) {
            return Err("http oracles need base_url and model".into());
        }
        Ok(())
    }

    pub fn build(
        &self,
        base: &Path,
        templates: &TemplateSet,
    ) -> Result<OracleClient, PipelineError> {
        let cfg = |e: crate::oracle::OracleError| PipelineError::Config(e.to_string());
        let backend: Arc<dyn Oracle> = match self.kind {
            OracleKind::Mock => {
                let mut m = MockOracle::new();
                if let Some(s) = &self.script {
                    m = m.with_script(&resolve(base, s)).map_err(cfg)?;
                }
                if self.rules {
                    m = m.with_fallback(rules::respond);
                }
                Arc::new(m)
            }
            OracleKind::Http => Arc::new(
                HttpOracle::new(
                    self.base_url.as_deref().unwrap_or_default(),
                    self.model.as_deref().unwrap_or_default(),
                    Duration::from_millis(self.retry.timeout_ms),
                )
                .map_err(cfg)?,
            ),
        };
        Ok(OracleClient::with_templates(
            backend,
            templates.clone(),
            self.retry.clone(),
            self.concurrency,
        ))
    }

    /// Content that determines replies: the settings plus the script bytes.
    pub(crate) fn fingerprint(&self, base: &Path) -> String {
        let script = self
            .script
            .as_ref()
            .and_then(|s| std::fs::read(resolve(base, s)).ok())
            .map(|b| crate::util::sha256_hex(&b))
            .unwrap_or_default();
        let mut v = serde_json::to_value(self).expect("oracle config serializes");
        v["script_sha256"] = serde_json::Value::String(script);
        v.to_string()
    }
}

/// Oracle per pipeline role; unset roles use `default`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct OracleRoles {
    pub default: OracleConfig,
    pub annotation: Option<OracleConfig>,
    pub relation_judgment: Option<OracleConfig>,
    pub relation_extraction: Option<OracleConfig>,
    pub label_graph: Option<OracleConfig>,
    pub referring: Option<OracleConfig>,
    pub attributes: Option<OracleConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Annotation,
    RelationJudgment,
    RelationExtraction,
    LabelGraph,
    Referring,
    Attributes,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Annotation,
        Role::RelationJudgment,
        Role::RelationExtraction,
        Role::LabelGraph,
        Role::Referring,
        Role::Attributes,
    ];
}

impl OracleRoles {
    pub fn get(&self, role: Role) -> Option<&OracleConfig> {
        match role {
            Role::Annotation => self.annotation.as_ref(),
            Role::RelationJudgment => self.relation_judgment.as_ref(),
            Role::RelationExtraction => self.relation_extraction.as_ref(),
            Role::LabelGraph => self.label_graph.as_ref(),
            Role::Referring => self.referring.as_ref(),
            Role::Attributes => self.attributes.as_ref(),
        }
    }

    pub fn effective(&self, role: Role) -> &OracleConfig {
        self.get(role).unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Pixel intensity above which a pixel counts as saturated.
    pub overexposed_intensity: u8,
    /// Saturated-pixel fraction above which a frame is overexposed.
    pub overexposed_fraction: f64,
    /// Overexposed-frame fraction above which the scene is dropped.
    pub scene_overexposed_fraction: f64,
    /// Frames kept by sampling before coverage selection.
    pub frame_target: usize,
    /// Frames kept per scene after coverage selection.
    pub frame_cap: usize,
    pub pose_cluster: PoseClusterParams,
    pub view_beta: f64,
    /// Per-axis face samples used for box-only visibility.
    pub face_grid: usize,
    /// Frames sent with the scene caption request.
    pub scene_caption_images: usize,
    pub relations: RelationParams,
    pub size_tau: f64,
    pub relation_proximity: f64,
    pub subset_cap: usize,
    pub anchor_min_distance: f64,
    pub sight_min_separation: f64,
    pub sight_margin_deg: f64,
    pub max_anchors: usize,
    pub max_sights: usize,
    pub rewrite_referrals: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            overexposed_intensity: crate::imaging::OVEREXPOSED_INTENSITY,
            overexposed_fraction: crate::imaging::OVEREXPOSED_FRACTION,
            scene_overexposed_fraction: 0.5,
            frame_target: 64,
            frame_cap: DEFAULT_SCENE_FRAME_CAP,
            pose_cluster: PoseClusterParams::default(),
            view_beta: DEFAULT_VIEW_BETA,
            face_grid: crate::geometry::DEFAULT_FACE_GRID,
            scene_caption_images: 8,
            relations: RelationParams::default(),
            size_tau: DEFAULT_SIZE_TAU,
            relation_proximity: RELATION_PROXIMITY,
            subset_cap: DEFAULT_SUBSET_CAP,
            anchor_min_distance: ANCHOR_MIN_DISTANCE,
            sight_min_separation: SIGHT_MIN_SEPARATION,
            sight_margin_deg: SIGHT_MARGIN_DEG,
            max_anchors: 3,
            max_sights: 3,
            rewrite_referrals: true,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        let fractions = [
            ("overexposed_fraction", self.overexposed_fraction),
            (
                "scene_overexposed_fraction",
                self.scene_overexposed_fraction,
            ),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.frame_cap == 0 || self.face_grid < 2 || self.subset_cap == 0 {
            return Err(
                "frame_cap and subset_cap must be positive and face_grid at least 2".into(),
            );
        }
        for (name, v) in [
            ("size_tau", self.size_tau),
            ("relation_proximity", self.relation_proximity),
            ("anchor_min_distance", self.anchor_min_distance),
            ("sight_min_separation", self.sight_min_separation),
            ("sight_margin_deg", self.sight_margin_deg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    pub fn refer_params(&self) -> ReferParams {
        ReferParams {
            size_tau: self.size_tau,
            relation_proximity: self.relation_proximity,
            subset_cap: self.subset_cap,
            anchor: AnchorParams {
                min_distance: self.anchor_min_distance,
                sight_min_separation: self.sight_min_separation,
                sight_margin_deg: self.sight_margin_deg,
                max_anchors: self.max_anchors,
                max_sights: self.max_sights,
            },
            rewrite: self.rewrite_referrals,
        }
    }
}

fn default_workers() -> usize {
    4
}

fn default_failure_budget() -> usize {
    50
}

/// Top-level run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scene manifests, relative to the config file.
    pub scenes: Vec<PathBuf>,
    /// Artifact root, relative to the config file.
    pub output_dir: PathBuf,
    /// Label-graph cache; `<output_dir>/cache` when unset.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Scenes processed in parallel.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Files of excluded `scene` ids or `scene/frame` pairs, one per line.
    #[serde(default)]
    pub exclusions: Vec<PathBuf>,
    /// Oracle failures tolerated per stage before the run stops.
    #[serde(default = "default_failure_budget")]
    pub failure_budget: usize,
    /// TOML file overriding bundled prompt templates by name.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    /// Relation vocabulary; the default seven predicates when unset.
    #[serde(default)]
    pub relation_predicates: Option<Vec<String>>,
    #[serde(default)]
    pub oracles: OracleRoles,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub generation: GenerationConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let c: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = PipelineError::Config;
        if self.scenes.is_empty() {
            return Err(bad("no scenes listed".into()));
        }
        if self.workers == 0 {
            return Err(bad("workers must be at least 1".into()));
        }
        self.thresholds.validate().map_err(bad)?;
        self.oracles.default.validate().map_err(bad)?;
        for role in Role::ALL {
            if let Some(c) = self.oracles.get(role) {
                c.validate().map_err(bad)?;
            }
        }
        Ok(())
    }
}
