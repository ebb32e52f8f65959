//! Caption, grounding and QA sample generation.
//!
//! Every answer is derived from stored geometry or annotations at generation
//! time. Balancing subsamples per (scene, task) with seeded streams, so the
//! selection does not depend on processing order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::geometry::{obb_distance, Obb7};
use crate::imaging::Intrinsics;
use crate::label_graph::LabelGraph;
use crate::oracle::{bindings, OracleClient, PromptTemplate};
use crate::referring::{AppearanceAttributes, Provenance, ReferralSet};
use crate::util::{round6, sha256_hex, stream_rng};
use crate::ObjectId;

const QUESTION_TEMPLATES: &str = include_str!("../assets/question_templates.toml");

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
pub enum TaskKind {
    SceneCaption,
    ViewCaption,
    ObjectCaption,
    VisualGrounding,
    ObjectSize,
    AbsoluteDistance,
    RelativeDistance,
    ObjectCount,
    AttributeRecognition,
}

impl TaskKind {
    pub const ALL: [TaskKind; 9] = [
        TaskKind::SceneCaption,
        TaskKind::ViewCaption,
        TaskKind::ObjectCaption,
        TaskKind::VisualGrounding,
        TaskKind::ObjectSize,
        TaskKind::AbsoluteDistance,
        TaskKind::RelativeDistance,
        TaskKind::ObjectCount,
        TaskKind::AttributeRecognition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SceneCaption => "scene_caption",
            TaskKind::ViewCaption => "view_caption",
            TaskKind::ObjectCaption => "object_caption",
            TaskKind::VisualGrounding => "visual_grounding",
            TaskKind::ObjectSize => "object_size",
            TaskKind::AbsoluteDistance => "absolute_distance",
            TaskKind::RelativeDistance => "relative_distance",
            TaskKind::ObjectCount => "object_count",
            TaskKind::AttributeRecognition => "attribute_recognition",
        }
    }

    pub fn is_caption(self) -> bool {
        matches!(
            self,
            TaskKind::SceneCaption | TaskKind::ViewCaption | TaskKind::ObjectCaption
        )
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Default,
    Serialize,
    Deserialize,
    schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// One generated item. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub sample_id: String,
    pub scene_id: String,
    pub split: Split,
    pub task: TaskKind,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<ObjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
}

impl QaSample {
    fn new(scene_id: &str, split: Split, task: TaskKind, question: String, answer: String) -> Self {
        Self {
            sample_id: String::new(),
            scene_id: scene_id.to_string(),
            split,
            task,
            question,
            answer,
            options: vec![],
            targets: vec![],
            provenance: None,
            metadata: BTreeMap::new(),
        }
    }

    fn meta(mut self, key: &str, value: Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Upper bound on samples per (scene, task).
    pub per_scene_cap: usize,
    /// Optional dataset-wide cap per task, applied after the per-scene cap.
    pub quotas: BTreeMap<TaskKind, usize>,
    /// Scenes assigned to the test split; all others are train scenes.
    pub test_scenes: BTreeSet<String>,
    /// Decimal places of absolute-distance answers, in meters.
    pub distance_decimals: usize,
    /// Candidate pairs or triples examined per scene for distance tasks,
    /// as a multiple of `per_scene_cap`.
    pub pair_budget_factor: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            per_scene_cap: 50,
            quotas: BTreeMap::new(),
            test_scenes: BTreeSet::new(),
            distance_decimals: 2,
            pair_budget_factor: 4,
        }
    }
}

impl GenerationConfig {
    pub fn split_of(&self, scene_id: &str) -> Split {
        if self.test_scenes.contains(scene_id) {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Deserialize)]
struct RawTemplates {
    templates: Vec<String>,
}

/// Question templates keyed by task name (`attribute_tf` and
/// `attribute_open` for the two attribute formats).
pub fn question_templates() -> &'static BTreeMap<String, Vec<PromptTemplate>> {
    static SET: OnceLock<BTreeMap<String, Vec<PromptTemplate>>> = OnceLock::new();
    SET.get_or_init(|| {
        let raw: BTreeMap<String, RawTemplates> =
            toml::from_str(QUESTION_TEMPLATES).expect("bundled question templates parse");
        raw.into_iter()
            .map(|(k, v)| {
                let ts = v
                    .templates
                    .into_iter()
                    .map(|b| PromptTemplate::new(k.clone(), b))
                    .collect();
                (k, ts)
            })
            .collect()
    })
}

fn ask(key: &str, rng: &mut ChaCha8Rng, slots: &[(&str, &str)]) -> String {
    let ts = &question_templates()[key];
    let t = ts.choose(rng).expect("at least one template per task");
    let b: BTreeMap<String, String> = slots
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    t.render(&b).expect("question template slots are bound")
}

/// Object with the referral used in questions.
#[derive(Debug, Clone, PartialEq)]
pub struct Referred<'a> {
    pub id: ObjectId,
    pub label: &'a str,
    pub obb: Obb7,
    pub text: String,
    pub provenance: Provenance,
    pub anchors: Vec<ObjectId>,
}

fn tag_referral(mut s: QaSample, r: &Referred<'_>) -> QaSample {
    s.provenance = Some(r.provenance);
    if !r.anchors.is_empty() {
        s = s.meta("anchors", json!(r.anchors));
    }
    s
}

/// `L x W x H cm`, each rounded to whole centimeters.
pub fn size_answer(obb: &Obb7) -> String {
    let cm = |m: f64| (m * 100.0).round() as i64;
    format!(
        "{} x {} x {} cm",
        cm(obb.length()),
        cm(obb.width()),
        cm(obb.height())
    )
}

pub fn distance_answer(d: f64, decimals: usize) -> String {
    format!("{d:.decimals$} m")
}

pub fn gen_object_size(
    scene_id: &str,
    split: Split,
    r: &Referred<'_>,
    rng: &mut ChaCha8Rng,
) -> QaSample {
    let q = ask("object_size", rng, &[("Referral", &r.text)]);
    let mut s = QaSample::new(
        scene_id,
        split,
        TaskKind::ObjectSize,
        q,
        size_answer(&r.obb),
    );
    s.targets = vec![r.id];
    tag_referral(s, r)
}

/// `None` when the boxes overlap.
pub fn gen_absolute_distance(
    scene_id: &str,
    split: Split,
    a: &Referred<'_>,
    b: &Referred<'_>,
    decimals: usize,
    rng: &mut ChaCha8Rng,
) -> Option<QaSample> {
    let d = obb_distance(&a.obb, &b.obb);
    if d <= 0.0 {
        return None;
    }
    let q = ask(
        "absolute_distance",
        rng,
        &[("ReferralA", &a.text), ("ReferralB", &b.text)],
    );
    let mut s = QaSample::new(
        scene_id,
        split,
        TaskKind::AbsoluteDistance,
        q,
        distance_answer(d, decimals),
    );
    s.targets = vec![a.id, b.id];
    Some(s.meta("distance_m", json!(round6(d))))
}

/// A/B question about which candidate is closer to `target`; `None` unless
/// the two distances differ by more than `buffer`.
pub fn gen_relative_distance(
    scene_id: &str,
    split: Split,
    target: &Referred<'_>,
    c1: &Referred<'_>,
    c2: &Referred<'_>,
    buffer: f64,
    rng: &mut ChaCha8Rng,
) -> Option<QaSample> {
    let d1 = obb_distance(&target.obb, &c1.obb);
    let d2 = obb_distance(&target.obb, &c2.obb);
    if (d1 - d2).abs() <= buffer {
        return None;
    }
    let (a, b, da, db) = if rng.gen_bool(0.5) {
        (c1, c2, d1, d2)
    } else {
        (c2, c1, d2, d1)
    };
    let answer = if da < db { "A" } else { "B" };
    let q = ask(
        "relative_distance",
        rng,
        &[
            ("Target", &target.text),
            ("OptionA", &a.text),
            ("OptionB", &b.text),
        ],
    );
    let mut s = QaSample::new(
        scene_id,
        split,
        TaskKind::RelativeDistance,
        q,
        answer.to_string(),
    );
    s.options = vec!["A".into(), "B".into()];
    s.targets = vec![target.id, a.id, b.id];
    Some(s.meta("option_objects", json!({"A": a.id, "B": b.id})))
}

/// Counts objects whose label is `label` or one of its hyponyms. Always a
/// test item; `None` when nothing matches.
pub fn gen_object_count(
    scene_id: &str,
    label: &str,
    objects: &[(ObjectId, &str)],
    graph: &LabelGraph,
    rng: &mut ChaCha8Rng,
) -> Option<QaSample> {
    let matching: Vec<ObjectId> = objects
        .iter()
        .filter(|(_, l)| graph.is_subtype(l, label))
        .map(|(id, _)| *id)
        .collect();
    if matching.is_empty() {
        return None;
    }
    let q = ask("object_count", rng, &[("Label", label)]);
    let mut s = QaSample::new(
        scene_id,
        Split::Test,
        TaskKind::ObjectCount,
        q,
        matching.len().to_string(),
    );
    s.targets = matching;
    Some(s.meta("label", json!(label)))
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whether `value` appears as a whole-word sequence in `referral`.
pub fn leaks(referral: &str, value: &str) -> bool {
    let r = words(referral);
    let v = words(value);
    !v.is_empty() && r.windows(v.len()).any(|w| w == v.as_slice())
}

/// Whether `r` may carry an attribute question: the bare label for objects
/// without distractors, or an anchored referral.
pub fn attribute_referral_allowed(r: &Referred<'_>) -> bool {
    r.provenance == Provenance::Singleton || r.provenance.is_anchor()
}

fn attribute_sample(
    scene_id: &str,
    split: Split,
    r: &Referred<'_>,
    field: &str,
    value: &str,
    question: String,
    answer: &str,
) -> QaSample {
    let mut s = QaSample::new(
        scene_id,
        split,
        TaskKind::AttributeRecognition,
        question,
        answer.to_string(),
    );
    s.targets = vec![r.id];
    tag_referral(s, r)
        .meta("attribute_field", json!(field))
        .meta("attribute_value", json!(value))
        .meta("referral", json!(r.text))
}

/// True item plus, when the oracle supplies a distinct value, a false item.
pub fn gen_attribute_tf(
    scene_id: &str,
    split: Split,
    r: &Referred<'_>,
    field: &str,
    value: &str,
    oracle: &OracleClient,
    rng: &mut ChaCha8Rng,
) -> Vec<QaSample> {
    if !attribute_referral_allowed(r) || leaks(&r.text, value) {
        return vec![];
    }
    let yes_no = vec!["yes".to_string(), "no".to_string()];
    let q = ask(
        "attribute_tf",
        rng,
        &[("Field", field), ("Referral", &r.text), ("Value", value)],
    );
    let mut t = attribute_sample(scene_id, split, r, field, value, q, "yes")
        .meta("format", json!("true_false"));
    t.options = yes_no.clone();
    let mut out = vec![t];
    let truth = value.trim().to_lowercase();
    let wrong = oracle.ask(
        "distracting_attribute",
        bindings([
            ("AttributeField", field),
            ("ObjectLabel", r.label),
            ("AttributeValue", value),
        ]),
        vec![],
        |t| {
            let v = t
                .trim()
                .trim_matches(|c: char| c == '"' || c == '.')
                .trim()
                .to_lowercase();
            if v.is_empty() {
                Err("empty distractor".to_string())
            } else if v == truth {
                Err(format!("distractor equals the true value {v:?}"))
            } else {
                Ok(v)
            }
        },
    );
    match wrong {
        Ok(w) => {
            let q = ask(
                "attribute_tf",
                rng,
                &[("Field", field), ("Referral", &r.text), ("Value", &w.value)],
            );
            let mut f = attribute_sample(scene_id, split, r, field, value, q, "no")
                .meta("format", json!("true_false"))
                .meta("distractor_value", json!(w.value));
            f.options = yes_no;
            out.push(f);
        }
        Err(e) => log::debug!("{scene_id}: no distractor for {} {field}: {e}", r.id),
    }
    out
}

/// Open-ended attribute question; always a train item.
pub fn gen_attribute_open(
    scene_id: &str,
    r: &Referred<'_>,
    field: &str,
    value: &str,
    rng: &mut ChaCha8Rng,
) -> Option<QaSample> {
    if value.trim().is_empty() || !attribute_referral_allowed(r) || leaks(&r.text, value) {
        return None;
    }
    let q = ask(
        "attribute_open",
        rng,
        &[("Field", field), ("Referral", &r.text)],
    );
    Some(
        attribute_sample(scene_id, Split::Train, r, field, value, q, value.trim())
            .meta("format", json!("open")),
    )
}

/// Grounding answer: object id and its 7-DOF box.
pub fn grounding_answer(id: ObjectId, obb: &Obb7) -> String {
    let c = obb.center;
    format!(
        "object {id}: center ({:.3}, {:.3}, {:.3}) m, size ({:.3}, {:.3}, {:.3}) m, yaw {:.4} rad",
        c.x,
        c.y,
        c.z,
        obb.length(),
        obb.width(),
        obb.height(),
        obb.yaw
    )
}

pub fn obb_json(obb: &Obb7) -> Value {
    json!({
        "center": [round6(obb.center.x), round6(obb.center.y), round6(obb.center.z)],
        "size": [round6(obb.length()), round6(obb.width()), round6(obb.height())],
        "yaw": round6(obb.yaw),
    })
}

pub fn gen_grounding(
    scene_id: &str,
    split: Split,
    r: &Referred<'_>,
    rng: &mut ChaCha8Rng,
) -> QaSample {
    let q = ask("visual_grounding", rng, &[("Referral", &r.text)]);
    let mut s = QaSample::new(
        scene_id,
        split,
        TaskKind::VisualGrounding,
        q,
        grounding_answer(r.id, &r.obb),
    );
    s.targets = vec![r.id];
    tag_referral(s, r).meta("obb", obb_json(&r.obb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCaption {
    pub frame_id: String,
    pub caption: String,
    pub pose: [[f64; 4]; 4],
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCaption {
    pub object_id: ObjectId,
    pub caption: String,
    /// Frames the caption was written from, best first.
    pub views: Vec<String>,
}

/// Oracle captions of one scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub scene: Option<String>,
    pub frames: Vec<FrameCaption>,
    pub objects: Vec<ObjectCaption>,
}

pub fn gen_captions(
    scene_id: &str,
    split: Split,
    captions: &CaptionSet,
    referrals: &BTreeMap<ObjectId, Referred<'_>>,
    rng: &mut ChaCha8Rng,
) -> Vec<QaSample> {
    let mut out = Vec::new();
    if let Some(c) = captions.scene.as_ref().filter(|c| !c.trim().is_empty()) {
        let q = ask("scene_caption", rng, &[]);
        out.push(QaSample::new(
            scene_id,
            split,
            TaskKind::SceneCaption,
            q,
            c.clone(),
        ));
    }
    for f in captions
        .frames
        .iter()
        .filter(|f| !f.caption.trim().is_empty())
    {
        let q = ask("view_caption", rng, &[]);
        out.push(
            QaSample::new(scene_id, split, TaskKind::ViewCaption, q, f.caption.clone())
                .meta("frame_id", json!(f.frame_id))
                .meta("pose", json!(f.pose))
                .meta("intrinsics", json!(f.intrinsics)),
        );
    }
    for c in captions
        .objects
        .iter()
        .filter(|c| !c.caption.trim().is_empty())
    {
        let Some(r) = referrals.get(&c.object_id) else {
            continue;
        };
        let q = ask("object_caption", rng, &[("Referral", &r.text)]);
        let mut s = QaSample::new(
            scene_id,
            split,
            TaskKind::ObjectCaption,
            q,
            c.caption.clone(),
        );
        s.targets = vec![c.object_id];
        out.push(tag_referral(s, r).meta("views", json!(c.views)));
    }
    out
}

/// One object as seen by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskObject {
    pub id: ObjectId,
    pub label: String,
    pub obb: Obb7,
    pub attributes: AppearanceAttributes,
}

/// Everything needed to generate one scene's samples.
pub struct SceneInputs<'a> {
    pub scene_id: &'a str,
    pub objects: &'a [TaskObject],
    pub referrals: &'a ReferralSet,
    pub label_graph: &'a LabelGraph,
    pub captions: &'a CaptionSet,
}

/// Question referral per object, chosen with a seeded draw among its
/// referrals. Objects without distractors are referred to by label.
fn choose_referrals<'a>(
    inputs: &SceneInputs<'a>,
    rng: &mut ChaCha8Rng,
    filter: impl Fn(Provenance) -> bool,
) -> BTreeMap<ObjectId, Referred<'a>> {
    let mut out = BTreeMap::new();
    for o in inputs.objects {
        let options: Vec<_> = inputs
            .referrals
            .for_object(o.id)
            .filter(|r| filter(r.provenance))
            .collect();
        let Some(r) = options.choose(rng) else {
            continue;
        };
        let text = match r.provenance {
            Provenance::Singleton => format!("the {}", o.label),
            _ => r.description.clone(),
        };
        out.insert(
            o.id,
            Referred {
                id: o.id,
                label: &o.label,
                obb: o.obb,
                text,
                provenance: r.provenance,
                anchors: r.anchors.clone(),
            },
        );
    }
    out
}

fn sample_pairs(n: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    pairs.shuffle(rng);
    pairs.truncate(budget);
    pairs
}

/// All candidate samples of one scene, before balancing. Sample ids are
/// `<scene>/<task>/<index>` in generation order.
pub fn generate_scene(
    inputs: &SceneInputs<'_>,
    config: &GenerationConfig,
    oracle: &OracleClient,
    seed: u64,
) -> Vec<QaSample> {
    let scene = inputs.scene_id;
    let split = config.split_of(scene);
    let stream = |task: &str| stream_rng(seed, &format!("{scene}/{task}"));
    let budget = config
        .per_scene_cap
        .saturating_mul(config.pair_budget_factor.max(1));
    let mut out: Vec<QaSample> = Vec::new();

    let mut rng = stream("referrals");
    let refs = choose_referrals(inputs, &mut rng, |_| true);
    let referred: Vec<&Referred<'_>> = refs.values().collect();

    let mut rng = stream("captions");
    out.extend(gen_captions(scene, split, inputs.captions, &refs, &mut rng));

    let mut rng = stream("grounding");
    out.extend(
        referred
            .iter()
            .map(|r| gen_grounding(scene, split, r, &mut rng)),
    );

    let mut rng = stream("size");
    out.extend(
        referred
            .iter()
            .map(|r| gen_object_size(scene, split, r, &mut rng)),
    );

    let mut rng = stream("absolute_distance");
    for (i, j) in sample_pairs(referred.len(), budget, &mut rng) {
        if let Some(s) = gen_absolute_distance(
            scene,
            split,
            referred[i],
            referred[j],
            config.distance_decimals,
            &mut rng,
        ) {
            out.push(s);
        }
    }

    let mut rng = stream("relative_distance");
    if referred.len() >= 3 {
        for _ in 0..budget {
            let picked: Vec<&&Referred<'_>> = referred.choose_multiple(&mut rng, 3).collect();
            let (t, a, b) = (picked[0], picked[1], picked[2]);
            let buffer = [t, a, b]
                .iter()
                .map(|r| r.obb.max_dimension())
                .fold(0.0, f64::max);
            if let Some(s) = gen_relative_distance(scene, split, t, a, b, buffer, &mut rng) {
                let key = (
                    s.targets[0],
                    s.targets[1].min(s.targets[2]),
                    s.targets[1].max(s.targets[2]),
                );
                let dup = out.iter().any(|o| {
                    o.task == TaskKind::RelativeDistance
                        && (
                            o.targets[0],
                            o.targets[1].min(o.targets[2]),
                            o.targets[1].max(o.targets[2]),
                        ) == key
                });
                if !dup {
                    out.push(s);
                }
            }
        }
    }

    if split == Split::Test {
        let mut rng = stream("object_count");
        let labels: Vec<(ObjectId, &str)> = inputs
            .objects
            .iter()
            .map(|o| (o.id, inputs.label_graph.canonical(&o.label)))
            .collect();
        let distinct: BTreeSet<&str> = labels.iter().map(|(_, l)| *l).collect();
        for l in distinct {
            out.extend(gen_object_count(
                scene,
                l,
                &labels,
                inputs.label_graph,
                &mut rng,
            ));
        }
    }

    let mut rng = stream("attribute_referrals");
    let attr_refs = choose_referrals(inputs, &mut rng, |p| {
        p == Provenance::Singleton || p.is_anchor()
    });
    let mut rng = stream("attribute");
    for o in inputs.objects {
        let Some(r) = attr_refs.get(&o.id) else {
            continue;
        };
        for (field, value) in o.attributes.present() {
            match split {
                Split::Test => out.extend(gen_attribute_tf(
                    scene, split, r, field, value, oracle, &mut rng,
                )),
                Split::Train => {
                    out.extend(gen_attribute_tf(
                        scene, split, r, field, value, oracle, &mut rng,
                    ));
                    out.extend(gen_attribute_open(scene, r, field, value, &mut rng));
                }
            }
        }
    }

    let mut counters: BTreeMap<TaskKind, usize> = BTreeMap::new();
    for s in &mut out {
        let n = counters.entry(s.task).or_default();
        s.sample_id = format!("{scene}/{}/{:04}", s.task, n);
        *n += 1;
    }
    out
}

/// Per-(scene, task) cap, then per-task quotas, then split rules. Output is
/// sorted by sample id.
pub fn balance_and_cap(
    samples: Vec<QaSample>,
    config: &GenerationConfig,
    seed: u64,
) -> Vec<QaSample> {
    let mut buckets: BTreeMap<(String, TaskKind), Vec<QaSample>> = BTreeMap::new();
    for s in samples {
        if s.task == TaskKind::ObjectCount && s.split == Split::Train {
            continue;
        }
        if s.split == Split::Test && s.metadata.get("format") == Some(&json!("open")) {
            continue;
        }
        buckets
            .entry((s.scene_id.clone(), s.task))
            .or_default()
            .push(s);
    }
    let mut by_task: BTreeMap<TaskKind, Vec<QaSample>> = BTreeMap::new();
    for ((scene, task), mut v) in buckets {
        v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if v.len() > config.per_scene_cap {
            let mut rng = stream_rng(seed, &format!("cap/{scene}/{task}"));
            v.shuffle(&mut rng);
            v.truncate(config.per_scene_cap);
        }
        by_task.entry(task).or_default().extend(v);
    }
    let mut out = Vec::new();
    for (task, mut v) in by_task {
        v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if let Some(&q) = config.quotas.get(&task) {
            if v.len() > q {
                let mut rng = stream_rng(seed, &format!("quota/{task}"));
                v.shuffle(&mut rng);
                v.truncate(q);
            }
        }
        out.extend(v);
    }
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    out
}

pub fn to_jsonl(samples: &[QaSample]) -> String {
    samples
        .iter()
        .map(|s| serde_json::to_string(s).expect("sample serializes") + "\n")
        .collect()
}

pub fn from_jsonl(text: &str) -> Result<Vec<QaSample>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_sha256: String,
    pub total: usize,
    pub counts: BTreeMap<TaskKind, BTreeMap<Split, usize>>,
    pub scenes: Vec<String>,
}

impl DatasetManifest {
    pub fn new(samples: &[QaSample], config_hash: &str, seed: u64) -> Self {
        let mut counts: BTreeMap<TaskKind, BTreeMap<Split, usize>> = BTreeMap::new();
        let mut scenes = BTreeSet::new();
        for s in samples {
            *counts
                .entry(s.task)
                .or_default()
                .entry(s.split)
                .or_default() += 1;
            scenes.insert(s.scene_id.clone());
        }
        Self {
            config_hash: config_hash.to_string(),
            seed,
            dataset_sha256: sha256_hex(to_jsonl(samples).as_bytes()),
            total: samples.len(),
            counts,
            scenes: scenes.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::oracle::{MockOracle, RetryPolicy};
    use rand::SeedableRng;
    use std::sync::Arc;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn referred(id: u32, label: &'static str, obb: Obb7, prov: Provenance) -> Referred<'static> {
        Referred {
            id: ObjectId(id),
            label,
            obb,
            text: format!("the {label}"),
            provenance: prov,
            anchors: vec![],
        }
    }

    fn cube(x: f64) -> Obb7 {
        Obb7::new(Point3::new(x, 0.0, 0.0), [1.0, 1.0, 1.0], 0.0).unwrap()
    }

    #[test]
    fn templates_cover_tasks() {
        let t = question_templates();
        for k in [
            "scene_caption",
            "view_caption",
            "object_caption",
            "visual_grounding",
            "object_size",
            "absolute_distance",
            "relative_distance",
            "object_count",
            "attribute_tf",
            "attribute_open",
        ] {
            assert!(!t[k].is_empty(), "{k}");
        }
    }

    #[test]
    fn size_answers() {
        let b = Obb7::new(Point3::new(0.0, 0.0, 0.0), [2.0, 1.0, 0.5], 0.0).unwrap();
        assert_eq!(size_answer(&b), "200 x 100 x 50 cm");
        let r = Obb7::new(Point3::new(0.0, 0.0, 0.0), [2.0, 1.0, 0.5], 1.0).unwrap();
        assert_eq!(size_answer(&r), size_answer(&b));
        let flat = Obb7::new(Point3::new(0.0, 0.0, 0.0), [2.0, 0.0, 0.5], 0.0).unwrap();
        assert_eq!(size_answer(&flat), "200 x 0 x 50 cm");
    }

    #[test]
    fn absolute_distance_items() {
        let a = referred(1, "box", cube(0.0), Provenance::Singleton);
        let b = referred(2, "crate", cube(3.0), Provenance::Singleton);
        let s = gen_absolute_distance("s", Split::Train, &a, &b, 2, &mut rng()).unwrap();
        assert_eq!(s.answer, "2.00 m");
        let c = referred(3, "bin", cube(0.5), Provenance::Singleton);
        assert!(gen_absolute_distance("s", Split::Train, &a, &c, 2, &mut rng()).is_none());
    }

    #[test]
    fn relative_distance_margin_and_letters() {
        let t = referred(1, "sofa", cube(0.0), Provenance::Singleton);
        let near = referred(2, "lamp", cube(2.0), Provenance::Singleton);
        let far = referred(3, "door", cube(4.0), Provenance::Singleton);
        let s = gen_relative_distance("s", Split::Train, &t, &near, &far, 0.5, &mut rng()).unwrap();
        let closer = &s.metadata["option_objects"][&s.answer];
        assert_eq!(closer, &json!(2));
        assert_eq!(s.options, vec!["A", "B"]);
        let swapped =
            gen_relative_distance("s", Split::Train, &t, &far, &near, 0.5, &mut rng()).unwrap();
        assert_eq!(
            &swapped.metadata["option_objects"][&swapped.answer],
            &json!(2)
        );
        let close = referred(4, "bin", cube(2.2), Provenance::Singleton);
        assert!(
            gen_relative_distance("s", Split::Train, &t, &near, &close, 0.5, &mut rng()).is_none()
        );
    }

    #[test]
    fn counting_uses_hyponyms() {
        let mut g = LabelGraph::default();
        g.add_edge("chair", "office chair");
        let objs = [
            (ObjectId(1), "office chair"),
            (ObjectId(2), "office chair"),
            (ObjectId(3), "chair"),
        ];
        let s = gen_object_count("s", "chair", &objs, &g, &mut rng()).unwrap();
        assert_eq!((s.answer.as_str(), s.split), ("3", Split::Test));
        assert!(gen_object_count("s", "table", &objs, &g, &mut rng()).is_none());
        assert_eq!(
            gen_object_count("s", "office chair", &objs[..1], &g, &mut rng())
                .unwrap()
                .answer,
            "1"
        );
    }

    #[test]
    fn attribute_true_false_pairs() {
        let o = OracleClient::rule_mock();
        let r = referred(1, "curtain", cube(0.0), Provenance::Singleton);
        let v = gen_attribute_tf("s", Split::Test, &r, "color", "white", &o, &mut rng());
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].answer, "yes");
        assert_eq!(v[1].answer, "no");
        assert_eq!(v[1].metadata["distractor_value"], json!("blue"));
        let tv = referred(2, "tv", cube(0.0), Provenance::Singleton);
        let v = gen_attribute_tf("s", Split::Test, &tv, "shape", "flat", &o, &mut rng());
        assert_eq!(v[1].metadata["distractor_value"], json!("curved"));
    }

    #[test]
    fn distractor_equal_to_truth_is_retried() {
        let echo = OracleClient::new(
            Arc::new(MockOracle::new().with_fallback(|_| Some("White".into()))),
            RetryPolicy::default(),
            1,
        );
        let r = referred(1, "curtain", cube(0.0), Provenance::Singleton);
        let v = gen_attribute_tf("s", Split::Test, &r, "color", "white", &echo, &mut rng());
        assert_eq!(v.len(), 1);
        assert_eq!(echo.call_count(), 3);
    }

    #[test]
    fn attribute_guards() {
        let o = OracleClient::rule_mock();
        let comp = referred(1, "chair", cube(0.0), Provenance::Comparative);
        assert!(
            gen_attribute_tf("s", Split::Train, &comp, "color", "red", &o, &mut rng()).is_empty()
        );
        let mut leaky = referred(1, "chair", cube(0.0), Provenance::AnchorObject);
        leaky.text = "the red chair closest to the door".into();
        assert!(
            gen_attribute_tf("s", Split::Train, &leaky, "color", "red", &o, &mut rng()).is_empty()
        );
        assert!(leaks("the light-colored pillow", "light-colored"));
        assert!(!leaks("the reddish chair", "red"));
    }

    #[test]
    fn open_attribute_is_train_only() {
        let r = referred(1, "door", cube(0.0), Provenance::Singleton);
        let s = gen_attribute_open("s", &r, "material", "wooden", &mut rng()).unwrap();
        assert_eq!((s.answer.as_str(), s.split), ("wooden", Split::Train));
        assert!(gen_attribute_open("s", &r, "material", "", &mut rng()).is_none());
    }

    #[test]
    fn grounding_records_anchors() {
        let mut r = referred(1, "chair", cube(0.0), Provenance::AnchorObject);
        r.anchors = vec![ObjectId(7)];
        let s = gen_grounding("s", Split::Train, &r, &mut rng());
        assert!(s.answer.starts_with("object 1:"));
        assert_eq!(s.metadata["anchors"], json!([7]));
    }

    #[test]
    fn captions_pass_through() {
        let caps = CaptionSet {
            scene: Some("A bedroom.".into()),
            frames: vec![FrameCaption {
                frame_id: "f0".into(),
                caption: String::new(),
                pose: [[0.0; 4]; 4],
                intrinsics: Intrinsics {
                    fx: 1.0,
                    fy: 1.0,
                    cx: 0.0,
                    cy: 0.0,
                },
            }],
            objects: vec![ObjectCaption {
                object_id: ObjectId(1),
                caption: "A red chair.".into(),
                views: vec!["f0".into(), "f1".into()],
            }],
        };
        let refs = BTreeMap::from([(
            ObjectId(1),
            referred(1, "chair", cube(0.0), Provenance::Singleton),
        )]);
        let v = gen_captions("s", Split::Train, &caps, &refs, &mut rng());
        let tasks: Vec<TaskKind> = v.iter().map(|s| s.task).collect();
        assert_eq!(tasks, vec![TaskKind::SceneCaption, TaskKind::ObjectCaption]);
    }

    fn dummy(scene: &str, task: TaskKind, i: usize, split: Split) -> QaSample {
        let mut s = QaSample::new(scene, split, task, "q".into(), "a".into());
        s.sample_id = format!("{scene}/{task}/{i:04}");
        s
    }

    #[test]
    fn balancing() {
        let samples: Vec<QaSample> = (0..100)
            .map(|i| dummy("s", TaskKind::ObjectSize, i, Split::Train))
            .collect();
        let cfg = GenerationConfig {
            per_scene_cap: 10,
            ..Default::default()
        };
        let a = balance_and_cap(samples.clone(), &cfg, 3);
        assert_eq!(a.len(), 10);
        assert_eq!(a, balance_and_cap(samples.clone(), &cfg, 3));
        let cfg = GenerationConfig {
            per_scene_cap: 1000,
            quotas: BTreeMap::from([(TaskKind::ObjectSize, 500)]),
            ..Default::default()
        };
        assert_eq!(balance_and_cap(samples, &cfg, 3).len(), 100);
        let mixed = vec![
            dummy("s", TaskKind::ObjectCount, 0, Split::Train),
            dummy("s", TaskKind::ObjectCount, 1, Split::Test),
        ];
        assert_eq!(
            balance_and_cap(mixed, &GenerationConfig::default(), 0).len(),
            1
        );
    }

    #[test]
    fn sample_field_order_is_stable() {
        let s = dummy("s", TaskKind::ObjectSize, 0, Split::Train);
        assert_eq!(
            serde_json::to_string(&s).unwrap(),
            r#"{"sample_id":"s/object_size/0000","scene_id":"s","split":"train","task":"object_size","question":"q","answer":"a"}"#
        );
    }
}
