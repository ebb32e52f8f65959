//! Binary spatial relations between object boxes.
//!
//! The rule stage records vertical support and horizontal contact only; the
//! correction stage asks a vision oracle to confirm each rule triple and, on
//! disagreement, re-derives the predicate from its free-text description.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{footprints_overlap, obb_distance, z_overlap, Obb7};
use crate::imaging::VisibilityTable;
use crate::oracle::{bindings, contains_view_word, ImageRef, OracleClient};
use crate::util::map_bounded;
use crate::ObjectId;

pub const ON_TOP_OF: &str = "on top of";
pub const BENEATH: &str = "beneath";
pub const NEXT_TO: &str = "next to";

pub const DEFAULT_PREDICATES: [&str; 7] = [
    ON_TOP_OF,
    BENEATH,
    NEXT_TO,
    "inside",
    "hanging from",
    "attached to",
    "leaning against",
];

/// Phrase → predicate table used when matching free text.
const SYNONYMS: &[(&str, &str)] = &[
    ("on", ON_TOP_OF),
    ("atop", ON_TOP_OF),
    ("on top of", ON_TOP_OF),
    ("resting on", ON_TOP_OF),
    ("sitting on", ON_TOP_OF),
    ("lying on", ON_TOP_OF),
    ("placed on", ON_TOP_OF),
    ("standing on", ON_TOP_OF),
    ("under", BENEATH),
    ("underneath", BENEATH),
    ("below", BENEATH),
    ("beneath", BENEATH),
    ("next to", NEXT_TO),
    ("beside", NEXT_TO),
    ("near", NEXT_TO),
    ("adjacent to", NEXT_TO),
    ("close to", NEXT_TO),
    ("alongside", NEXT_TO),
    ("in", "inside"),
    ("within", "inside"),
    ("inside", "inside"),
    ("inside of", "inside"),
    ("hanging from", "hanging from"),
    ("hanging on", "hanging from"),
    ("hung from", "hanging from"),
    ("suspended from", "hanging from"),
    ("attached to", "attached to"),
    ("mounted on", "attached to"),
    ("fixed to", "attached to"),
    ("affixed to", "attached to"),
    ("leaning against", "leaning against"),
    ("leaning on", "leaning against"),
    ("propped against", "leaning against"),
];

#[derive(Debug, Error, PartialEq)]
pub enum SceneGraphError {
    #[error("predicate {0:?} depends on the viewpoint")]
    ViewDependent(String),
    #[error("empty relation vocabulary")]
    EmptyVocabulary,
    #[error("malformed triple on line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn normalize_phrase(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// First relation phrase in `text` (longest match at the earliest position),
/// mapped to its default predicate.
pub fn find_relation_phrase(text: &str) -> Option<&'static str> {
    let norm = normalize_phrase(text);
    let tokens: Vec<&str> = norm.split(' ').collect();
    for start in 0..tokens.len() {
        let best = SYNONYMS
            .iter()
            .filter(|(phrase, _)| {
                let p: Vec<&str> = phrase.split(' ').collect();
                tokens[start..].starts_with(&p)
            })
            .max_by_key(|(phrase, _)| phrase.len());
        if let Some((_, pred)) = best {
            return Some(pred);
        }
    }
    None
}

/// Ordered view-independent predicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocabulary {
    predicates: Vec<String>,
}

impl Default for RelationVocabulary {
    fn default() -> Self {
        Self {
            predicates: DEFAULT_PREDICATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RelationVocabulary {
    pub fn new(predicates: Vec<String>) -> Result<Self, SceneGraphError> {
        if predicates.is_empty() {
            return Err(SceneGraphError::EmptyVocabulary);
        }
        let mut out = Vec::new();
        for p in predicates {
            if contains_view_word(&p) {
                return Err(SceneGraphError::ViewDependent(p));
            }
            let p = normalize_phrase(&p);
            if !out.contains(&p) {
                out.push(p);
            }
        }
        Ok(Self { predicates: out })
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn contains(&self, predicate: &str) -> bool {
        self.predicates.iter().any(|p| p == predicate)
    }

    /// Bracketed list used in prompts.
    pub fn render(&self) -> String {
        format!("[{}]", self.predicates.join(", "))
    }

    /// Exact match after normalization, then the synonym table. Leading
    /// "is"/"are" copulas are ignored.
    pub fn match_predicate(&self, phrase: &str) -> Option<String> {
        let mut norm = normalize_phrase(phrase);
        for copula in ["is ", "are "] {
            if let Some(rest) = norm.strip_prefix(copula) {
                norm = rest.to_string();
            }
        }
        if self.contains(&norm) {
            return Some(norm);
        }
        SYNONYMS
            .iter()
            .find(|(s, _)| *s == norm)
            .map(|(_, p)| p.to_string())
            .filter(|p| self.contains(p))
    }
}

/// Predicate as seen from the object's side of a triple.
pub fn inverse_predicate(predicate: &str) -> String {
    match predicate {
        ON_TOP_OF => BENEATH.into(),
        BENEATH => ON_TOP_OF.into(),
        "inside" => "containing".into(),
        "hanging from" => "holding".into(),
        "leaning against" => "supporting".into(),
        other => other.into(),
    }
}

fn is_symmetric(predicate: &str) -> bool {
    matches!(predicate, NEXT_TO | "attached to")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSource {
    Rule,
    Corrected,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTriple {
    pub subject: ObjectId,
    pub predicate: String,
    pub object: ObjectId,
    pub source: RelationSource,
}

impl RelationTriple {
    pub fn new(
        subject: ObjectId,
        predicate: &str,
        object: ObjectId,
        source: RelationSource,
    ) -> Self {
        Self {
            subject,
            predicate: predicate.to_string(),
            object,
            source,
        }
    }

    fn key(&self) -> (ObjectId, &str, ObjectId) {
        (self.subject, self.predicate.as_str(), self.object)
    }
}

/// Triples unique by (subject, predicate, object), kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    triples: Vec<RelationTriple>,
}

impl SceneGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn triples(&self) -> &[RelationTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Inserts a triple; returns false for self relations and duplicates.
    pub fn insert(&mut self, t: RelationTriple) -> bool {
        if t.subject == t.object {
            return false;
        }
        match self.triples.binary_search_by(|x| x.key().cmp(&t.key())) {
            Ok(_) => false,
            Err(pos) => {
                self.triples.insert(pos, t);
                true
            }
        }
    }

    /// Adds `subject predicate object` in stored form: vertical relations as
    /// an inverse pair, symmetric ones with the smaller id first.
    pub fn relate(
        &mut self,
        subject: ObjectId,
        predicate: &str,
        object: ObjectId,
        source: RelationSource,
    ) {
        match predicate {
            ON_TOP_OF | BENEATH => {
                let (top, bottom) = if predicate == ON_TOP_OF {
                    (subject, object)
                } else {
                    (object, subject)
                };
                self.insert(RelationTriple::new(top, ON_TOP_OF, bottom, source));
                self.insert(RelationTriple::new(bottom, BENEATH, top, source));
            }
            p if is_symmetric(p) => {
                let (a, b) = (subject.min(object), subject.max(object));
                self.insert(RelationTriple::new(a, p, b, source));
            }
            p => {
                self.insert(RelationTriple::new(subject, p, object, source));
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.triples
            .iter()
            .map(|t| serde_json::to_string(t).expect("triple serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, SceneGraphError> {
        let mut g = SceneGraph::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: RelationTriple =
                serde_json::from_str(line).map_err(|e| SceneGraphError::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            g.insert(t);
        }
        Ok(g)
    }
}

/// Rule-stage thresholds in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RelationParams {
    /// Largest allowed interpenetration for support.
    pub support_below: f64,
    /// Largest allowed vertical gap for support.
    pub support_above: f64,
    /// Largest box distance for horizontal contact.
    pub contact: f64,
}

impl Default for RelationParams {
    fn default() -> Self {
        Self {
            support_below: 0.02,
            support_above: 0.05,
            contact: 0.10,
        }
    }
}

fn supports(top: &Obb7, bottom: &Obb7, p: &RelationParams) -> bool {
    let gap = top.z_min() - bottom.z_max();
    top.center.z > bottom.center.z
        && gap >= -p.support_below
        && gap <= p.support_above
        && footprints_overlap(top, bottom)
}

/// Rule-stage relations over all object pairs.
pub fn build_initial_graph(objects: &[(ObjectId, Obb7)], params: &RelationParams) -> SceneGraph {
    let mut g = SceneGraph::new();
    for (i, (ia, a)) in objects.iter().enumerate() {
        for (ib, b) in &objects[i + 1..] {
            if supports(a, b, params) {
                g.relate(*ia, ON_TOP_OF, *ib, RelationSource::Rule);
            } else if supports(b, a, params) {
                g.relate(*ib, ON_TOP_OF, *ia, RelationSource::Rule);
            } else if z_overlap(a, b) && obb_distance(a, b) <= params.contact {
                g.relate(*ia, NEXT_TO, *ib, RelationSource::Rule);
            }
        }
    }
    g
}

/// Frame maximizing the smaller of the two objects' visible ratios.
pub fn select_covisible_frame(
    a: ObjectId,
    b: ObjectId,
    visibility: &VisibilityTable,
) -> Option<String> {
    let mut best: Option<(f64, &String)> = None;
    for (frame, ratios) in visibility {
        let ra = ratios.get(&a).copied().unwrap_or(0.0);
        let rb = ratios.get(&b).copied().unwrap_or(0.0);
        let m = ra.min(rb);
        if m > 0.0 && best.map_or(true, |(s, _)| m > s) {
            best = Some((m, frame));
        }
    }
    best.map(|(_, f)| f.clone())
}

/// Relations incident to `id` as `(predicate, other)`, read from its side.
pub fn object_subgraph(graph: &SceneGraph, id: ObjectId) -> BTreeSet<(String, ObjectId)> {
    let mut out = BTreeSet::new();
    for t in graph.triples() {
        if t.subject == id {
            out.insert((t.predicate.clone(), t.object));
        } else if t.object == id {
            out.insert((inverse_predicate(&t.predicate), t.subject));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Replace(String),
    Drop(String),
    /// Oracle failure; the triple stays and is reported.
    Failed(String),
    /// No frame shows both objects.
    Unverified,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub verified: usize,
    pub kept: usize,
    pub replaced: usize,
    pub dropped: usize,
    pub unverified: usize,
    pub failed: Vec<(ObjectId, String, ObjectId, String)>,
}

/// Oracles and context for the correction stage.
pub struct Corrector<'a> {
    pub mllm: &'a OracleClient,
    pub llm: &'a OracleClient,
    pub vocabulary: &'a RelationVocabulary,
    pub labels: &'a BTreeMap<ObjectId, String>,
    pub visibility: &'a VisibilityTable,
    /// Image of `frame` with both boxes drawn.
    pub render: &'a (dyn Fn(&str, ObjectId, ObjectId) -> Option<ImageRef> + Sync),
    pub concurrency: usize,
}

impl Corrector<'_> {
    fn label(&self, id: ObjectId) -> &str {
        self.labels.get(&id).map(String::as_str).unwrap_or("object")
    }

    /// Verifies one `subject predicate object` statement.
    pub fn judge(&self, subject: ObjectId, predicate: &str, object: ObjectId) -> Verdict {
        let Some(frame) = select_covisible_frame(subject, object, self.visibility) else {
            return Verdict::Unverified;
        };
        let Some(image) = (self.render)(&frame, subject, object) else {
            return Verdict::Unverified;
        };
        let (la, lb) = (self.label(subject), self.label(object));
        let vocab = self.vocabulary.render();
        let judged = self.mllm.ask(
            "relation_judgment",
            bindings([
                ("ObjectA", la),
                ("Relation", predicate),
                ("ObjectB", lb),
                ("Predefined Relations", &vocab),
            ]),
            vec![image],
            |t| match crate::oracle::validate_yes_no(t) {
                crate::oracle::YesNo::Malformed => Err(format!("expected Yes/No, got {t:?}")),
                v => Ok(v),
            },
        );
        let description = match judged {
            Err(e) => return Verdict::Failed(e.to_string()),
            Ok(r) if r.value == crate::oracle::YesNo::Yes => return Verdict::Keep,
            Ok(r) => r.text,
        };
        let extracted = self.llm.ask(
            "relation_extraction",
            bindings([
                ("ObjectA", la),
                ("ObjectB", lb),
                (
                    "the corrected description of object relations",
                    &description,
                ),
            ]),
            vec![],
            |t| {
                let t = t.trim();
                if t.is_empty() {
                    Err("empty extraction".to_string())
                } else {
                    Ok(t.to_string())
                }
            },
        );
        let phrase = match extracted {
            Err(e) => return Verdict::Failed(e.to_string()),
            Ok(r) => r.value,
        };
        if contains_view_word(&phrase) {
            return Verdict::Drop(format!("view-dependent phrase {phrase:?}"));
        }
        match self.vocabulary.match_predicate(&phrase) {
            Some(p) if p == predicate => Verdict::Keep,
            Some(p) => Verdict::Replace(p),
            None => Verdict::Drop(format!("unmatched phrase {phrase:?}")),
        }
    }

    /// Verifies every rule triple. Inverse pairs are judged once, through
    /// their "on top of" member.
    pub fn correct(&self, graph: &SceneGraph) -> (SceneGraph, CorrectionReport) {
        let statements: Vec<&RelationTriple> = graph
            .triples()
            .iter()
            .filter(|t| {
                t.predicate != BENEATH
                    || !graph.triples().iter().any(|o| {
                        o.predicate == ON_TOP_OF && o.subject == t.object && o.object == t.subject
                    })
            })
            .collect();
        let verdicts = map_bounded(&statements, self.concurrency, |t| {
            if t.source == RelationSource::Rule {
                self.judge(t.subject, &t.predicate, t.object)
            } else {
                Verdict::Keep
            }
        });
        let mut out = SceneGraph::new();
        let mut report = CorrectionReport::default();
        for (t, v) in statements.into_iter().zip(verdicts) {
            if !matches!(v, Verdict::Unverified) {
                report.verified += 1;
            }
            match v {
                Verdict::Keep => {
                    report.kept += 1;
                    out.relate(t.subject, &t.predicate, t.object, t.source);
                }
                Verdict::Unverified => {
                    report.unverified += 1;
                    out.relate(t.subject, &t.predicate, t.object, t.source);
                }
                Verdict::Failed(why) => {
                    log::warn!(
                        "relation {} {} {} kept: {why}",
                        t.subject,
                        t.predicate,
                        t.object
                    );
                    report
                        .failed
                        .push((t.subject, t.predicate.clone(), t.object, why));
                    out.relate(t.subject, &t.predicate, t.object, t.source);
                }
                Verdict::Replace(p) => {
                    report.replaced += 1;
                    out.relate(t.subject, &p, t.object, RelationSource::Corrected);
                }
                Verdict::Drop(why) => {
                    log::debug!(
                        "relation {} {} {} dropped: {why}",
                        t.subject,
                        t.predicate,
                        t.object
                    );
                    report.dropped += 1;
                }
            }
        }
        (out, report)
    }
}
