//! Discriminative object referring.
//!
//! Members of a distractor group are described by conjunctions of descriptor
//! keys (appearance, size, relations) whose extensions intersect to exactly
//! one member. Spatial anchoring adds descriptors relative to an anchor object
//! or to a sight line between two already-described objects.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{obb_distance, obb_volume, signed_angle, Obb7};
use crate::label_graph::DistractorGroup;
use crate::oracle::{bindings, contains_view_word, OracleClient, OracleError};
use crate::scene_graph::{object_subgraph, SceneGraph};
use crate::util::{map_bounded, stream_rng};
use crate::ObjectId;

pub const DEFAULT_SIZE_TAU: f64 = 0.25;
pub const DEFAULT_SUBSET_CAP: usize = 3;
pub const RELATION_PROXIMITY: f64 = 0.5;
pub const ANCHOR_MIN_DISTANCE: f64 = 0.5;
pub const SIGHT_MIN_SEPARATION: f64 = 0.5;
pub const SIGHT_MARGIN_DEG: f64 = 10.0;

pub const LARGEST: &str = "largest";
pub const NOT_LARGEST: &str = "not-largest";
pub const SMALLEST: &str = "smallest";
pub const NOT_SMALLEST: &str = "not-smallest";

/// Marker for an absent attribute in tables.
pub const ABSENT: &str = "--";

#[derive(Debug, Error, PartialEq)]
pub enum ReferringError {
    #[error("object {0} has neither caption nor label")]
    Undescribable(ObjectId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct AppearanceAttributes {
    pub color: Option<String>,
    pub material: Option<String>,
    pub shape: Option<String>,
    pub condition: Option<String>,
}

impl AppearanceAttributes {
    pub const FIELDS: [&'static str; 4] = ["color", "material", "shape", "condition"];

    pub fn get(&self, field: &str) -> Option<&str> {
        match field {
            "color" => self.color.as_deref(),
            "material" => self.material.as_deref(),
            "shape" => self.shape.as_deref(),
            "condition" => self.condition.as_deref(),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        Self::FIELDS.iter().all(|f| self.get(f).is_none())
    }

    /// Non-empty values with their field names.
    pub fn present(&self) -> Vec<(&'static str, &str)> {
        Self::FIELDS
            .iter()
            .filter_map(|f| {
                self.get(f)
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| (*f, v))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Appearance,
    Size,
    Relation,
    AnchorObject,
    AnchorSight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub text: String,
    pub extension: BTreeSet<ObjectId>,
    /// Reference objects for anchored descriptors.
    pub anchors: Vec<ObjectId>,
}

/// Descriptor key → member extension.
pub type DescriptorMap = BTreeMap<String, BTreeSet<ObjectId>>;

/// Descriptor map with the kind of each key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergedDescriptors {
    pub map: DescriptorMap,
    pub kinds: BTreeMap<String, DescriptorKind>,
}

impl MergedDescriptors {
    /// Adds entries; a key seen twice keeps the union of its extensions.
    pub fn merge(&mut self, kind: DescriptorKind, map: DescriptorMap) {
        for (k, ext) in map {
            self.kinds.entry(k.clone()).or_insert(kind);
            self.map.entry(k).or_default().extend(ext);
        }
    }
}

/// Keeps entries that describe some but not all `members`.
fn discriminating(map: DescriptorMap, members: &BTreeSet<ObjectId>) -> DescriptorMap {
    map.into_iter()
        .map(|(k, ext)| {
            (
                k,
                ext.intersection(members).copied().collect::<BTreeSet<_>>(),
            )
        })
        .filter(|(k, ext)| !k.trim().is_empty() && !ext.is_empty() && ext.len() < members.len())
        .collect()
}

// ---------------------------------------------------------------------------
// Appearance

const APPEARANCE_EXAMPLES: &str = r#"| id | color | material | shape | condition |
|---|---|---|---|---|
| 3 | white | wooden | -- | -- |
| 8 | brown | wooden | -- | worn |
| 9 | white | -- | round | -- |
Answer: {"white": [3, 9], "brown": [8], "worn": [8], "round": [9]}"#;

/// Markdown attribute table for the appearance prompt.
pub fn attribute_table(members: &[(ObjectId, &AppearanceAttributes)]) -> String {
    let mut out =
        String::from("| id | color | material | shape | condition |\n|---|---|---|---|---|\n");
    for (id, a) in members {
        let cells: Vec<String> = AppearanceAttributes::FIELDS
            .iter()
            .map(|f| {
                a.get(f)
                    .map(|v| v.trim().to_lowercase())
                    .filter(|v| !v.is_empty())
                    .unwrap_or_else(|| ABSENT.to_string())
            })
            .collect();
        out.push_str(&format!("| {id} | {} |\n", cells.join(" | ")));
    }
    out
}

/// Parses a `{phrase: [ids]}` reply, tolerating surrounding prose or fences.
pub fn parse_grouping(text: &str) -> Result<DescriptorMap, String> {
    let start = text.find('{').ok_or("no JSON object in reply")?;
    let end = text.rfind('}').ok_or("no JSON object in reply")?;
    if end < start {
        return Err("no JSON object in reply".into());
    }
    let raw: BTreeMap<String, Vec<u32>> =
        serde_json::from_str(&text[start..=end]).map_err(|e| e.to_string())?;
    let mut out = DescriptorMap::new();
    for (k, ids) in raw {
        let key = k.trim().to_lowercase();
        if key.is_empty() || contains_view_word(&key) {
            continue;
        }
        out.entry(key)
            .or_default()
            .extend(ids.into_iter().map(ObjectId));
    }
    Ok(out)
}

/// Appearance descriptors for a group, from the oracle's grouping of the
/// attribute table. Groups without any attribute make no call.
pub fn group_by_appearance(
    group_label: &str,
    members: &[(ObjectId, &AppearanceAttributes)],
    oracle: &OracleClient,
) -> Result<DescriptorMap, OracleError> {
    if members.len() < 2 || members.iter().all(|(_, a)| a.is_empty()) {
        return Ok(DescriptorMap::new());
    }
    let table = attribute_table(members);
    let reply = oracle.ask(
        "appearance_grouping",
        bindings([
            ("GroupLabel", group_label),
            ("AttributeTable", table.trim_end()),
            ("Examples", APPEARANCE_EXAMPLES),
        ]),
        vec![],
        parse_grouping,
    )?;
    let ids: BTreeSet<ObjectId> = members.iter().map(|(id, _)| *id).collect();
    Ok(discriminating(reply.value, &ids))
}

// ---------------------------------------------------------------------------
// Size

/// `largest`/`smallest` for extremes separated by a relative volume margin
/// `tau`, with `not-largest`/`not-smallest` for the rest.
pub fn group_by_size(members: &[(ObjectId, Obb7)], tau: f64) -> DescriptorMap {
    let mut out = DescriptorMap::new();
    if members.len() < 2 {
        return out;
    }
    let mut vols: Vec<(f64, ObjectId)> =
        members.iter().map(|(id, b)| (obb_volume(b), *id)).collect();
    vols.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let n = vols.len();
    let all: BTreeSet<ObjectId> = vols.iter().map(|(_, id)| *id).collect();
    let mut assign = |extreme: ObjectId, key: &str, not_key: &str| {
        out.insert(key.to_string(), BTreeSet::from([extreme]));
        let mut rest = all.clone();
        rest.remove(&extreme);
        out.insert(not_key.to_string(), rest);
    };
    if vols[0].0 >= (1.0 + tau) * vols[1].0 {
        assign(vols[0].1, LARGEST, NOT_LARGEST);
    }
    if vols[n - 2].0 >= (1.0 + tau) * vols[n - 1].0 {
        assign(vols[n - 1].1, SMALLEST, NOT_SMALLEST);
    }
    out
}

// ---------------------------------------------------------------------------
// Relations

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Members linked by chains of box distances within `radius`.
pub fn proximity_clusters(members: &[(ObjectId, Obb7)], radius: f64) -> Vec<BTreeSet<ObjectId>> {
    let n = members.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if obb_distance(&members[i].1, &members[j].1) <= radius {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut clusters: BTreeMap<usize, BTreeSet<ObjectId>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        clusters.entry(r).or_default().insert(members[i].0);
    }
    clusters.into_values().collect()
}

/// Scene context for relation descriptors.
pub struct RelationContext<'a> {
    pub graph: &'a SceneGraph,
    pub labels: &'a BTreeMap<ObjectId, String>,
    pub boxes: &'a BTreeMap<ObjectId, Obb7>,
}

impl RelationContext<'_> {
    fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut c = BTreeMap::new();
        for l in self.labels.values() {
            *c.entry(l.as_str()).or_default() += 1;
        }
        c
    }
}

/// One distinctive relation per member, with the member's proximity cluster
/// as its extension.
pub fn group_by_relations(
    members: &[(ObjectId, Obb7)],
    ctx: &RelationContext<'_>,
    radius: f64,
) -> DescriptorMap {
    let mut out = DescriptorMap::new();
    if members.len() < 2 {
        return out;
    }
    let counts = ctx.label_counts();
    // (text, predicate, related) per member, unique-label relations only.
    let entries: BTreeMap<ObjectId, Vec<(String, String, ObjectId)>> = members
        .iter()
        .map(|(id, _)| {
            let rels = object_subgraph(ctx.graph, *id)
                .into_iter()
                .filter_map(|(pred, other)| {
                    let label = ctx.labels.get(&other)?;
                    (counts.get(label.as_str()) == Some(&1))
                        .then(|| (format!("{pred} the {label}"), pred, other))
                })
                .collect();
            (*id, rels)
        })
        .collect();
    let clusters = proximity_clusters(members, radius);
    let cluster_texts: Vec<BTreeSet<&str>> = clusters
        .iter()
        .map(|c| {
            c.iter()
                .flat_map(|id| entries[id].iter().map(|(t, _, _)| t.as_str()))
                .collect()
        })
        .collect();
    let boxes: BTreeMap<ObjectId, Obb7> = members.iter().copied().collect();
    for (ci, cluster) in clusters.iter().enumerate() {
        let elsewhere: BTreeSet<&str> = cluster_texts
            .iter()
            .enumerate()
            .filter(|(cj, _)| *cj != ci)
            .flat_map(|(_, t)| t.iter().copied())
            .collect();
        for id in cluster {
            let own = &boxes[id];
            let pick = entries[id]
                .iter()
                .filter(|(t, _, _)| !elsewhere.contains(t.as_str()))
                .map(|(t, pred, other)| {
                    let d = ctx
                        .boxes
                        .get(other)
                        .map_or(f64::INFINITY, |b| obb_distance(own, b));
                    (pred, d, *other, t)
                })
                .min_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
            if let Some((_, _, _, text)) = pick {
                out.entry(text.clone())
                    .or_default()
                    .extend(cluster.iter().copied());
            }
        }
    }
    let all: BTreeSet<ObjectId> = members.iter().map(|(id, _)| *id).collect();
    discriminating(out, &all)
}

// ---------------------------------------------------------------------------
// Comparative disambiguation

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Minimal exclusive key sets per member, by increasing size up to `cap`.
/// Each set is sorted; members without any set map to an empty list.
pub fn comparative_disambiguation(
    members: &BTreeSet<ObjectId>,
    descriptors: &DescriptorMap,
    cap: usize,
) -> BTreeMap<ObjectId, Vec<Vec<String>>> {
    let keys: Vec<&String> = descriptors.keys().collect();
    let exts: Vec<&BTreeSet<ObjectId>> = descriptors.values().collect();
    let mut out: BTreeMap<ObjectId, Vec<Vec<usize>>> =
        members.iter().map(|m| (*m, Vec::new())).collect();
    for k in 1..=cap.min(keys.len()) {
        combinations(keys.len(), k, &mut |subset| {
            let mut u: BTreeSet<ObjectId> = members.clone();
            for &i in subset {
                u.retain(|m| exts[i].contains(m));
                if u.is_empty() {
                    return;
                }
            }
            if u.len() != 1 {
                return;
            }
            let target = *u.iter().next().expect("one element");
            let found = out.get_mut(&target).expect("target is a member");
            if !found.iter().any(|s| s.iter().all(|i| subset.contains(i))) {
                found.push(subset.to_vec());
            }
        });
    }
    out.into_iter()
        .map(|(m, sets)| {
            let sets = sets
                .into_iter()
                .map(|s| s.into_iter().map(|i| keys[i].clone()).collect())
                .collect();
            (m, sets)
        })
        .collect()
}

/// Comma-joined key list.
pub fn join_keys(keys: &[String]) -> String {
    keys.join(", ")
}

// ---------------------------------------------------------------------------
// Spatial anchoring

/// Closest and farthest members when separated from the runner-up by
/// `buffer`. Needs at least two entries.
pub fn closest_farthest(
    distances: &[(ObjectId, f64)],
    buffer: f64,
) -> (Option<ObjectId>, Option<ObjectId>) {
    if distances.len() < 2 {
        return (None, None);
    }
    let mut d = distances.to_vec();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let n = d.len();
    let closest = (d[0].1 + buffer <= d[1].1).then_some(d[0].0);
    let farthest = (d[n - 1].1 >= d[n - 2].1 + buffer).then_some(d[n - 1].0);
    (closest, farthest)
}

/// Leftmost (largest positive angle) and rightmost (most negative angle)
/// members when separated from the runner-up by `margin` radians.
pub fn leftmost_rightmost(
    angles: &[(ObjectId, f64)],
    margin: f64,
) -> (Option<ObjectId>, Option<ObjectId>) {
    if angles.len() < 2 {
        return (None, None);
    }
    let mut a = angles.to_vec();
    a.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let n = a.len();
    let left = (a[n - 1].1 > 0.0 && a[n - 1].1 >= a[n - 2].1 + margin).then_some(a[n - 1].0);
    let right = (a[0].1 < 0.0 && a[0].1 <= a[1].1 - margin).then_some(a[0].0);
    (left, right)
}

/// An already-described object usable as a spatial reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorCandidate {
    pub id: ObjectId,
    pub obb: Obb7,
    /// Noun phrase referring to it, e.g. "the white chair".
    pub referral: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorParams {
    pub min_distance: f64,
    pub sight_min_separation: f64,
    pub sight_margin_deg: f64,
    pub max_anchors: usize,
    pub max_sights: usize,
}

impl Default for AnchorParams {
    fn default() -> Self {
        Self {
            min_distance: ANCHOR_MIN_DISTANCE,
            sight_min_separation: SIGHT_MIN_SEPARATION,
            sight_margin_deg: SIGHT_MARGIN_DEG,
            max_anchors: 3,
            max_sights: 3,
        }
    }
}

/// Largest box dimension in the group.
pub fn group_buffer(members: &[(ObjectId, Obb7)]) -> f64 {
    members
        .iter()
        .map(|(_, b)| b.max_dimension())
        .fold(0.0, f64::max)
}

/// "closest to"/"farthest from" descriptors for up to `max_anchors` sampled
/// anchors lying at least `min_distance` from every member.
pub fn anchor_object_descriptors(
    members: &[(ObjectId, Obb7)],
    candidates: &[AnchorCandidate],
    params: &AnchorParams,
    rng: &mut ChaCha8Rng,
) -> Vec<Descriptor> {
    let ids: BTreeSet<ObjectId> = members.iter().map(|(id, _)| *id).collect();
    let eligible: Vec<(&AnchorCandidate, Vec<(ObjectId, f64)>)> = candidates
        .iter()
        .filter(|c| !ids.contains(&c.id))
        .map(|c| {
            let d = members
                .iter()
                .map(|(id, b)| (*id, obb_distance(b, &c.obb)))
                .collect::<Vec<_>>();
            (c, d)
        })
        .filter(|(_, d)| d.iter().all(|(_, v)| *v >= params.min_distance))
        .collect();
    let buffer = group_buffer(members);
    let mut out = Vec::new();
    for (anchor, dists) in eligible.choose_multiple(rng, params.max_anchors) {
        let (closest, farthest) = closest_farthest(dists, buffer);
        if let Some(m) = closest {
            out.push(Descriptor {
                kind: DescriptorKind::AnchorObject,
                text: format!("closest to {}", anchor.referral),
                extension: BTreeSet::from([m]),
                anchors: vec![anchor.id],
            });
        }
        if let Some(m) = farthest {
            out.push(Descriptor {
                kind: DescriptorKind::AnchorObject,
                text: format!("farthest from {}", anchor.referral),
                extension: BTreeSet::from([m]),
                anchors: vec![anchor.id],
            });
        }
    }
    out
}

/// Signed XY angles of members relative to the sight from `a` to `b`;
/// members coincident with `a` are skipped.
pub fn sight_angles(members: &[(ObjectId, Obb7)], a: &Obb7, b: &Obb7) -> Vec<(ObjectId, f64)> {
    let dir = b.center.xy().sub(a.center.xy());
    members
        .iter()
        .filter_map(|(id, o)| {
            signed_angle(dir, o.center.xy().sub(a.center.xy()))
                .ok()
                .map(|t| (*id, t))
        })
        .collect()
}

/// "leftmost"/"rightmost relative to the line from A to B" descriptors for
/// up to `max_sights` sampled sights. Positive angles (counterclockwise seen
/// from above) are on the left.
pub fn anchor_sight_descriptors(
    members: &[(ObjectId, Obb7)],
    candidates: &[AnchorCandidate],
    params: &AnchorParams,
    rng: &mut ChaCha8Rng,
) -> Vec<Descriptor> {
    let ids: BTreeSet<ObjectId> = members.iter().map(|(id, _)| *id).collect();
    let pool: Vec<&AnchorCandidate> = candidates.iter().filter(|c| !ids.contains(&c.id)).collect();
    let mut sights = Vec::new();
    for a in &pool {
        for b in &pool {
            if a.id != b.id
                && a.obb.center.xy().sub(b.obb.center.xy()).norm() >= params.sight_min_separation
            {
                sights.push((*a, *b));
            }
        }
    }
    let margin = params.sight_margin_deg.to_radians();
    let mut out = Vec::new();
    for (a, b) in sights.choose_multiple(rng, params.max_sights) {
        let angles = sight_angles(members, &a.obb, &b.obb);
        let (left, right) = leftmost_rightmost(&angles, margin);
        for (side, m) in [("leftmost", left), ("rightmost", right)] {
            if let Some(m) = m {
                out.push(Descriptor {
                    kind: DescriptorKind::AnchorSight,
                    text: format!(
                        "{side} relative to the line from {} to {}",
                        a.referral, b.referral
                    ),
                    extension: BTreeSet::from([m]),
                    anchors: vec![a.id, b.id],
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Referrals

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Caption or label of an object without distractors.
    Singleton,
    Comparative,
    AnchorObject,
    AnchorSight,
}

impl Provenance {
    pub fn is_anchor(self) -> bool {
        matches!(self, Provenance::AnchorObject | Provenance::AnchorSight)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Referral {
    pub object_id: ObjectId,
    pub group_label: String,
    pub description: String,
    pub provenance: Provenance,
    pub descriptor_keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchors: Vec<ObjectId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferralSet {
    pub referrals: Vec<Referral>,
    /// Group members left without a comparative description.
    pub flagged: Vec<ObjectId>,
    /// Objects without any referral; excluded from QA.
    pub undescribed: Vec<ObjectId>,
}

impl ReferralSet {
    pub fn for_object(&self, id: ObjectId) -> impl Iterator<Item = &Referral> {
        self.referrals.iter().filter(move |r| r.object_id == id)
    }

    pub fn to_jsonl(&self) -> String {
        self.referrals
            .iter()
            .map(|r| serde_json::to_string(r).expect("referral serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<Referral>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

/// Description for an object without distractors.
pub fn singleton_fallback(
    id: ObjectId,
    label: Option<&str>,
    caption: Option<&str>,
) -> Result<String, ReferringError> {
    caption
        .filter(|c| !c.trim().is_empty())
        .or(label.filter(|l| !l.trim().is_empty()))
        .map(|s| s.trim().to_string())
        .ok_or(ReferringError::Undescribable(id))
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whether every token of every label occurs in `text`.
pub fn keeps_labels(text: &str, labels: &[&str]) -> bool {
    let have: BTreeSet<String> = tokens(text).into_iter().collect();
    labels
        .iter()
        .all(|l| tokens(l).iter().all(|t| have.contains(t)))
}

/// Oracle rewrite of a templated referral. Rewrites that lose a label,
/// introduce a viewpoint word, or fail outright leave `text` unchanged.
pub fn rewrite_referral(text: &str, labels: &[&str], oracle: &OracleClient) -> String {
    let reply = oracle.ask(
        "referral_rewrite",
        bindings([("Referral", text)]),
        vec![],
        |t| {
            let t = t.trim();
            if t.is_empty() {
                Err("empty rewrite".to_string())
            } else {
                Ok(t.to_string())
            }
        },
    );
    match reply {
        Ok(r)
            if keeps_labels(&r.value, labels)
                && (contains_view_word(text) || !contains_view_word(&r.value)) =>
        {
            r.value
        }
        Ok(r) => {
            log::debug!("rewrite {:?} rejected for {text:?}", r.value);
            text.to_string()
        }
        Err(e) => {
            log::debug!("rewrite failed for {text:?}: {e}");
            text.to_string()
        }
    }
}

/// Renders a conjunction of keys as a noun phrase around `label`.
pub fn render_description(
    label: &str,
    keys: &[String],
    kinds: &BTreeMap<String, DescriptorKind>,
) -> String {
    let mut size = Vec::new();
    let mut adjectives = Vec::new();
    let mut clauses = Vec::new();
    for k in keys {
        match (kinds.get(k), k.as_str()) {
            (Some(DescriptorKind::Size), LARGEST | SMALLEST) => size.push(k.clone()),
            (Some(DescriptorKind::Size), NOT_LARGEST) => {
                clauses.push("that is not the largest".to_string())
            }
            (Some(DescriptorKind::Size), NOT_SMALLEST) => {
                clauses.push("that is not the smallest".to_string())
            }
            (Some(DescriptorKind::Appearance), _) => adjectives.push(k.clone()),
            _ => clauses.push(k.clone()),
        }
    }
    let mut words = vec!["the".to_string()];
    words.extend(size);
    words.extend(adjectives);
    words.push(label.to_string());
    let mut out = words.join(" ");
    if !clauses.is_empty() {
        out.push(' ');
        out.push_str(&clauses.join(" and "));
    }
    out
}

/// One annotated object as seen by the referring stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferObject {
    pub id: ObjectId,
    pub label: String,
    pub obb: Obb7,
    pub attributes: AppearanceAttributes,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferParams {
    pub size_tau: f64,
    pub relation_proximity: f64,
    pub subset_cap: usize,
    pub anchor: AnchorParams,
    pub rewrite: bool,
}

impl Default for ReferParams {
    fn default() -> Self {
        Self {
            size_tau: DEFAULT_SIZE_TAU,
            relation_proximity: RELATION_PROXIMITY,
            subset_cap: DEFAULT_SUBSET_CAP,
            anchor: AnchorParams::default(),
            rewrite: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferReport {
    pub groups: usize,
    pub appearance_failures: Vec<String>,
    pub flagged: usize,
    pub undescribed: usize,
}

/// Referrals for every object of a scene.
pub fn refer_scene(
    scene_id: &str,
    objects: &[ReferObject],
    groups: &[DistractorGroup],
    graph: &SceneGraph,
    oracle: &OracleClient,
    params: &ReferParams,
    seed: u64,
    concurrency: usize,
) -> (ReferralSet, ReferReport) {
    let by_id: BTreeMap<ObjectId, &ReferObject> = objects.iter().map(|o| (o.id, o)).collect();
    let labels: BTreeMap<ObjectId, String> =
        objects.iter().map(|o| (o.id, o.label.clone())).collect();
    let boxes: BTreeMap<ObjectId, Obb7> = objects.iter().map(|o| (o.id, o.obb)).collect();
    let ctx = RelationContext {
        graph,
        labels: &labels,
        boxes: &boxes,
    };
    let mut report = ReferReport {
        groups: groups.len(),
        ..Default::default()
    };

    // (referral, labels to preserve when rewriting)
    let mut drafts: Vec<(Referral, Vec<String>)> = Vec::new();
    let mut flagged = BTreeSet::new();
    let mut anchor_refs: BTreeMap<ObjectId, String> = BTreeMap::new();

    for g in groups {
        let members: Vec<&ReferObject> = g
            .members
            .iter()
            .filter_map(|id| by_id.get(id).copied())
            .collect();
        if members.len() == 1 {
            let o = members[0];
            match singleton_fallback(o.id, Some(&o.label), o.caption.as_deref()) {
                Ok(text) => {
                    anchor_refs
                        .entry(o.id)
                        .or_insert_with(|| format!("the {}", o.label));
                    drafts.push((
                        Referral {
                            object_id: o.id,
                            group_label: g.group_label.clone(),
                            description: text,
                            provenance: Provenance::Singleton,
                            descriptor_keys: vec![],
                            anchors: vec![],
                        },
                        vec![],
                    ));
                }
                Err(e) => log::warn!("{scene_id}: {e}"),
            }
            continue;
        }
        let ids: BTreeSet<ObjectId> = members.iter().map(|o| o.id).collect();
        let boxed: Vec<(ObjectId, Obb7)> = members.iter().map(|o| (o.id, o.obb)).collect();
        let attrs: Vec<(ObjectId, &AppearanceAttributes)> =
            members.iter().map(|o| (o.id, &o.attributes)).collect();
        let mut merged = MergedDescriptors::default();
        match group_by_appearance(&g.group_label, &attrs, oracle) {
            Ok(m) => merged.merge(DescriptorKind::Appearance, m),
            Err(e) => {
                log::warn!(
                    "{scene_id}/{}: appearance grouping failed: {e}",
                    g.group_label
                );
                report.appearance_failures.push(g.group_label.clone());
            }
        }
        merged.merge(DescriptorKind::Size, group_by_size(&boxed, params.size_tau));
        merged.merge(
            DescriptorKind::Relation,
            group_by_relations(&boxed, &ctx, params.relation_proximity),
        );
        let assigned = comparative_disambiguation(&ids, &merged.map, params.subset_cap);
        for (id, sets) in assigned {
            if sets.is_empty() {
                flagged.insert(id);
                continue;
            }
            let o = by_id[&id];
            for keys in sets {
                let text = render_description(&o.label, &keys, &merged.kinds);
                anchor_refs.entry(id).or_insert_with(|| text.clone());
                let mut keep = vec![o.label.clone()];
                keep.extend(
                    keys.iter()
                        .filter(|k| merged.kinds.get(*k) == Some(&DescriptorKind::Relation))
                        .cloned(),
                );
                drafts.push((
                    Referral {
                        object_id: id,
                        group_label: g.group_label.clone(),
                        description: text,
                        provenance: Provenance::Comparative,
                        descriptor_keys: keys,
                        anchors: vec![],
                    },
                    keep,
                ));
            }
        }
    }

    for g in groups.iter().filter(|g| g.members.len() > 1) {
        let boxed: Vec<(ObjectId, Obb7)> = g
            .members
            .iter()
            .filter_map(|id| by_id.get(id).map(|o| (o.id, o.obb)))
            .collect();
        let candidates: Vec<AnchorCandidate> = anchor_refs
            .iter()
            .filter(|(id, _)| !g.members.contains(id))
            .map(|(id, r)| AnchorCandidate {
                id: *id,
                obb: boxes[id],
                referral: r.clone(),
            })
            .collect();
        let mut rng = stream_rng(seed, &format!("anchor/{scene_id}/{}", g.group_label));
        let mut descs = anchor_object_descriptors(&boxed, &candidates, &params.anchor, &mut rng);
        descs.extend(anchor_sight_descriptors(
            &boxed,
            &candidates,
            &params.anchor,
            &mut rng,
        ));
        for d in descs {
            let id = *d
                .extension
                .iter()
                .next()
                .expect("anchored descriptors are exclusive");
            let o = by_id[&id];
            let mut keep = vec![o.label.clone()];
            keep.extend(d.anchors.iter().map(|a| labels[a].clone()));
            drafts.push((
                Referral {
                    object_id: id,
                    group_label: g.group_label.clone(),
                    description: format!("the {} {}", o.label, d.text),
                    provenance: match d.kind {
                        DescriptorKind::AnchorSight => Provenance::AnchorSight,
                        _ => Provenance::AnchorObject,
                    },
                    descriptor_keys: vec![d.text],
                    anchors: d.anchors,
                },
                keep,
            ));
        }
    }

    let mut referrals: Vec<Referral> = if params.rewrite {
        map_bounded(&drafts, concurrency, |(r, keep)| {
            let mut r = r.clone();
            if r.provenance != Provenance::Singleton {
                let keep: Vec<&str> = keep.iter().map(String::as_str).collect();
                r.description = rewrite_referral(&r.description, &keep, oracle);
            }
            r
        })
    } else {
        drafts.into_iter().map(|(r, _)| r).collect()
    };
    referrals.sort();
    referrals.dedup();

    let described: BTreeSet<ObjectId> = referrals.iter().map(|r| r.object_id).collect();
    let undescribed: Vec<ObjectId> = objects
        .iter()
        .map(|o| o.id)
        .filter(|id| !described.contains(id))
        .collect();
    report.flagged = flagged.len();
    report.undescribed = undescribed.len();
    (
        ReferralSet {
            referrals,
            flagged: flagged.into_iter().collect(),
            undescribed,
        },
        report,
    )
}
