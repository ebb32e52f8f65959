//! Label subsumption graph and distractor grouping.
//!
//! An edge `u -> v` records that `v` is a subtype (hyponym) of `u`. Candidate
//! edges come from word overlap between labels and are confirmed by an
//! oracle; mutual subsumption is collapsed onto one canonical label.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{bindings, OracleClient, OracleError};
use crate::util::{map_bounded, sha256_hex};
use crate::ObjectId;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("label {0:?} is empty after normalization")]
    Empty(String),
    #[error("malformed graph file line {line}: {text:?}")]
    Parse { line: usize, text: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Plural forms kept as-is.
const INVARIANT_PLURALS: &[&str] = &[
    "glasses",
    "pants",
    "scissors",
    "stairs",
    "blinds",
    "clothes",
    "shorts",
    "jeans",
    "headphones",
    "trousers",
    "series",
    "species",
    "tongs",
    "binoculars",
    "sunglasses",
];

const IRREGULAR: &[(&str, &str)] = &[
    ("shelves", "shelf"),
    ("knives", "knife"),
    ("leaves", "leaf"),
    ("people", "person"),
    ("mice", "mouse"),
    ("feet", "foot"),
];

const SUFFIXES: &[(&str, &str)] = &[
    ("ches", "ch"),
    ("shes", "sh"),
    ("sses", "ss"),
    ("xes", "x"),
    ("zes", "z"),
    ("ies", "y"),
];

fn singularize(word: &str) -> String {
    if INVARIANT_PLURALS.contains(&word) {
        return word.to_string();
    }
    if let Some((_, s)) = IRREGULAR.iter().find(|(p, _)| *p == word) {
        return s.to_string();
    }
    for (suffix, repl) in SUFFIXES {
        if word.len() > suffix.len() + 1 && word.ends_with(suffix) {
            return format!("{}{}", &word[..word.len() - suffix.len()], repl);
        }
    }
    if word.len() > 2
        && word.ends_with('s')
        && !word.ends_with("ss")
        && !word.ends_with("us")
        && !word.ends_with("is")
    {
        return word[..word.len() - 1].to_string();
    }
    word.to_string()
}

/// Lowercases, trims, collapses whitespace and singularizes the head noun.
pub fn normalize_label(raw: &str) -> Result<String, LabelError> {
    let mut words: Vec<String> = raw.split_whitespace().map(str::to_lowercase).collect();
    let Some(last) = words.pop() else {
        return Err(LabelError::Empty(raw.to_string()));
    };
    words.push(singularize(&last));
    Ok(words.join(" "))
}

fn tokens(label: &str) -> BTreeSet<&str> {
    label.split_whitespace().collect()
}

/// Ordered label pairs whose token sets intersect, in both directions.
pub fn shortlist_candidates(labels: &BTreeSet<String>) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for u in labels {
        let tu = tokens(u);
        for v in labels {
            if u != v && !tu.is_disjoint(&tokens(v)) {
                out.push((u.clone(), v.clone()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeVerdict {
    Accepted,
    Rejected,
    Skipped(String),
}

/// Asks whether `v` is a subclass of `u`.
pub fn validate_edge(u: &str, v: &str, oracle: &OracleClient) -> EdgeVerdict {
    match oracle.ask_yes_no(
        "label_subsumption",
        bindings([("label1", v), ("label2", u)]),
        vec![],
    ) {
        Ok(r) if r.value => EdgeVerdict::Accepted,
        Ok(_) => EdgeVerdict::Rejected,
        Err(e) => {
            log::warn!("edge {u} -> {v} skipped: {e}");
            EdgeVerdict::Skipped(e.to_string())
        }
    }
}

/// Directed subsumption graph. `aliases` maps labels merged away by cycle
/// resolution onto their canonical label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGraph {
    pub labels: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
    pub aliases: BTreeMap<String, String>,
}

impl LabelGraph {
    pub fn new(labels: impl IntoIterator<Item = String>) -> Self {
        Self {
            labels: labels.into_iter().collect(),
            ..Default::default()
        }
    }

    /// Adds `hypernym -> hyponym`; self edges are ignored.
    pub fn add_edge(&mut self, hypernym: &str, hyponym: &str) {
        if hypernym == hyponym {
            return;
        }
        self.labels.insert(hypernym.to_string());
        self.labels.insert(hyponym.to_string());
        self.edges
            .insert((hypernym.to_string(), hyponym.to_string()));
    }

    pub fn canonical<'a>(&'a self, label: &'a str) -> &'a str {
        self.aliases.get(label).map(String::as_str).unwrap_or(label)
    }

    fn children<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .range((label.to_string(), String::new())..)
            .take_while(move |(u, _)| u == label)
            .map(|(_, v)| v.as_str())
    }

    /// True iff `a == b` or `a` is reachable from `b`.
    pub fn is_subtype(&self, a: &str, b: &str) -> bool {
        let (a, b) = (self.canonical(a), self.canonical(b));
        if a == b {
            return true;
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([b]);
        while let Some(cur) = queue.pop_front() {
            for c in self.children(cur) {
                if c == a {
                    return true;
                }
                if seen.insert(c) {
                    queue.push_back(c);
                }
            }
        }
        false
    }

    /// Sorted `hypernym<TAB>hyponym` lines.
    pub fn to_tsv(&self) -> String {
        self.edges
            .iter()
            .map(|(u, v)| format!("{u}\t{v}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self, LabelError> {
        let mut g = LabelGraph::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let Some((u, v)) = line.split_once('\t') else {
                return Err(LabelError::Parse {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            g.add_edge(u, v);
        }
        Ok(g)
    }
}

/// Collapses each strongly connected component onto its lexicographically
/// smallest label, producing an acyclic graph.
pub fn resolve_cycles(graph: &LabelGraph) -> LabelGraph {
    let mut dg: DiGraph<&str, ()> = DiGraph::new();
    let idx: BTreeMap<&str, NodeIndex> = graph
        .labels
        .iter()
        .map(|l| (l.as_str(), dg.add_node(l.as_str())))
        .collect();
    for (u, v) in &graph.edges {
        dg.add_edge(idx[u.as_str()], idx[v.as_str()], ());
    }
    let mut aliases = graph.aliases.clone();
    for comp in petgraph::algo::tarjan_scc(&dg) {
        if comp.len() < 2 {
            continue;
        }
        let canon = comp
            .iter()
            .map(|n| dg[*n])
            .min()
            .expect("non-empty component");
        for n in &comp {
            if dg[*n] != canon {
                aliases.insert(dg[*n].to_string(), canon.to_string());
            }
        }
    }
    // Earlier aliases may point at labels merged just now.
    let resolve = |l: &str| -> String {
        let mut cur = l;
        while let Some(next) = aliases.get(cur) {
            cur = next;
        }
        cur.to_string()
    };
    let flat: BTreeMap<String, String> = aliases.keys().map(|k| (k.clone(), resolve(k))).collect();
    let canon = |l: &str| flat.get(l).cloned().unwrap_or_else(|| l.to_string());
    let mut out = LabelGraph {
        labels: graph.labels.iter().map(|l| canon(l)).collect(),
        edges: BTreeSet::new(),
        aliases: flat.clone(),
    };
    for (u, v) in &graph.edges {
        let (cu, cv) = (canon(u), canon(v));
        if cu != cv {
            out.edges.insert((cu, cv));
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphBuildReport {
    pub candidates: usize,
    pub accepted: usize,
    pub skipped: Vec<(String, String, String)>,
}

/// Validated edges over `labels` (before cycle resolution).
pub fn validated_edges(
    labels: &BTreeSet<String>,
    oracle: &OracleClient,
    concurrency: usize,
) -> (LabelGraph, GraphBuildReport) {
    let cands = shortlist_candidates(labels);
    let verdicts = map_bounded(&cands, concurrency, |(u, v)| validate_edge(u, v, oracle));
    let mut g = LabelGraph::new(labels.iter().cloned());
    let mut report = GraphBuildReport {
        candidates: cands.len(),
        ..Default::default()
    };
    for ((u, v), verdict) in cands.iter().zip(verdicts) {
        match verdict {
            EdgeVerdict::Accepted => {
                g.add_edge(u, v);
                report.accepted += 1;
            }
            EdgeVerdict::Rejected => {}
            EdgeVerdict::Skipped(why) => report.skipped.push((u.clone(), v.clone(), why)),
        }
    }
    (g, report)
}

/// Shortlists, validates and resolves cycles.
pub fn build_label_graph(
    labels: &BTreeSet<String>,
    oracle: &OracleClient,
    concurrency: usize,
) -> (LabelGraph, GraphBuildReport) {
    let (g, report) = validated_edges(labels, oracle, concurrency);
    (resolve_cycles(&g), report)
}

/// Cache key for a label set.
pub fn label_set_hash(labels: &BTreeSet<String>) -> String {
    let joined: Vec<&str> = labels.iter().map(String::as_str).collect();
    sha256_hex(joined.join("\n").as_bytes())
}

/// Loads the validated edge file for `labels` from `dir`, or builds and stores
/// it. Returns the resolved graph and whether the cache was hit.
pub fn cached_label_graph(
    dir: &Path,
    labels: &BTreeSet<String>,
    oracle: &OracleClient,
    concurrency: usize,
) -> Result<(LabelGraph, Option<GraphBuildReport>), LabelError> {
    let path = dir.join(format!("label_graph-{}.tsv", &label_set_hash(labels)[..16]));
    if path.exists() {
        let mut g = LabelGraph::from_tsv(&std::fs::read_to_string(&path)?)?;
        g.labels.extend(labels.iter().cloned());
        return Ok((resolve_cycles(&g), None));
    }
    let (g, report) = validated_edges(labels, oracle, concurrency);
    crate::util::write_atomic(&path, g.to_tsv().as_bytes())?;
    Ok((resolve_cycles(&g), Some(report)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorGroup {
    pub group_label: String,
    pub members: Vec<ObjectId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<DistractorGroup>,
    /// Objects that fall under more than one seed label.
    pub multi_group: Vec<ObjectId>,
}

/// Groups objects under every scene-present label that has no scene-present
/// strict hypernym.
pub fn group_distractors(objects: &[(ObjectId, String)], graph: &LabelGraph) -> Grouping {
    let present: BTreeSet<&str> = objects.iter().map(|(_, l)| graph.canonical(l)).collect();
    let seeds: Vec<&str> = present
        .iter()
        .copied()
        .filter(|l| !present.iter().any(|p| p != l && graph.is_subtype(l, p)))
        .collect();
    let mut count: BTreeMap<ObjectId, usize> = BTreeMap::new();
    let mut groups = Vec::new();
    for seed in seeds {
        let mut members: Vec<ObjectId> = objects
            .iter()
            .filter(|(_, l)| graph.is_subtype(l, seed))
            .map(|(id, _)| *id)
            .collect();
        members.sort();
        for m in &members {
            *count.entry(*m).or_default() += 1;
        }
        groups.push(DistractorGroup {
            group_label: seed.to_string(),
            members,
        });
    }
    Grouping {
        groups,
        multi_group: count
            .into_iter()
            .filter(|(_, n)| *n > 1)
            .map(|(id, _)| id)
            .collect(),
    }
}

/// Maps oracle failures to the skip diagnostics used in reports.
pub fn describe_failure(e: &OracleError) -> String {
    e.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{MockOracle, OracleClient, RetryPolicy};
    use std::sync::Arc;

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_label("Office Chairs").unwrap(), "office chair");
        assert_eq!(normalize_label("TV").unwrap(), "tv");
        assert_eq!(normalize_label("glasses").unwrap(), "glasses");
        assert_eq!(normalize_label("  Book   Shelves ").unwrap(), "book shelf");
        assert_eq!(normalize_label("boxes").unwrap(), "box");
        assert_eq!(normalize_label("glass").unwrap(), "glass");
        assert_eq!(normalize_label("bus").unwrap(), "bus");
        assert!(normalize_label("   ").is_err());
    }

    #[test]
    fn shortlist_examples() {
        let c = shortlist_candidates(&set(&["chair", "office chair"]));
        assert_eq!(
            c,
            vec![
                ("chair".to_string(), "office chair".to_string()),
                ("office chair".to_string(), "chair".to_string())
            ]
        );
        assert!(shortlist_candidates(&set(&["table", "lamp"])).is_empty());
        assert_eq!(
            shortlist_candidates(&set(&["dining table", "table", "coffee table"])).len(),
            6
        );
    }

    fn scripted(yes: &'static [(&'static str, &'static str)]) -> OracleClient {
        let m = MockOracle::new().with_fallback(move |req| {
            if req.template != "label_subsumption" {
                return None;
            }
            let sub = req.bindings["label1"].as_str();
            let sup = req.bindings["label2"].as_str();
            Some(
                if yes.contains(&(sup, sub)) {
                    "YES"
                } else {
                    "NO"
                }
                .into(),
            )
        });
        OracleClient::new(Arc::new(m), RetryPolicy::default(), 4)
    }

    #[test]
    fn edge_validation() {
        let o = scripted(&[("table", "dining table")]);
        assert_eq!(
            validate_edge("table", "dining table", &o),
            EdgeVerdict::Accepted
        );
        assert_eq!(validate_edge("lamp", "table", &o), EdgeVerdict::Rejected);
        let bad = OracleClient::new(
            Arc::new(MockOracle::new().with_fallback(|_| Some("maybe".into()))),
            RetryPolicy::default(),
            1,
        );
        assert!(matches!(
            validate_edge("a", "b", &bad),
            EdgeVerdict::Skipped(_)
        ));
        assert_eq!(bad.call_count(), 3);
    }

    #[test]
    fn cycles_merge_to_smallest() {
        let mut g = LabelGraph::default();
        g.add_edge("a", "b");
        g.add_edge("b", "a");
        let r = resolve_cycles(&g);
        assert_eq!(r.labels, set(&["a"]));
        assert!(r.edges.is_empty());
        assert_eq!(r.canonical("b"), "a");

        let mut acyclic = LabelGraph::default();
        acyclic.add_edge("table", "dining table");
        assert_eq!(resolve_cycles(&acyclic), acyclic);

        let mut tri = LabelGraph::default();
        tri.add_edge("x", "y");
        tri.add_edge("y", "z");
        tri.add_edge("z", "x");
        tri.add_edge("z", "w");
        let r = resolve_cycles(&tri);
        assert_eq!(r.labels, set(&["w", "x"]));
        assert_eq!(
            r.edges,
            BTreeSet::from([("x".to_string(), "w".to_string())])
        );
        assert!(r.is_subtype("w", "y"));
    }

    #[test]
    fn subtype_queries() {
        let mut g = LabelGraph::default();
        g.add_edge("table", "dining table");
        g.add_edge("furniture", "table");
        assert!(g.is_subtype("dining table", "table"));
        assert!(g.is_subtype("dining table", "furniture"));
        assert!(g.is_subtype("lamp", "lamp"));
        assert!(!g.is_subtype("table", "dining table"));
        assert!(!g.is_subtype("lamp", "table"));
    }

    #[test]
    fn tsv_round_trip() {
        let mut g = LabelGraph::default();
        g.add_edge("table", "dining table");
        g.add_edge("chair", "office chair");
        let text = g.to_tsv();
        assert_eq!(text, "chair\toffice chair\ntable\tdining table\n");
        let back = LabelGraph::from_tsv(&text).unwrap();
        assert_eq!(back.edges, g.edges);
        assert!(LabelGraph::from_tsv("no tab here").is_err());
    }

    fn objs(v: &[(u32, &str)]) -> Vec<(ObjectId, String)> {
        v.iter()
            .map(|(i, l)| (ObjectId(*i), l.to_string()))
            .collect()
    }

    #[test]
    fn grouping_examples() {
        let mut g = LabelGraph::default();
        g.add_edge("chair", "office chair");
        let out = group_distractors(
            &objs(&[(1, "chair"), (2, "office chair"), (3, "table")]),
            &g,
        );
        assert_eq!(
            out.groups,
            vec![
                DistractorGroup {
                    group_label: "chair".into(),
                    members: vec![ObjectId(1), ObjectId(2)]
                },
                DistractorGroup {
                    group_label: "table".into(),
                    members: vec![ObjectId(3)]
                },
            ]
        );
        let out = group_distractors(&objs(&[(1, "lamp"), (2, "sofa")]), &LabelGraph::default());
        assert_eq!(out.groups.len(), 2);
        assert!(out.groups.iter().all(|g| g.members.len() == 1));
        let out = group_distractors(&objs(&[(1, "chair"), (2, "chair")]), &LabelGraph::default());
        assert_eq!(out.groups.len(), 1);
        assert_eq!(out.groups[0].members.len(), 2);
    }

    #[test]
    fn multi_parent_objects_are_flagged() {
        let mut g = LabelGraph::default();
        g.add_edge("sofa", "sofa bed");
        g.add_edge("bed", "sofa bed");
        let out = group_distractors(&objs(&[(1, "sofa"), (2, "bed"), (3, "sofa bed")]), &g);
        assert_eq!(out.groups.len(), 2);
        assert_eq!(out.multi_group, vec![ObjectId(3)]);
    }

    #[test]
    fn build_uses_shortlist_only() {
        let o = scripted(&[("chair", "office chair"), ("lamp", "table")]);
        let labels = set(&["chair", "office chair", "lamp", "table"]);
        let (g, report) = build_label_graph(&labels, &o, 3);
        assert_eq!(report.candidates, 2);
        assert_eq!(
            g.edges,
            BTreeSet::from([("chair".into(), "office chair".into())])
        );
    }
}
