//! Rule-based replies for the bundled templates, used as the mock fallback.
//!
//! The replies are simple functions of the request bindings, so runs with the
//! mock are reproducible across machines.

use std::collections::{BTreeMap, BTreeSet};

use super::OracleRequest;
use crate::scene_graph::find_relation_phrase;

pub const COLORS: &[&str] = &[
    "blue", "red", "green", "gray", "white", "black", "brown", "yellow", "beige", "silver",
];
pub const MATERIALS: &[&str] = &["metal", "wooden", "plastic", "glass", "fabric", "leather"];
pub const SHAPES: &[&str] = &["round", "square", "rectangular", "curved", "flat"];
pub const CONDITIONS: &[&str] = &["worn", "new", "damaged", "clean"];

/// Known (category, field, value) → distractor pairs.
const DISTRACTORS: &[(&str, &str, &str, &str)] = &[
    ("curtain", "color", "white", "blue"),
    ("door", "color", "brown", "white"),
    ("door", "material", "wooden", "metal"),
    ("carpet", "color", "black", "gray"),
    ("tv", "color", "black", "silver"),
    ("tv", "shape", "flat", "curved"),
    ("pillow", "color", "light-colored", "blue"),
    ("pillow", "shape", "square", "round"),
];

fn get<'a>(req: &'a OracleRequest, key: &str) -> &'a str {
    req.bindings.get(key).map(String::as_str).unwrap_or("")
}

pub fn respond(req: &OracleRequest) -> Option<String> {
    let reply = match req.template.as_str() {
        "label_subsumption" => {
            let (sub, sup) = (get(req, "label1"), get(req, "label2"));
            let yes = sub != sup && sub.ends_with(&format!(" {sup}"));
            if yes { "YES" } else { "NO" }.to_string()
        }
        "scene_annotation" => "An indoor space furnished with multiple pieces of furniture.".into(),
        "frame_annotation" => "A view of an indoor space with multiple objects.".into(),
        "object_annotation" => format!("YES. A {}.", get(req, "ObjectLabel")),
        "object_category" => "otherfurniture".into(),
        "relation_judgment" => "Yes".into(),
        "relation_extraction" => {
            let desc = get(req, "the corrected description of object relations");
            find_relation_phrase(desc)
                .unwrap_or("unrelated")
                .to_string()
        }
        "appearance_grouping" => group_table(get(req, "AttributeTable")),
        "distracting_attribute" => distractor(
            get(req, "ObjectLabel"),
            get(req, "AttributeField"),
            get(req, "AttributeValue"),
        ),
        "referral_rewrite" => get(req, "Referral").to_string(),
        "attribute_extraction" => extract_attributes(get(req, "Caption")),
        _ => return None,
    };
    Some(reply)
}

/// Groups the rows of a markdown attribute table by exact value per field,
/// keeping only values that some but not all rows share.
fn group_table(table: &str) -> String {
    let rows: Vec<Vec<String>> = table
        .lines()
        .filter(|l| l.trim_start().starts_with('|'))
        .map(|l| {
            l.trim()
                .trim_matches('|')
                .split('|')
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect();
    let mut groups: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    let mut all: BTreeSet<u32> = BTreeSet::new();
    if rows.len() >= 2 {
        for row in &rows[2..] {
            let Some(Ok(id)) = row.first().map(|c| c.parse::<u32>()) else {
                continue;
            };
            all.insert(id);
            for cell in &row[1..] {
                if cell != "--" && !cell.is_empty() {
                    groups.entry(cell.to_lowercase()).or_default().insert(id);
                }
            }
        }
    }
    groups.retain(|_, ids| ids.len() < all.len());
    serde_json::to_string(&groups).expect("map serializes")
}

fn distractor(label: &str, field: &str, value: &str) -> String {
    let v = value.trim().to_lowercase();
    if let Some((_, _, _, d)) = DISTRACTORS
        .iter()
        .find(|(l, f, tv, _)| *l == label && *f == field && *tv == v)
    {
        return d.to_string();
    }
    let pool = match field {
        "color" => COLORS,
        "material" => MATERIALS,
        "shape" => SHAPES,
        _ => CONDITIONS,
    };
    pool.iter()
        .find(|p| **p != v)
        .map(|p| p.to_string())
        .unwrap_or_else(|| "other".into())
}

fn extract_attributes(caption: &str) -> String {
    let tokens: Vec<String> = caption
        .to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .map(str::to_string)
        .collect();
    let find = |pool: &[&str]| {
        tokens
            .iter()
            .find(|t| pool.contains(&t.as_str()))
            .map(|t| serde_json::Value::String(t.clone()))
            .unwrap_or(serde_json::Value::Null)
    };
    serde_json::json!({
        "color": find(COLORS),
        "material": find(MATERIALS),
        "shape": find(SHAPES),
        "condition": find(CONDITIONS),
    })
    .to_string()
}
