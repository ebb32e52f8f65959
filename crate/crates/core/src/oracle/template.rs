use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::Deserialize;

use super::OracleError;

const BUNDLED: &str = include_str!("../../assets/prompts.toml");

/// Prompt text with `[[Placeholder]]` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("[[") {
        let Some(len) = rest[start + 2..].find("]]") else {
            break;
        };
        out.push(Piece::Text(&rest[..start]));
        out.push(Piece::Slot(&rest[start + 2..start + 2 + len]));
        rest = &rest[start + 2 + len + 2..];
    }
    out.push(Piece::Text(rest));
    out
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            body: body.into(),
        }
    }

    /// Distinct slot names in order of first appearance.
    pub fn slots(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in pieces(&self.body) {
            if let Piece::Slot(s) = p {
                if !out.iter().any(|o| o == s) {
                    out.push(s.to_string());
                }
            }
        }
        out
    }

    /// Substitutes every slot. Bracket pairs inside values are collapsed so no
    /// slot marker survives rendering.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, OracleError> {
        let mut out = String::with_capacity(self.body.len());
        for p in pieces(&self.body) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => {
                    let v = bindings
                        .get(s)
                        .ok_or_else(|| OracleError::MissingBinding(s.to_string()))?;
                    out.push_str(&v.replace("[[", "[").replace("]]", "]"));
                }
            }
        }
        Ok(out)
    }
}

/// Named template collection.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

#[derive(Deserialize)]
struct RawTemplate {
    body: String,
}

impl TemplateSet {
    pub fn from_toml(text: &str) -> Result<Self, OracleError> {
        let raw: BTreeMap<String, RawTemplate> =
            toml::from_str(text).map_err(|e| OracleError::Config(e.to_string()))?;
        Ok(Self {
            templates: raw
                .into_iter()
                .map(|(name, r)| (name.clone(), PromptTemplate::new(name, r.body)))
                .collect(),
        })
    }

    /// Bundled templates with entries from `path` replacing same-named ones.
    pub fn with_overrides(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OracleError::Config(format!("{}: {e}", path.display())))?;
        let mut set = bundled_templates().clone();
        for (k, v) in Self::from_toml(&text)?.templates {
            set.templates.insert(k, v);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&PromptTemplate> {
        self.templates.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

pub fn bundled_templates() -> &'static TemplateSet {
    static SET: OnceLock<TemplateSet> = OnceLock::new();
    SET.get_or_init(|| TemplateSet::from_toml(BUNDLED).expect("bundled prompts parse"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::bindings;
    use proptest::prelude::*;

    #[test]
    fn bundled_set_is_complete() {
        let names: Vec<&str> = bundled_templates().names().collect();
        for n in [
            "scene_annotation",
            "frame_annotation",
            "object_annotation",
            "relation_judgment",
            "relation_extraction",
            "label_subsumption",
            "appearance_grouping",
            "distracting_attribute",
            "referral_rewrite",
            "object_category",
            "attribute_extraction",
        ] {
            assert!(names.contains(&n), "missing template {n}");
        }
    }

    #[test]
    fn object_prompt_renders_label() {
        let t = bundled_templates().get("object_annotation").unwrap();
        assert_eq!(t.slots(), vec!["ObjectLabel"]);
        let out = t.render(&bindings([("ObjectLabel", "sofa")])).unwrap();
        assert!(out.contains("\"sofa\" can be seen"));
        assert!(!out.contains("[["));
        assert!(!out.contains("]]"));
    }

    #[test]
    fn missing_binding_names_the_slot() {
        let t = bundled_templates().get("relation_judgment").unwrap();
        let err = t
            .render(&bindings([
                ("ObjectA", "book"),
                ("ObjectB", "box"),
                ("Predefined Relations", "inside"),
            ]))
            .unwrap_err();
        assert_eq!(err, OracleError::MissingBinding("Relation".into()));
    }

    #[test]
    fn relation_prompt_keeps_verbatim_clause() {
        let t = bundled_templates().get("relation_judgment").unwrap();
        let out = t
            .render(&bindings([
                ("ObjectA", "book"),
                ("Relation", "on top of"),
                ("ObjectB", "table"),
                ("Predefined Relations", "[on top of, beneath]"),
            ]))
            .unwrap();
        assert!(out.contains("Is the book on top of table in this picture? Return Yes/No"));
    }

    #[test]
    fn extraction_prompt_keeps_single_brackets() {
        let t = bundled_templates().get("relation_extraction").unwrap();
        assert_eq!(
            t.slots(),
            vec![
                "ObjectA",
                "ObjectB",
                "the corrected description of object relations"
            ]
        );
        let out = t
            .render(&bindings([
                ("ObjectA", "book"),
                ("ObjectB", "box"),
                (
                    "the corrected description of object relations",
                    "The book is inside the box.",
                ),
            ]))
            .unwrap();
        assert!(out.contains("objectA is/are [relationship preposition/phrase] objectB"));
    }

    #[test]
    fn subsumption_prompt() {
        let t = bundled_templates().get("label_subsumption").unwrap();
        let out = t
            .render(&bindings([("label1", "dining table"), ("label2", "table")]))
            .unwrap();
        assert_eq!(
            out,
            "You are an expert in indoor/outdoor object categorization. Answer YES or NO: the category \"dining table\" is a subclass of \"table\"."
        );
    }

    proptest! {
        // Single-token alphanumeric bindings never collide after rendering.
        #[test]
        fn rendering_is_injective(
            a in "[a-z0-9]{1,8}", b in "[a-z0-9]{1,8}", c in "[a-z0-9]{1,8}",
            a2 in "[a-z0-9]{1,8}", b2 in "[a-z0-9]{1,8}", c2 in "[a-z0-9]{1,8}",
        ) {
            let t = bundled_templates().get("relation_judgment").unwrap();
            let r = |x: &str, y: &str, z: &str| t.render(&bindings([
                ("ObjectA", x), ("Relation", y), ("ObjectB", z), ("Predefined Relations", "v"),
            ])).unwrap();
            prop_assert_eq!(r(&a, &b, &c) == r(&a2, &b2, &c2), (a, b, c) == (a2, b2, c2));
        }
    }
}
