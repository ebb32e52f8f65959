//! Scoring of model predictions against generated samples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{validate_yes_no, YesNo};
use crate::taskgen::{QaSample, TaskKind};

pub const EM_R_NOTE: &str =
    "EM-R (nonstandard): match when either normalized answer is a token subsequence of the other";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth must be positive, got {0}")]
    NonPositiveTruth(f64),
    #[error("ground-truth answer {0:?} has no number")]
    MissingTruth(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub text: String,
}

/// Lowercase, punctuation to spaces (decimal points kept), collapsed
/// whitespace, one leading article removed.
pub fn normalize_answer(text: &str) -> String {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut s = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let decimal_point = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_alphanumeric() || c.is_whitespace() || decimal_point {
            s.push(c);
        } else {
            s.push(' ');
        }
    }
    let mut toks: Vec<&str> = s.split_whitespace().collect();
    if toks.len() > 1 && matches!(toks[0], "a" | "an" | "the") {
        toks.remove(0);
    }
    toks.join(" ")
}

pub fn exact_match(pred: &str, gt: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gt)
}

fn is_subsequence(needle: &[&str], hay: &[&str]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Either normalized answer is a (not necessarily contiguous) token
/// subsequence of the other. Empty answers never match.
pub fn exact_match_relaxed(pred: &str, gt: &str) -> bool {
    let (p, g) = (normalize_answer(pred), normalize_answer(gt));
    if p.is_empty() || g.is_empty() {
        return false;
    }
    let (pt, gt): (Vec<&str>, Vec<&str>) = (p.split(' ').collect(), g.split(' ').collect());
    is_subsequence(&pt, &gt) || is_subsequence(&gt, &pt)
}

/// Mean over confidence levels 0.50, 0.55, ..., 0.95 of
/// `|pred - gt| / gt < 1 - level`.
pub fn mra(pred: f64, gt: f64) -> Result<f64, EvalError> {
    if !(gt > 0.0) {
        return Err(EvalError::NonPositiveTruth(gt));
    }
    let rel = (pred - gt).abs() / gt;
    let hits = (0..10).filter(|k| rel < (10 - k) as f64 / 20.0).count();
    Ok(hits as f64 / 10.0)
}

/// Length unit attached to a number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Millimeter,
    Centimeter,
    Meter,
}

impl Unit {
    fn parse(token: &str) -> Option<Unit> {
        match token {
            "mm" | "millimeter" | "millimeters" | "millimetre" | "millimetres" => {
                Some(Unit::Millimeter)
            }
            "cm" | "centimeter" | "centimeters" | "centimetre" | "centimetres" => {
                Some(Unit::Centimeter)
            }
            "m" | "meter" | "meters" | "metre" | "metres" => Some(Unit::Meter),
            _ => None,
        }
    }

    fn in_meters(self) -> f64 {
        match self {
            Unit::Millimeter => 0.001,
            Unit::Centimeter => 0.01,
            Unit::Meter => 1.0,
        }
    }

    /// Converts `v` from `self` to `to`.
    pub fn convert(self, v: f64, to: Unit) -> f64 {
        v * self.in_meters() / to.in_meters()
    }
}

/// Numbers in order of appearance, each with the unit word that follows it.
pub fn extract_numbers(text: &str) -> Vec<(f64, Option<Unit>)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let starts_number = chars[i].is_ascii_digit()
            || (chars[i] == '-'
                && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit())
                && (i == 0 || !chars[i - 1].is_alphanumeric()));
        if !starts_number || (i > 0 && chars[i - 1].is_alphabetic()) {
            i += 1;
            continue;
        }
        let start = i;
        i += 1;
        while i < chars.len()
            && (chars[i].is_ascii_digit()
                || (chars[i] == '.' && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit())))
        {
            i += 1;
        }
        let num: String = chars[start..i].iter().collect();
        let Ok(v) = num.parse::<f64>() else {
            continue;
        };
        let mut j = i;
        while j < chars.len() && chars[j] == ' ' {
            j += 1;
        }
        let word: String = chars[j..]
            .iter()
            .take_while(|c| c.is_alphabetic())
            .collect::<String>()
            .to_lowercase();
        out.push((v, Unit::parse(&word)));
    }
    out
}

pub fn extract_number(text: &str) -> Option<f64> {
    extract_numbers(text).first().map(|(v, _)| *v)
}

/// First number converted to `unit` when it carries a unit of its own.
pub fn extract_quantity(text: &str, unit: Unit) -> Option<f64> {
    extract_numbers(text)
        .first()
        .map(|(v, u)| u.map_or(*v, |u| u.convert(*v, unit)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

/// First standalone uppercase `A` or `B`.
pub fn extract_choice(text: &str) -> Option<Choice> {
    text.split(|c: char| !c.is_alphanumeric())
        .find_map(|t| match t {
            "A" => Some(Choice::A),
            "B" => Some(Choice::B),
            _ => None,
        })
}

/// MRA per dimension of a `L x W x H cm` answer, averaged. Missing
/// predicted dimensions score 0.
pub fn size_mra(pred: &str, gt: &str) -> Result<f64, EvalError> {
    let truth = extract_numbers(gt);
    if truth.is_empty() {
        return Err(EvalError::MissingTruth(gt.to_string()));
    }
    let gt_unit = truth
        .iter()
        .find_map(|(_, u)| *u)
        .unwrap_or(Unit::Centimeter);
    let nums = extract_numbers(pred);
    // A trailing unit applies to every dimension ("200 x 100 x 50 cm").
    let pred_unit = nums.iter().rev().find_map(|(_, u)| *u);
    let mut total = 0.0;
    for (k, (g, _)) in truth.iter().enumerate() {
        let score = match nums.get(k) {
            Some((v, u)) => {
                let v = u.or(pred_unit).map_or(*v, |u| u.convert(*v, gt_unit));
                if *g > 0.0 {
                    mra(v, *g)?
                } else if v == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        total += score;
    }
    Ok(total / truth.len() as f64)
}

fn quantity_mra(pred: &str, gt: &str, unit: Unit) -> Result<f64, EvalError> {
    let g = extract_quantity(gt, unit).ok_or_else(|| EvalError::MissingTruth(gt.to_string()))?;
    match extract_quantity(pred, unit) {
        Some(p) => mra(p, g),
        None => Ok(0.0),
    }
}

fn yes_no_correct(pred: &str, gt: &str) -> bool {
    let p = validate_yes_no(pred);
    p != YesNo::Malformed && p == validate_yes_no(gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub metric: String,
    pub count: usize,
    pub answered: usize,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub em_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub note: String,
    pub tasks: BTreeMap<String, TaskScore>,
    /// Prediction ids with no matching sample.
    pub unmatched_predictions: usize,
}

#[derive(Default)]
struct Acc {
    metric: &'static str,
    count: usize,
    answered: usize,
    sum: f64,
    em: Option<(f64, f64)>,
}

impl Acc {
    fn finish(self) -> TaskScore {
        let n = self.count.max(1) as f64;
        TaskScore {
            metric: self.metric.to_string(),
            count: self.count,
            answered: self.answered,
            mean: self.sum / n,
            em: self.em.map(|(e, _)| e / n),
            em_r: self.em.map(|(_, r)| r / n),
        }
    }
}

/// Per-task means. Captions and grounding are not scored; samples without
/// a prediction score 0.
pub fn score_dataset(
    samples: &[QaSample],
    predictions: &[Prediction],
) -> Result<ScoreReport, EvalError> {
    let preds: BTreeMap<&str, &str> = predictions
        .iter()
        .map(|p| (p.sample_id.as_str(), p.text.as_str()))
        .collect();
    let mut accs: BTreeMap<String, Acc> = BTreeMap::new();
    for s in samples {
        let (key, metric) = match s.task {
            TaskKind::ObjectSize | TaskKind::AbsoluteDistance | TaskKind::ObjectCount => {
                (s.task.name().to_string(), "mra")
            }
            TaskKind::RelativeDistance => (s.task.name().to_string(), "accuracy"),
            TaskKind::AttributeRecognition => {
                if s.options.is_empty() {
                    ("attribute_recognition_open".to_string(), "exact_match")
                } else {
                    ("attribute_recognition_tf".to_string(), "accuracy")
                }
            }
            _ => continue,
        };
        let acc = accs.entry(key).or_insert_with(|| Acc {
            metric,
            ..Default::default()
        });
        acc.count += 1;
        if metric == "exact_match" && acc.em.is_none() {
            acc.em = Some((0.0, 0.0));
        }
        let Some(pred) = preds.get(s.sample_id.as_str()) else {
            continue;
        };
        acc.answered += 1;
        let score = match s.task {
            TaskKind::ObjectSize => size_mra(pred, &s.answer)?,
            TaskKind::AbsoluteDistance => quantity_mra(pred, &s.answer, Unit::Meter)?,
            TaskKind::ObjectCount => {
                let g = extract_number(&s.answer)
                    .ok_or_else(|| EvalError::MissingTruth(s.answer.clone()))?;
                extract_number(pred).map_or(Ok(0.0), |p| mra(p, g))?
            }
            TaskKind::RelativeDistance => {
                let ok = extract_choice(pred).is_some()
                    && extract_choice(pred) == extract_choice(&s.answer);
                f64::from(u8::from(ok))
            }
            _ if metric == "accuracy" => f64::from(u8::from(yes_no_correct(pred, &s.answer))),
            _ => {
                let em = f64::from(u8::from(exact_match(pred, &s.answer)));
                let emr = f64::from(u8::from(exact_match_relaxed(pred, &s.answer)));
                if let Some((e, r)) = acc.em.as_mut() {
                    *e += em;
                    *r += emr;
                }
                em
            }
        };
        acc.sum += score;
    }
    let ids: std::collections::BTreeSet<&str> =
        samples.iter().map(|s| s.sample_id.as_str()).collect();
    Ok(ScoreReport {
        note: EM_R_NOTE.to_string(),
        tasks: accs.into_iter().map(|(k, a)| (k, a.finish())).collect(),
        unmatched_predictions: preds.keys().filter(|k| !ids.contains(*k)).count(),
    })
}

impl ScoreReport {
    /// Fixed-width text table.
    pub fn render_table(&self) -> String {
        let mut out = format!("# {}\n", self.note);
        out.push_str(&format!(
            "{:<28} {:<12} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
            "task", "metric", "count", "answered", "mean", "em", "em_r"
        ));
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for (k, t) in &self.tasks {
            out.push_str(&format!(
                "{:<28} {:<12} {:>7} {:>8} {:>8.4} {:>8} {:>8}\n",
                k,
                t.metric,
                t.count,
                t.answered,
                t.mean,
                opt(t.em),
                opt(t.em_r)
            ));
        }
        out
    }
}

pub fn predictions_from_jsonl(text: &str) -> Result<Vec<Prediction>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
