//! 80% accuracy, micro/macro F1 and ROUGE-1 over predicted aspects, with
//! per-category and per-attribute breakdowns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspect::{normalize_attribute, normalize_value, Aspect};
use crate::data::ProductRecord;
use crate::infer::PredictionRow;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("cannot compare {gold:?} with {predicted:?}: attributes differ")]
    AttributeMismatch { gold: String, predicted: String },
    #[error("predictions and gold differ: missing {missing:?}, unexpected {unexpected:?}, duplicated {duplicated:?}")]
    IdMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
        duplicated: Vec<String>,
    },
    #[error("nothing to evaluate")]
    NoSupport,
}

/// Value tokens for matching: lowercased, hyphens split, each token singularized.
fn value_tokens(value: &str) -> Vec<String> {
    value
        .to_lowercase()
        .replace('-', " ")
        .split_whitespace()
        .map(normalize_value)
        .collect()
}

/// Equal, or one a prefix of the other sharing at least four characters.
fn tokens_match(a: &str, b: &str) -> bool {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    a == b || (short.chars().count() >= 4 && long.starts_with(short))
}

fn coverage(from: &[String], against: &[String]) -> f64 {
    if from.is_empty() {
        return 0.0;
    }
    let hits = from
        .iter()
        .filter(|t| against.iter().any(|u| tokens_match(t, u)))
        .count();
    hits as f64 / from.len() as f64
}

/// Larger of the gold-side and predicted-side token coverage.
pub fn aspect_match_score(gold: &Aspect, predicted: &Aspect) -> Result<f64, EvalError> {
    if normalize_attribute(gold.attribute()) != normalize_attribute(predicted.attribute()) {
        return Err(EvalError::AttributeMismatch {
            gold: gold.to_string(),
            predicted: predicted.to_string(),
        });
    }
    let g = value_tokens(gold.value());
    let p = value_tokens(predicted.value());
    Ok(coverage(&g, &p).max(coverage(&p, &g)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchJudgement {
    pub gold: Aspect,
    pub predicted: Option<Aspect>,
    pub score: f64,
    pub correct: bool,
}

pub const ACCURACY_THRESHOLD: f64 = 0.8;

/// Score `gold` against its best same-attribute prediction.
pub fn judge(gold: &Aspect, predicted: &[Aspect]) -> MatchJudgement {
    let attribute = normalize_attribute(gold.attribute());
    let mut best: Option<(f64, &Aspect)> = None;
    for p in predicted.iter().filter(|p| normalize_attribute(p.attribute()) == attribute) {
        let score = aspect_match_score(gold, p).expect("same attribute");
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, p));
        }
    }
    let score = best.map_or(0.0, |(s, _)| s);
    MatchJudgement {
        gold: gold.clone(),
        predicted: best.map(|(_, p)| p.clone()),
        score,
        correct: score >= ACCURACY_THRESHOLD,
    }
}

/// A product's gold aspects next to its predicted aspects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: String,
    pub category: String,
    pub gold: Vec<Aspect>,
    pub predicted: Vec<Aspect>,
}

/// Pair each gold record with the prediction row of the same id.
pub fn align(predictions: &[PredictionRow], golds: &[ProductRecord]) -> Result<Vec<Scored>, EvalError> {
    let mut by_id: HashMap<&str, &PredictionRow> = HashMap::new();
    let mut duplicated = BTreeSet::new();
    for p in predictions {
        if by_id.insert(p.id.as_str(), p).is_some() {
            duplicated.insert(p.id.clone());
        }
    }
    let gold_ids: BTreeSet<&str> = golds.iter().map(|g| g.id.as_str()).collect();
    let missing: Vec<String> = golds
        .iter()
        .filter(|g| !by_id.contains_key(g.id.as_str()))
        .map(|g| g.id.clone())
        .collect();
    let unexpected: Vec<String> = predictions
        .iter()
        .filter(|p| !gold_ids.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || !duplicated.is_empty() {
        return Err(EvalError::IdMismatch {
            missing,
            unexpected,
            duplicated: duplicated.into_iter().collect(),
        });
    }
    Ok(golds
        .iter()
        .map(|g| Scored {
            id: g.id.clone(),
            category: g.category.clone(),
            gold: g.gold_aspects.as_slice().to_vec(),
            predicted: by_id[g.id.as_str()].aspects.clone(),
        })
        .collect())
}

/// Fraction of gold aspects judged correct.
pub fn accuracy80(products: &[Scored]) -> f64 {
    let (correct, total) = accuracy_counts(products);
    ratio(correct, total)
}

fn accuracy_counts(products: &[Scored]) -> (usize, usize) {
    products
        .iter()
        .flat_map(|p| p.gold.iter().map(|g| judge(g, &p.predicted).correct))
        .fold((0, 0), |(c, t), ok| (c + usize::from(ok), t + 1))
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn containment_form(value: &str) -> String {
    normalize_value(&value.to_lowercase().replace('-', " "))
}

fn contains_either(a: &str, b: &str) -> bool {
    a.contains(b) || b.contains(a)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR / (P + R)`, or 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Containment-based true/false positives and false negatives, keyed by
/// normalized attribute.
pub fn f1_counts(products: &[Scored]) -> BTreeMap<String, Counts> {
    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    for p in products {
        let gold: Vec<(String, String)> = p
            .gold
            .iter()
            .map(|a| (normalize_attribute(a.attribute()), containment_form(a.value())))
            .collect();
        let pred: Vec<(String, String)> = p
            .predicted
            .iter()
            .map(|a| (normalize_attribute(a.attribute()), containment_form(a.value())))
            .collect();
        let matches = |(ga, gv): &(String, String), (pa, pv): &(String, String)| ga == pa && contains_either(gv, pv);
        for g in &gold {
            let entry = counts.entry(g.0.clone()).or_default();
            if pred.iter().any(|q| matches(g, q)) {
                entry.tp += 1;
            } else {
                entry.fn_ += 1;
            }
        }
        for q in &pred {
            if !gold.iter().any(|g| matches(g, q)) {
                counts.entry(q.0.clone()).or_default().fp += 1;
            }
        }
    }
    counts
}

/// Micro-F1 over all aspects and macro-F1 averaged over attributes that
/// occur in gold.
pub fn micro_macro_f1(products: &[Scored]) -> (f64, f64) {
    let counts = f1_counts(products);
    let mut total = Counts::default();
    counts.values().for_each(|c| total.add(*c));
    (total.f1(), macro_f1(&counts))
}

fn macro_f1(counts: &BTreeMap<String, Counts>) -> f64 {
    let in_gold: Vec<f64> = counts
        .values()
        .filter(|c| c.tp + c.fn_ > 0)
        .map(Counts::f1)
        .collect();
    if in_gold.is_empty() {
        0.0
    } else {
        in_gold.iter().sum::<f64>() / in_gold.len() as f64
    }
}

fn unigrams(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for token in text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        *counts.entry(token.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Clipped unigram recall of `gold` in `predicted`.
pub fn rouge1_recall(gold: &str, predicted: &str) -> f64 {
    let g = unigrams(gold);
    let p = unigrams(predicted);
    let total: usize = g.values().sum();
    let hit: usize = g.iter().map(|(w, &n)| n.min(p.get(w).copied().unwrap_or(0))).sum();
    ratio(hit, total)
}

fn serialize(aspects: &[Aspect]) -> String {
    aspects.iter().map(Aspect::to_string).collect::<Vec<_>>().join("; ")
}

/// Mean per-product ROUGE-1 recall over products with gold aspects.
pub fn rouge1(products: &[Scored]) -> f64 {
    let scores: Vec<f64> = products
        .iter()
        .filter(|p| !p.gold.is_empty())
        .map(|p| rouge1_recall(&serialize(&p.gold), &serialize(&p.predicted)))
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc80: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub rouge1: f64,
    pub products: usize,
    pub gold_aspects: usize,
    pub predicted_aspects: usize,
    pub correct80: usize,
    #[serde(flatten)]
    pub counts: Counts,
}

pub fn evaluate(products: &[Scored]) -> Result<MetricsReport, EvalError> {
    let with_gold = products.iter().filter(|p| !p.gold.is_empty()).count();
    if with_gold == 0 {
        return Err(EvalError::NoSupport);
    }
    let (correct80, gold_aspects) = accuracy_counts(products);
    let per_attribute = f1_counts(products);
    let mut counts = Counts::default();
    per_attribute.values().for_each(|c| counts.add(*c));
    Ok(MetricsReport {
        acc80: ratio(correct80, gold_aspects),
        macro_f1: macro_f1(&per_attribute),
        micro_f1: counts.f1(),
        rouge1: rouge1(products),
        products: with_gold,
        gold_aspects,
        predicted_aspects: products.iter().map(|p| p.predicted.len()).sum(),
        correct80,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Category,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// One report per category or per attribute, worst macro-F1 first.
///
/// Attribute groups restrict both gold and predicted aspects to that
/// attribute, so a prediction of the attribute on a product without it in
/// gold counts as a false positive of that group.
pub fn report_by_group(products: &[Scored], key: GroupKey) -> Vec<GroupRow> {
    let mut groups: BTreeMap<String, Vec<Scored>> = BTreeMap::new();
    match key {
        GroupKey::Category => {
            for p in products {
                groups.entry(p.category.clone()).or_default().push(p.clone());
            }
        }
        GroupKey::Attribute => {
            let attributes: BTreeSet<String> = products
                .iter()
                .flat_map(|p| p.gold.iter().map(|a| normalize_attribute(a.attribute())))
                .collect();
            for attribute in attributes {
                let only = |aspects: &[Aspect]| -> Vec<Aspect> {
                    aspects
                        .iter()
                        .filter(|a| normalize_attribute(a.attribute()) == attribute)
                        .cloned()
                        .collect()
                };
                let restricted = products
                    .iter()
                    .map(|p| Scored {
                        gold: only(&p.gold),
                        predicted: only(&p.predicted),
                        ..p.clone()
                    })
                    .filter(|p| !p.gold.is_empty() || !p.predicted.is_empty())
                    .collect();
                groups.insert(attribute, restricted);
            }
        }
    }
    let mut rows: Vec<GroupRow> = groups
        .into_iter()
        .filter_map(|(group, members)| evaluate(&members).ok().map(|report| GroupRow { group, report }))
        .collect();
    rows.sort_by(|a, b| a.report.macro_f1.total_cmp(&b.report.macro_f1).then_with(|| a.group.cmp(&b.group)));
    rows
}

/// Aligned text table with metrics as percentages to two decimals.
pub fn format_table(overall: &MetricsReport, groups: &[(GroupKey, Vec<GroupRow>)]) -> String {
    let mut rows = vec![("overall".to_string(), overall)];
    for (_, group_rows) in groups {
        rows.extend(group_rows.iter().map(|r| (r.group.clone(), &r.report)));
    }
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    let mut out = String::new();
    let emit = |out: &mut String, label: &str, rows: &[(String, &MetricsReport)]| {
        writeln!(
            out,
            "{label:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
            "80%Acc.", "Macro-F1", "Micro-F1", "ROUGE1", "Products"
        )
        .expect("string write");
        for (name, r) in rows {
            writeln!(
                out,
                "{name:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
                pct(r.acc80),
                pct(r.macro_f1),
                pct(r.micro_f1),
                pct(r.rouge1),
                r.products
            )
            .expect("string write");
        }
    };
    emit(&mut out, "", &rows[..1]);
    for (key, group_rows) in groups {
        let label = match key {
            GroupKey::Category => "category",
            GroupKey::Attribute => "attribute",
        };
        out.push('\n');
        let rows: Vec<_> = group_rows.iter().map(|r| (r.group.clone(), &r.report)).collect();
        emit(&mut out, label, &rows);
    }
    out
}
