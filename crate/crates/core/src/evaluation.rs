//! Exact match and F1 scoring, per-bucket breakdowns and gold-override
//! studies.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::document::{AnswerType, GoldAnswer, HybridDocument, Operator, Question, Scale};
use crate::error::{Error, Result};
use crate::expression::{apply_scale, AnswerValue, FinalAnswer, ScaleConvention};
use crate::heads::{finalize_span_answer, infer_operator, route, AnswerPath, SpanAnswer};

/// Relative tolerance for numeric answers.
pub const NUMERIC_TOLERANCE: f64 = 1e-4;

/// Both answer candidates of a question, kept so that scoring can re-route
/// under a different operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub spans: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arithmetic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub operator: Operator,
    pub scale: Scale,
    pub answer: AnswerValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Candidates>,
}

impl Prediction {
    /// The answer the prediction would give under `op`, using its stored
    /// candidates. Without candidates the answer is kept unchanged.
    pub fn rerouted(&self, op: Operator) -> Prediction {
        let Some(c) = &self.candidates else {
            return Prediction {
                operator: op,
                ..self.clone()
            };
        };
        let (answer, scale) = match route(op) {
            AnswerPath::SpanPath => match finalize_span_answer(op, &c.spans, self.scale).expect("span operator") {
                (SpanAnswer::Spans(s), sc) => (AnswerValue::Spans(s), sc),
                (SpanAnswer::Count(n), sc) => (AnswerValue::Number(n as f64), sc),
            },
            AnswerPath::TreePath => match c.arithmetic {
                Some(v) => (AnswerValue::Number(v), self.scale),
                None => (AnswerValue::Spans(Vec::new()), self.scale),
            },
        };
        Prediction {
            question_id: self.question_id.clone(),
            operator: op,
            scale,
            answer,
            candidates: self.candidates.clone(),
        }
    }
}

/// Lowercases, replaces punctuation with spaces, drops the articles
/// `a`, `an`, `the` and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() || c == '.' || c == ',' { c } else { ' ' })
        .collect();
    // digit-internal "." and "," belong to the number, other ones are dropped
    let chars: Vec<char> = lowered.chars().collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == '.' || c == ',' {
            let digit_before = i > 0 && chars[i - 1].is_ascii_digit();
            let digit_after = chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
            if digit_before && digit_after && c == '.' {
                cleaned.push(c);
            } else if !(digit_before && digit_after) {
                cleaned.push(' ');
            }
        } else {
            cleaned.push(c);
        }
    }
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn normalized_set(spans: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in spans {
        let n = normalize_text(s);
        if seen.insert(n.clone()) {
            out.push(n);
        }
    }
    out
}

fn numbers_match(p: f64, g: f64) -> bool {
    (p - g).abs() <= NUMERIC_TOLERANCE * g.abs().max(1.0)
}

pub fn exact_match(pred: &FinalAnswer, gold: &FinalAnswer) -> f64 {
    if pred.scale != gold.scale {
        return 0.0;
    }
    let hit = match (&pred.value, &gold.value) {
        (AnswerValue::Number(_), AnswerValue::Number(_)) => {
            numbers_match(pred.normalized().expect("numeric"), gold.normalized().expect("numeric"))
        }
        (AnswerValue::Spans(p), AnswerValue::Spans(g)) => {
            let p: HashSet<String> = normalized_set(p).into_iter().collect();
            let g: HashSet<String> = normalized_set(g).into_iter().collect();
            p == g
        }
        _ => false,
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Bag-of-tokens F1 between two normalised strings.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0i64;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Largest total weight of a one-to-one assignment between rows and
/// columns of `w`. Exact by dynamic programming over column subsets.
pub fn best_assignment(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if cols > rows {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| w[i][j]).collect()).collect();
        return best_assignment(&t);
    }
    if cols > 16 {
        return greedy_assignment(w);
    }
    let full = 1usize << cols;
    let mut best = vec![f64::NEG_INFINITY; full];
    best[0] = 0.0;
    for row in w {
        let mut next = best.clone();
        for mask in 0..full {
            if best[mask] == f64::NEG_INFINITY {
                continue;
            }
            for (j, &x) in row.iter().enumerate() {
                if mask & (1 << j) == 0 {
                    let m = mask | (1 << j);
                    next[m] = next[m].max(best[mask] + x);
                }
            }
        }
        best = next;
    }
    best.into_iter().fold(0.0, f64::max)
}

fn greedy_assignment(w: &[Vec<f64>]) -> f64 {
    let mut cells: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in w.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            cells.push((x, i, j));
        }
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut used_r, mut used_c) = (HashSet::new(), HashSet::new());
    let mut total = 0.0;
    for (x, i, j) in cells {
        if !used_r.contains(&i) && !used_c.contains(&j) {
            used_r.insert(i);
            used_c.insert(j);
            total += x;
        }
    }
    total
}

pub fn f1(pred: &FinalAnswer, gold: &FinalAnswer) -> f64 {
    if pred.scale != gold.scale {
        return 0.0;
    }
    match (&pred.value, &gold.value) {
        (AnswerValue::Spans(p), AnswerValue::Spans(g)) => {
            let p = normalized_set(p);
            let g = normalized_set(g);
            if p.is_empty() && g.is_empty() {
                return 1.0;
            }
            if p.is_empty() || g.is_empty() {
                return 0.0;
            }
            let w: Vec<Vec<f64>> = p.iter().map(|a| g.iter().map(|b| token_f1(a, b)).collect()).collect();
            let matched = best_assignment(&w);
            let precision = matched / p.len() as f64;
            let recall = matched / g.len() as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        }
        _ => exact_match(pred, gold),
    }
}

pub fn gold_final_answer(q: &Question, convention: &ScaleConvention) -> FinalAnswer {
    let value = match &q.gold_answer {
        GoldAnswer::Spans(s) => AnswerValue::Spans(s.clone()),
        GoldAnswer::Number(v) => AnswerValue::Number(*v),
    };
    apply_scale(value, q.gold_scale, convention)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides {
    pub gold_operator: bool,
    pub gold_scale: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
    pub operator_accuracy: f64,
    pub scale_accuracy: f64,
    pub overrides: Overrides,
    /// Keyed `"<answer type>/<source>"`.
    pub breakdown: BTreeMap<String, Bucket>,
    pub questions: Vec<QuestionScore>,
}

fn answer_type_name(t: AnswerType) -> &'static str {
    match t {
        AnswerType::Span => "span",
        AnswerType::Spans => "spans",
        AnswerType::Count => "count",
        AnswerType::Arithmetic => "arithmetic",
    }
}

/// Scores `predictions` against the questions of `docs`. The id sets must
/// coincide exactly.
pub fn evaluate_dataset(
    predictions: &[Prediction],
    docs: &[HybridDocument],
    overrides: Overrides,
    convention: &ScaleConvention,
) -> Result<EvalReport> {
    let mut gold: HashMap<&str, (&HybridDocument, &Question)> = HashMap::new();
    let mut order = Vec::new();
    for d in docs {
        for q in &d.questions {
            if gold.insert(q.id.as_str(), (d, q)).is_some() {
                return Err(Error::Data(format!("duplicate gold question id {}", q.id)));
            }
            order.push(q.id.as_str());
        }
    }
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    let mut extra = Vec::new();
    for p in predictions {
        if by_id.insert(p.question_id.as_str(), p).is_some() {
            return Err(Error::Data(format!("duplicate prediction for {}", p.question_id)));
        }
        if !gold.contains_key(p.question_id.as_str()) {
            extra.push(p.question_id.clone());
        }
    }
    let mut missing: Vec<String> = order
        .iter()
        .filter(|id| !by_id.contains_key(*id))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() || order.is_empty() {
        missing.sort();
        extra.sort();
        return Err(Error::IdMismatch { missing, extra });
    }

    let mut order_ids: Vec<&str> = order.clone();
    order_ids.sort();
    let (mut em, mut f1_sum) = (0.0, 0.0);
    let (mut op_hits, mut op_total, mut scale_hits) = (0usize, 0usize, 0usize);
    let mut breakdown: BTreeMap<String, Bucket> = BTreeMap::new();
    let mut questions = Vec::with_capacity(order_ids.len());
    for id in order_ids {
        let (doc, q) = gold[id];
        let gold_op = infer_operator(doc, q);
        let mut p = by_id[id].clone();
        if overrides.gold_operator {
            if let Some(op) = gold_op {
                p = p.rerouted(op);
            }
        }
        if overrides.gold_scale {
            p.scale = q.gold_scale;
        }
        let g = gold_final_answer(q, convention);
        let pa = apply_scale(p.answer.clone(), p.scale, convention);
        let (e, f) = (exact_match(&pa, &g), f1(&pa, &g));
        em += e;
        f1_sum += f;
        if let Some(op) = gold_op {
            op_total += 1;
            op_hits += usize::from(op == p.operator);
        }
        scale_hits += usize::from(p.scale == q.gold_scale);
        let key = format!("{}/{}", answer_type_name(q.answer_type), q.source().name());
        let b = breakdown.entry(key).or_default();
        b.em += e;
        b.f1 += f;
        b.count += 1;
        questions.push(QuestionScore {
            question_id: id.to_string(),
            em: e,
            f1: f,
        });
    }
    for b in breakdown.values_mut() {
        b.em /= b.count as f64;
        b.f1 /= b.count as f64;
    }
    let n = questions.len();
    Ok(EvalReport {
        em: em / n as f64,
        f1: f1_sum / n as f64,
        count: n,
        operator_accuracy: if op_total == 0 { 0.0 } else { op_hits as f64 / op_total as f64 },
        scale_accuracy: scale_hits as f64 / n as f64,
        overrides,
        breakdown,
        questions,
    })
}

impl EvalReport {
    /// Aligned plain-text summary table.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(String, String, String, String)> = vec![(
            "bucket".into(),
            "count".into(),
            "em".into(),
            "f1".into(),
        )];
        for (k, b) in &self.breakdown {
            rows.push((k.clone(), b.count.to_string(), format!("{:.4}", b.em), format!("{:.4}", b.f1)));
        }
        rows.push((
            "overall".into(),
            self.count.to_string(),
            format!("{:.4}", self.em),
            format!("{:.4}", self.f1),
        ));
        let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (a, b, c, d) in &rows {
            let _ = writeln!(out, "{a:<w0$}  {b:>w1$}  {c:>6}  {d:>6}");
        }
        let _ = writeln!(out, "operator accuracy  {:.4}", self.operator_accuracy);
        let _ = writeln!(out, "scale accuracy     {:.4}", self.scale_accuracy);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(v: f64, s: Scale) -> FinalAnswer {
        apply_scale(AnswerValue::Number(v), s, &ScaleConvention::default())
    }

    fn spans(v: &[&str], s: Scale) -> FinalAnswer {
        apply_scale(
            AnswerValue::Spans(v.iter().map(|x| x.to_string()).collect()),
            s,
            &ScaleConvention::default(),
        )
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match(&num(340.0, Scale::Thousand), &num(340.0, Scale::Thousand)), 1.0);
        assert_eq!(exact_match(&num(340.0, Scale::Million), &num(340.0, Scale::Thousand)), 0.0);
        assert_eq!(exact_match(&spans(&["linkedin"], Scale::None), &spans(&["LinkedIn"], Scale::None)), 1.0);
        assert_eq!(exact_match(&num(14.97, Scale::Percent), &num(14.970_01, Scale::Percent)), 1.0);
    }

    #[test]
    fn f1_examples() {
        let g = spans(&["LinkedIn", "Other"], Scale::None);
        assert!((f1(&spans(&["LinkedIn"], Scale::None), &g) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(&g, &g), 1.0);
        assert_eq!(f1(&spans(&["revenue"], Scale::None), &g), 0.0);
        assert_eq!(f1(&spans(&["LinkedIn"], Scale::Million), &spans(&["LinkedIn"], Scale::None)), 0.0);
    }

    #[test]
    fn normalisation_keeps_numbers_whole() {
        assert_eq!(normalize_text("The LinkedIn, Inc."), "linkedin inc");
        assert_eq!(normalize_text("2,271.5"), "2271.5");
        assert_eq!(normalize_text("(340)"), "340");
    }

    #[test]
    fn assignment_is_optimal() {
        // greedy would take 0.9 and then 0.0; the optimum pairs 0.8 + 0.8
        let w = vec![vec![0.9, 0.8], vec![0.8, 0.0]];
        assert!((best_assignment(&w) - 1.6).abs() < 1e-15);
        assert_eq!(best_assignment(&[vec![0.5, 0.7, 0.1]]), 0.7);
    }
}
