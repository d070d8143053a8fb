//! Hybrid table-text documents, their JSON dataset format, tokenisation and
//! numeral recognition.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Answer magnitude class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    None,
    Thousand,
    Million,
    Billion,
    Percent,
}

impl Scale {
    pub const ALL: [Scale; 5] = [
        Scale::None,
        Scale::Thousand,
        Scale::Million,
        Scale::Billion,
        Scale::Percent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Scale> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::None => "none",
            Scale::Thousand => "thousand",
            Scale::Million => "million",
            Scale::Billion => "billion",
            Scale::Percent => "percent",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown scale {s:?}")))
    }
}

/// The ten answer operators. The first four produce span answers, the
/// remaining six arithmetic answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operator {
    SpanInText,
    CellInTable,
    Spans,
    Count,
    Sum,
    Average,
    Multiplication,
    Division,
    Difference,
    ChangeRatio,
}

impl Operator {
    pub const ALL: [Operator; 10] = [
        Operator::SpanInText,
        Operator::CellInTable,
        Operator::Spans,
        Operator::Count,
        Operator::Sum,
        Operator::Average,
        Operator::Multiplication,
        Operator::Division,
        Operator::Difference,
        Operator::ChangeRatio,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Operator> {
        Self::ALL.get(i).copied()
    }

    pub fn is_span_family(self) -> bool {
        matches!(
            self,
            Operator::SpanInText | Operator::CellInTable | Operator::Spans | Operator::Count
        )
    }

    pub fn is_arithmetic(self) -> bool {
        !self.is_span_family()
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::SpanInText => "span-in-text",
            Operator::CellInTable => "cell-in-table",
            Operator::Spans => "spans",
            Operator::Count => "count",
            Operator::Sum => "sum",
            Operator::Average => "average",
            Operator::Multiplication => "multiplication",
            Operator::Division => "division",
            Operator::Difference => "difference",
            Operator::ChangeRatio => "change-ratio",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown operator {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Span,
    Spans,
    Count,
    Arithmetic,
}

/// Where the evidence for an answer lives; used only for report breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerSource {
    Table,
    Text,
    TableText,
}

impl AnswerSource {
    pub fn name(self) -> &'static str {
        match self {
            AnswerSource::Table => "table",
            AnswerSource::Text => "text",
            AnswerSource::TableText => "table-text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldAnswer {
    Spans(Vec<String>),
    Number(f64),
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub cells: Vec<Vec<String>>,
    #[serde(default = "one")]
    pub header_rows: usize,
    #[serde(default = "one")]
    pub header_cols: usize,
}

impl Table {
    /// Checks rectangularity and header bounds. Dataset validation
    /// additionally requires at least two rows and two columns.
    pub fn new(cells: Vec<Vec<String>>, header_rows: usize, header_cols: usize) -> Result<Self> {
        let t = Table {
            cells,
            header_rows,
            header_cols,
        };
        t.check_shape()
            .map_err(|message| Error::Validation {
                document: String::new(),
                message,
            })?;
        Ok(t)
    }

    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn cell(&self, row: usize, col: usize) -> &str {
        &self.cells[row][col]
    }

    fn check_shape(&self) -> std::result::Result<(), String> {
        if self.cells.is_empty() || self.n_cols() == 0 {
            return Err("table is empty".into());
        }
        let width = self.n_cols();
        if let Some((r, row)) = self.cells.iter().enumerate().find(|(_, row)| row.len() != width) {
            return Err(format!(
                "ragged table: row 0 has {width} cells, row {r} has {}",
                row.len()
            ));
        }
        if self.header_rows >= self.n_rows() && self.header_rows > 0 {
            return Err(format!(
                "header_rows {} must be below row count {}",
                self.header_rows,
                self.n_rows()
            ));
        }
        if self.header_cols >= self.n_cols() && self.header_cols > 0 {
            return Err(format!(
                "header_cols {} must be below column count {}",
                self.header_cols,
                self.n_cols()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub order: i64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub answer_type: AnswerType,
    #[serde(rename = "answer")]
    pub gold_answer: GoldAnswer,
    #[serde(rename = "scale")]
    pub gold_scale: Scale,
    #[serde(rename = "operator", default, skip_serializing_if = "Option::is_none")]
    pub gold_operator: Option<Operator>,
    #[serde(rename = "derivation", default, skip_serializing_if = "Option::is_none")]
    pub gold_derivation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_from: Option<AnswerSource>,
}

impl Question {
    pub fn gold_spans(&self) -> &[String] {
        match &self.gold_answer {
            GoldAnswer::Spans(s) => s,
            GoldAnswer::Number(_) => &[],
        }
    }

    pub fn gold_number(&self) -> Option<f64> {
        match self.gold_answer {
            GoldAnswer::Number(v) => Some(v),
            GoldAnswer::Spans(_) => None,
        }
    }

    /// Items enumerated by a count question's derivation (`"a ## b ## c"`).
    pub fn count_items(&self) -> Vec<String> {
        if self.answer_type != AnswerType::Count {
            return Vec::new();
        }
        self.gold_derivation
            .as_deref()
            .map(|d| {
                d.split("##")
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn source(&self) -> AnswerSource {
        self.answer_from.unwrap_or(AnswerSource::TableText)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridDocument {
    pub id: String,
    pub table: Table,
    pub paragraphs: Vec<Paragraph>,
    pub questions: Vec<Question>,
}

impl HybridDocument {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            document: self.id.clone(),
            message,
        };
        self.table.check_shape().map_err(fail)?;
        if self.table.n_rows() < 2 || self.table.n_cols() < 2 {
            return Err(fail(format!(
                "table must be at least 2x2, got {}x{}",
                self.table.n_rows(),
                self.table.n_cols()
            )));
        }
        if self.paragraphs.is_empty() {
            return Err(fail("document has no paragraphs".into()));
        }
        if let Some(p) = self.paragraphs.iter().find(|p| p.text.trim().is_empty()) {
            return Err(fail(format!("paragraph {} is empty", p.order)));
        }
        let mut seen = HashSet::new();
        for q in &self.questions {
            if !seen.insert(q.id.as_str()) {
                return Err(fail(format!("duplicate question id {}", q.id)));
            }
            match (q.answer_type, &q.gold_answer) {
                (AnswerType::Arithmetic, GoldAnswer::Number(v)) if v.is_finite() => {}
                (AnswerType::Arithmetic, _) => {
                    return Err(fail(format!("question {}: arithmetic answer must be a number", q.id)))
                }
                (AnswerType::Count, GoldAnswer::Number(v)) if *v >= 0.0 && v.fract() == 0.0 => {}
                (AnswerType::Count, _) => {
                    return Err(fail(format!(
                        "question {}: count answer must be a non-negative integer",
                        q.id
                    )))
                }
                (AnswerType::Span | AnswerType::Spans, GoldAnswer::Spans(_)) => {}
                (AnswerType::Span | AnswerType::Spans, GoldAnswer::Number(_)) => {
                    return Err(fail(format!("question {}: span answer must be a list of strings", q.id)))
                }
            }
            if let Some(op) = q.gold_operator {
                let consistent = match q.answer_type {
                    AnswerType::Arithmetic => op.is_arithmetic(),
                    AnswerType::Count => op == Operator::Count,
                    AnswerType::Span | AnswerType::Spans => {
                        matches!(op, Operator::SpanInText | Operator::CellInTable | Operator::Spans)
                    }
                };
                if !consistent {
                    return Err(fail(format!(
                        "question {}: operator {op} does not fit answer type {:?}",
                        q.id, q.answer_type
                    )));
                }
            }
            if q.answer_type == AnswerType::Arithmetic {
                if let Some(d) = &q.gold_derivation {
                    crate::expression::parse_derivation(d)
                        .map_err(|e| fail(format!("question {}: bad derivation: {e}", q.id)))?;
                }
            }
        }
        Ok(())
    }

    /// Paragraphs sorted by their `order` field.
    pub fn ordered_paragraphs(&self) -> Vec<&Paragraph> {
        let mut ps: Vec<&Paragraph> = self.paragraphs.iter().collect();
        ps.sort_by_key(|p| p.order);
        ps
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }
}

fn byte_offset(input: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (l, chunk) in input.split_inclusive(|&b| b == b'\n').enumerate() {
        if l + 1 == line {
            return (offset + column.saturating_sub(1)).min(input.len());
        }
        offset += chunk.len();
    }
    input.len()
}

/// Parses and validates a dataset file (a JSON array of documents).
pub fn parse_dataset(raw: &[u8]) -> Result<Vec<HybridDocument>> {
    let docs: Vec<HybridDocument> = serde_json::from_slice(raw).map_err(|e| Error::Parse {
        offset: byte_offset(raw, e.line(), e.column()),
        message: e.to_string(),
    })?;
    for d in &docs {
        d.validate()?;
    }
    Ok(docs)
}

/// Canonical JSON serialisation (pretty-printed, schema field order).
pub fn serialize_dataset(docs: &[HybridDocument]) -> String {
    serde_json::to_string_pretty(docs).expect("documents serialise")
}

/// A lowercased token and its byte span `[start, end)` in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn is_punctuation(&self) -> bool {
        !self.text.chars().any(char::is_alphanumeric)
    }
}

/// Splits on whitespace and punctuation. Punctuation characters become
/// single-character tokens, except `,` and `.` between two digits, which
/// stay inside the numeral (`2,611`, `14.97`).
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    let close = |tokens: &mut Vec<Token>, s: usize, e: usize| {
        tokens.push(Token {
            text: text[s..e].to_lowercase(),
            start: s,
            end: e,
        });
    };
    for (k, &(pos, ch)) in chars.iter().enumerate() {
        if ch.is_alphanumeric() {
            start.get_or_insert(pos);
            continue;
        }
        let digit_joint = (ch == ',' || ch == '.')
            && start.is_some()
            && k > 0
            && chars[k - 1].1.is_ascii_digit()
            && chars.get(k + 1).is_some_and(|c| c.1.is_ascii_digit());
        if digit_joint {
            continue;
        }
        if let Some(s) = start.take() {
            close(&mut tokens, s, pos);
        }
        if !ch.is_whitespace() {
            close(&mut tokens, pos, pos + ch.len_utf8());
        }
    }
    if let Some(s) = start {
        close(&mut tokens, s, text.len());
    }
    tokens
}

/// Sentence byte spans: a sentence ends at `.`, `!` or `?` followed by
/// whitespace or the end of the text.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut iter = text.char_indices().peekable();
    while let Some((pos, ch)) = iter.next() {
        if start.is_none() && !ch.is_whitespace() {
            start = Some(pos);
        }
        let terminal = matches!(ch, '.' | '!' | '?')
            && iter.peek().is_none_or(|(_, next)| next.is_whitespace());
        if terminal {
            if let Some(s) = start.take() {
                spans.push((s, pos + ch.len_utf8()));
            }
        }
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            spans.push((s, end));
        }
    }
    spans
}

/// Numeric value of a token after stripping `,`, `$`, `%` and surrounding
/// whitespace; `(x)` reads as `-x`. Returns `None` for anything else.
pub fn parse_number(token: &str) -> Option<f64> {
    let mut s = token.trim();
    let mut negate = false;
    if s.len() >= 2 && s.starts_with('(') && s.ends_with(')') {
        negate = true;
        s = s[1..s.len() - 1].trim();
    }
    let cleaned: String = s.chars().filter(|c| !matches!(c, ',' | '$' | '%')).collect();
    let body = cleaned.strip_prefix(['-', '+']).unwrap_or(&cleaned);
    let mut digits = 0;
    let mut dots = 0;
    for c in body.chars() {
        match c {
            '0'..='9' => digits += 1,
            '.' => dots += 1,
            _ => return None,
        }
    }
    if digits == 0 || dots > 1 {
        return None;
    }
    let v: f64 = cleaned.parse().ok()?;
    if !v.is_finite() {
        return None;
    }
    Some(if negate { -v } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            texts(&tokenize("LinkedIn revenue increased.")),
            ["linkedin", "revenue", "increased", "."]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(
            texts(&tokenize("change ratio of 2,611")),
            ["change", "ratio", "of", "2,611"]
        );
        assert_eq!(texts(&tokenize("($340) 14.97%")), ["(", "$", "340", ")", "14.97", "%"]);
        assert_eq!(texts(&tokenize("ends 2017.")), ["ends", "2017", "."]);
        assert_eq!(texts(&tokenize("a,b 1,")), ["a", ",", "b", "1", ","]);
    }

    #[test]
    fn parse_number_examples() {
        assert_eq!(parse_number("2,271"), Some(2271.0));
        assert_eq!(parse_number("(340)"), Some(-340.0));
        assert_eq!(parse_number("LinkedIn"), None);
        assert_eq!(parse_number("$1,234.5"), Some(1234.5));
        assert_eq!(parse_number("14.97%"), Some(14.97));
        assert_eq!(parse_number(" 7 "), Some(7.0));
        for bad in ["", "%", "inf", "NaN", "1e5", "1.2.3", "()", "-", "2017a"] {
            assert_eq!(parse_number(bad), None, "{bad}");
        }
    }

    #[test]
    fn sentences_split_on_terminal_punctuation() {
        let text = "Revenue was 2,271. Costs rose to 14.5 percent! Why? Done";
        let spans: Vec<&str> = split_sentences(text).into_iter().map(|(s, e)| &text[s..e]).collect();
        assert_eq!(spans, ["Revenue was 2,271.", "Costs rose to 14.5 percent!", "Why?", "Done"]);
        assert_eq!(split_sentences("Hi.").len(), 1);
        assert!(split_sentences("   ").is_empty());
    }

    fn fixture(rows: Vec<Vec<&str>>) -> String {
        let cells: Vec<Vec<String>> = rows
            .into_iter()
            .map(|r| r.into_iter().map(String::from).collect())
            .collect();
        serde_json::json!([{
            "id": "doc1",
            "table": {"cells": cells, "header_rows": 1, "header_cols": 1},
            "paragraphs": [{"order": 1, "text": "LinkedIn revenue increased."}],
            "questions": [{
                "id": "q1", "text": "What was LinkedIn revenue in 2017?",
                "answer_type": "span", "answer": ["2,271"], "scale": "million"
            }]
        }])
        .to_string()
    }

    #[test]
    fn parses_minimal_dataset() {
        let raw = fixture(vec![vec!["", "2017"], vec!["LinkedIn", "2,271"]]);
        let docs = parse_dataset(raw.as_bytes()).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].table.cell(1, 1), "2,271");
        assert_eq!(docs[0].questions[0].gold_scale, Scale::Million);
    }

    #[test]
    fn ragged_table_names_document() {
        let raw = fixture(vec![vec!["a", "b"], vec!["c", "d", "e"]]);
        match parse_dataset(raw.as_bytes()) {
            Err(Error::Validation { document, message }) => {
                assert_eq!(document, "doc1");
                assert!(message.contains("ragged"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let raw = b"[\n  {\"id\": \"x\",, }\n]";
        match parse_dataset(raw) {
            Err(Error::Parse { offset, .. }) => assert_eq!(raw[offset], b','),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn answer_type_consistency_is_enforced() {
        let raw = serde_json::json!([{
            "id": "d", "table": {"cells": [["a","b"],["c","d"]]},
            "paragraphs": [{"order": 0, "text": "x"}],
            "questions": [{"id": "q", "text": "?", "answer_type": "count", "answer": 2.5, "scale": "none"}]
        }])
        .to_string();
        assert!(parse_dataset(raw.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn token_spans_are_increasing_and_cover_non_whitespace(text in "[a-zA-Z0-9 ,.$%()!?'\\-]{0,40}") {
            let tokens = tokenize(&text);
            let mut last_end = 0;
            for t in &tokens {
                prop_assert!(t.start >= last_end);
                prop_assert!(t.end > t.start);
                prop_assert_eq!(&t.text, &text[t.start..t.end].to_lowercase());
                last_end = t.end;
            }
            let covered: String = tokens.iter().map(|t| &text[t.start..t.end]).collect();
            let expected: String = text.chars().filter(|c| !c.is_whitespace()).collect();
            prop_assert_eq!(covered, expected);
        }

        #[test]
        fn parenthesised_numbers_negate(v in 0u32..10_000_000, frac in 0u32..100) {
            let t = format!("{v}.{frac:02}");
            let x = parse_number(&t).unwrap();
            prop_assert_eq!(parse_number(&format!("({t})")), Some(-x));
        }
    }
}
