//! Binary arithmetic expression trees, their pre-order token form, numeric
//! evaluation and answer scaling.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::document::{parse_number, Scale};
use crate::error::{Error, Result};

/// Denominators smaller than this in magnitude are treated as zero.
pub const DIVISION_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
    Avg,
}

impl ArithOp {
    pub const ALL: [ArithOp; 5] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul, ArithOp::Div, ArithOp::Avg];

    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
            ArithOp::Avg => "avg",
        }
    }

    pub fn from_symbol(s: &str) -> Option<ArithOp> {
        match s {
            "+" => Some(ArithOp::Add),
            "-" => Some(ArithOp::Sub),
            "*" => Some(ArithOp::Mul),
            "/" => Some(ArithOp::Div),
            "avg" | "AVG" => Some(ArithOp::Avg),
            _ => None,
        }
    }

    pub fn apply(self, a: f64, b: f64) -> Result<f64> {
        let v = match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
            ArithOp::Mul => a * b,
            ArithOp::Div => {
                if b.abs() < DIVISION_EPSILON {
                    return Err(Error::Evaluation(format!("division by zero ({a} / {b})")));
                }
                a / b
            }
            ArithOp::Avg => (a + b) / 2.0,
        };
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("overflow in {a} {} {b}", self.symbol())));
        }
        Ok(v)
    }
}

/// Where a leaf quantity came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Constant,
    /// Copied from the graph node with this index.
    Node(usize),
    /// Read from a derivation string.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpressionTree {
    Op {
        op: ArithOp,
        left: Box<ExpressionTree>,
        right: Box<ExpressionTree>,
    },
    Leaf {
        value: f64,
        provenance: Provenance,
    },
}

impl ExpressionTree {
    pub fn leaf(value: f64) -> Self {
        ExpressionTree::Leaf {
            value,
            provenance: Provenance::Literal,
        }
    }

    pub fn op(op: ArithOp, left: ExpressionTree, right: ExpressionTree) -> Self {
        ExpressionTree::Op {
            op,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn operator_count(&self) -> usize {
        match self {
            ExpressionTree::Leaf { .. } => 0,
            ExpressionTree::Op { left, right, .. } => 1 + left.operator_count() + right.operator_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ExpressionTree::Leaf { .. } => 0,
            ExpressionTree::Op { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Same shape and values, ignoring leaf provenance.
    pub fn same_expression(&self, other: &ExpressionTree) -> bool {
        match (self, other) {
            (ExpressionTree::Leaf { value: a, .. }, ExpressionTree::Leaf { value: b, .. }) => a == b,
            (
                ExpressionTree::Op { op: oa, left: la, right: ra },
                ExpressionTree::Op { op: ob, left: lb, right: rb },
            ) => oa == ob && la.same_expression(lb) && ra.same_expression(rb),
            _ => false,
        }
    }
}

impl fmt::Display for ExpressionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&preorder_serialize(self).join(" "))
    }
}

pub fn evaluate(tree: &ExpressionTree) -> Result<f64> {
    match tree {
        ExpressionTree::Leaf { value, .. } => {
            if value.is_finite() {
                Ok(*value)
            } else {
                Err(Error::Evaluation(format!("non-finite leaf {value}")))
            }
        }
        ExpressionTree::Op { op, left, right } => op.apply(evaluate(left)?, evaluate(right)?),
    }
}

/// Plain-decimal rendering that parses back to the identical `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

pub fn preorder_serialize(tree: &ExpressionTree) -> Vec<String> {
    fn walk(t: &ExpressionTree, out: &mut Vec<String>) {
        match t {
            ExpressionTree::Leaf { value, .. } => out.push(format_number(*value)),
            ExpressionTree::Op { op, left, right } => {
                out.push(op.symbol().to_string());
                walk(left, out);
                walk(right, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(tree, &mut out);
    out
}

/// Recursive-descent parse of exactly one pre-order expression.
pub fn preorder_parse<S: AsRef<str>>(tokens: &[S]) -> Result<ExpressionTree> {
    fn parse_at<S: AsRef<str>>(tokens: &[S], pos: &mut usize) -> Result<ExpressionTree> {
        let Some(tok) = tokens.get(*pos) else {
            return Err(Error::Expression {
                position: *pos,
                message: "unexpected end of expression".into(),
            });
        };
        let tok = tok.as_ref();
        let here = *pos;
        *pos += 1;
        if let Some(op) = ArithOp::from_symbol(tok) {
            let left = parse_at(tokens, pos)?;
            let right = parse_at(tokens, pos)?;
            return Ok(ExpressionTree::op(op, left, right));
        }
        parse_number(tok)
            .map(ExpressionTree::leaf)
            .ok_or_else(|| Error::Expression {
                position: here,
                message: format!("unknown token {tok:?}"),
            })
    }
    let mut pos = 0;
    let tree = parse_at(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Expression {
            position: pos,
            message: format!("{} trailing tokens", tokens.len() - pos),
        });
    }
    Ok(tree)
}

/// Parses a space-separated derivation string such as `"- 2611 2271"`.
pub fn parse_derivation(text: &str) -> Result<ExpressionTree> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    preorder_parse(&tokens)
}

/// Multipliers turning a scaled magnitude into a plain number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleConvention {
    pub thousand: f64,
    pub million: f64,
    pub billion: f64,
    pub percent: f64,
}

impl Default for ScaleConvention {
    fn default() -> Self {
        Self {
            thousand: 1e3,
            million: 1e6,
            billion: 1e9,
            percent: 0.01,
        }
    }
}

impl ScaleConvention {
    pub fn factor(&self, scale: Scale) -> f64 {
        match scale {
            Scale::None => 1.0,
            Scale::Thousand => self.thousand,
            Scale::Million => self.million,
            Scale::Billion => self.billion,
            Scale::Percent => self.percent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Spans(Vec<String>),
    Number(f64),
}

/// An answer with its scale attached. Numeric answers carry the normalised
/// value computed once from the raw magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalAnswer {
    pub value: AnswerValue,
    pub scale: Scale,
    normalized: Option<f64>,
}

impl FinalAnswer {
    pub fn normalized(&self) -> Option<f64> {
        self.normalized
    }

    /// Re-attaches a different scale, recomputing from the raw magnitude so
    /// the factor is never applied on top of a previous one.
    pub fn with_scale(&self, scale: Scale, convention: &ScaleConvention) -> FinalAnswer {
        apply_scale(self.value.clone(), scale, convention)
    }

    /// Raw magnitude rounded to four decimals, for reports.
    pub fn reported(&self) -> AnswerValue {
        match &self.value {
            AnswerValue::Number(v) => AnswerValue::Number(round4(*v)),
            spans => spans.clone(),
        }
    }
}

pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

pub fn apply_scale(value: AnswerValue, scale: Scale, convention: &ScaleConvention) -> FinalAnswer {
    let normalized = match &value {
        AnswerValue::Number(v) => Some(v * convention.factor(scale)),
        AnswerValue::Spans(_) => None,
    };
    FinalAnswer {
        value,
        scale,
        normalized,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(s: &str) -> ExpressionTree {
        parse_derivation(s).unwrap()
    }

    #[test]
    fn evaluates_examples() {
        assert_eq!(evaluate(&tree("- 2611 2271")).unwrap(), 340.0);
        let ratio = evaluate(&tree("/ - 2611 2271 2271")).unwrap();
        assert!((ratio - 340.0 / 2271.0).abs() < 1e-15);
        assert!((ratio - 0.149_713_782).abs() < 1e-9);
        assert_eq!(evaluate(&tree("avg 2 4")).unwrap(), 3.0);
    }

    #[test]
    fn division_by_zero_and_overflow_are_errors() {
        assert!(matches!(evaluate(&tree("/ 1 - 3 3")), Err(Error::Evaluation(_))));
        let big = ExpressionTree::op(ArithOp::Mul, ExpressionTree::leaf(1e200), ExpressionTree::leaf(1e200));
        assert!(evaluate(&big).is_err());
    }

    #[test]
    fn serialize_parse_examples() {
        let t = ExpressionTree::op(ArithOp::Sub, ExpressionTree::leaf(2611.0), ExpressionTree::leaf(2271.0));
        assert_eq!(preorder_serialize(&t), ["-", "2611", "2271"]);
        assert_eq!(preorder_parse(&["-", "2611", "2271"]).unwrap(), t);
        match preorder_parse(&["+", "1"]) {
            Err(Error::Expression { position, .. }) => assert_eq!(position, 2),
            other => panic!("{other:?}"),
        }
        match preorder_parse(&["1", "2"]) {
            Err(Error::Expression { position, .. }) => assert_eq!(position, 1),
            other => panic!("{other:?}"),
        }
        assert!(preorder_parse(&["x"]).is_err());
        assert!(preorder_parse::<&str>(&[]).is_err());
    }

    #[test]
    fn fractional_literals_round_trip() {
        let t = ExpressionTree::op(ArithOp::Div, ExpressionTree::leaf(0.1 + 0.2), ExpressionTree::leaf(-1e-7));
        assert_eq!(preorder_parse(&preorder_serialize(&t)).unwrap(), t);
    }

    #[test]
    fn scale_factors() {
        let c = ScaleConvention::default();
        let a = apply_scale(AnswerValue::Number(340.0), Scale::Thousand, &c);
        assert_eq!(a.normalized(), Some(340_000.0));
        let p = apply_scale(AnswerValue::Number(14.97), Scale::Percent, &c);
        assert!((p.normalized().unwrap() - 0.1497).abs() < 1e-15);
        let s = apply_scale(AnswerValue::Spans(vec!["LinkedIn".into()]), Scale::Million, &c);
        assert_eq!(s.value, AnswerValue::Spans(vec!["LinkedIn".into()]));
        assert_eq!(s.scale, Scale::Million);
        assert_eq!(s.normalized(), None);
    }

    #[test]
    fn rescaling_never_compounds() {
        let c = ScaleConvention::default();
        let a = apply_scale(AnswerValue::Number(2.0), Scale::Million, &c);
        let b = a.with_scale(Scale::Million, &c).with_scale(Scale::Million, &c);
        assert_eq!(b.normalized(), Some(2e6));
        assert_eq!(a.with_scale(Scale::None, &c).normalized(), Some(2.0));
    }

    #[test]
    fn reporting_rounds_to_four_places() {
        let c = ScaleConvention::default();
        let a = apply_scale(AnswerValue::Number(340.0 / 2271.0), Scale::None, &c);
        assert_eq!(a.reported(), AnswerValue::Number(0.1497));
    }
}
