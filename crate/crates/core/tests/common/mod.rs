//! Independent oracles and fixture loaders shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mvg_core::graph::{Adjacency, Locator, Node, NodeKind};
use mvg_core::{parse_dataset, ExpressionTree, HybridDocument};

pub fn fixture_path(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> Vec<HybridDocument> {
    let raw = std::fs::read(fixture_path(name)).expect("fixture readable");
    parse_dataset(&raw).expect("fixture parses")
}

pub type EdgeSet = BTreeSet<(usize, usize)>;

/// Every ordered pair `(i, j)` with an edge.
pub fn edge_set(a: &Adjacency) -> EdgeSet {
    a.edges(false).into_iter().map(|[i, j]| (i, j)).collect()
}

fn pairwise(nodes: &[Node], edge: impl Fn(&Node, &Node) -> bool) -> EdgeSet {
    let mut out = EdgeSet::new();
    for a in nodes {
        for b in nodes {
            if a.index != b.index && edge(a, b) {
                out.insert((a.index, b.index));
            }
        }
    }
    out
}

fn tabular_link(a: &Locator, b: &Locator) -> bool {
    match (*a, *b) {
        (Locator::Cell { row: r1, col: c1 }, Locator::Cell { row: r2, col: c2 }) => {
            r1.abs_diff(r2) + c1.abs_diff(c2) == 1
        }
        (Locator::Cell { row, .. }, Locator::Row { row: r }) => row == r,
        (Locator::Cell { col, .. }, Locator::Column { col: c }) => col == c,
        (Locator::CellToken { row, col, .. }, Locator::Cell { row: r, col: c }) => row == r && col == c,
        _ => false,
    }
}

/// Brute-force tabular view: grid neighbours, cell-row, cell-column and
/// cell-token pairs, symmetric.
pub fn oracle_tabular(nodes: &[Node]) -> EdgeSet {
    pairwise(nodes, |a, b| tabular_link(&a.locator, &b.locator) || tabular_link(&b.locator, &a.locator))
}

fn contains(parent: &Locator, child: &Locator) -> bool {
    match (*parent, *child) {
        (Locator::Question, Locator::QuestionToken { .. }) => true,
        (
            Locator::Sentence { paragraph: p, sentence: s, .. },
            Locator::ParagraphToken { paragraph, sentence, .. },
        ) => p == paragraph && s == sentence,
        (Locator::Row { row }, Locator::Cell { row: r, .. }) => row == r,
        (Locator::Column { col }, Locator::Cell { col: c, .. }) => col == c,
        (Locator::Cell { row, col }, Locator::CellToken { row: r, col: c, .. }) => row == r && col == c,
        _ => false,
    }
}

fn is_text_word(n: &Node, question_bridging: bool) -> bool {
    match n.locator {
        Locator::ParagraphToken { .. } => true,
        Locator::QuestionToken { .. } => question_bridging,
        _ => false,
    }
}

fn cell_of(n: &Node) -> Option<(usize, usize)> {
    match n.locator {
        Locator::CellToken { row, col, .. } => Some((row, col)),
        _ => None,
    }
}

/// Word `w` in a text holder matches a cell token at `(r, c)` with the
/// same lowercased text.
fn matches_cell(nodes: &[Node], w: &Node, pred: impl Fn(usize, usize) -> bool) -> bool {
    nodes
        .iter()
        .any(|t| cell_of(t).is_some_and(|(r, c)| pred(r, c)) && t.text.to_lowercase() == w.text.to_lowercase())
}

fn holds(holder: &Locator, word: &Locator) -> bool {
    contains(holder, word) && matches!(holder, Locator::Question | Locator::Sentence { .. })
}

fn relation_link(nodes: &[Node], a: &Node, b: &Node, question_bridging: bool) -> bool {
    if contains(&a.locator, &b.locator) {
        return true;
    }
    // word - cell bridge
    if let Locator::Cell { row, col } = b.locator {
        if is_text_word(a, question_bridging) && matches_cell(nodes, a, |r, c| r == row && c == col) {
            return true;
        }
    }
    // sentence or question - row / column
    let line: Option<Box<dyn Fn(usize, usize) -> bool>> = match b.locator {
        Locator::Row { row } => Some(Box::new(move |r, _| r == row)),
        Locator::Column { col } => Some(Box::new(move |_, c| c == col)),
        _ => None,
    };
    if let Some(line) = line {
        let allowed = match a.locator {
            Locator::Sentence { .. } => true,
            Locator::Question => question_bridging,
            _ => false,
        };
        if allowed {
            return nodes
                .iter()
                .any(|w| holds(&a.locator, &w.locator) && matches_cell(nodes, w, &line));
        }
    }
    false
}

/// Brute-force relation view over all node pairs, symmetric.
pub fn oracle_relation(nodes: &[Node], question_bridging: bool) -> EdgeSet {
    pairwise(nodes, |a, b| {
        relation_link(nodes, a, b, question_bridging) || relation_link(nodes, b, a, question_bridging)
    })
}

/// Brute-force numerical view: `i -> j` iff both are numbers and `v_i > v_j`.
pub fn oracle_numerical(nodes: &[Node]) -> EdgeSet {
    pairwise(nodes, |a, b| {
        a.kind == NodeKind::Number
            && b.kind == NodeKind::Number
            && matches!((a.numeric_value, b.numeric_value), (Some(x), Some(y)) if x > y)
    })
}

/// Number nodes carrying `values`, in order.
pub fn number_nodes(values: &[f64]) -> Vec<Node> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| Node {
            index: i,
            kind: NodeKind::Number,
            locator: Locator::QuestionToken {
                position: i,
                start: 0,
                end: 0,
            },
            text: format!("{v}"),
            numeric_value: Some(v),
        })
        .collect()
}

/// True when the directed graph has no cycle (Kahn's algorithm).
pub fn is_dag(n: usize, edges: &EdgeSet) -> bool {
    let mut indegree = vec![0usize; n];
    for &(_, j) in edges {
        indegree[j] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for &(a, b) in edges.range((i, 0)..(i + 1, 0)) {
            debug_assert_eq!(a, i);
            indegree[b] -= 1;
            if indegree[b] == 0 {
                ready.push(b);
            }
        }
    }
    seen == n
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleTree {
    Num(f64),
    Op(String, Box<OracleTree>, Box<OracleTree>),
}

const OPS: [&str; 5] = ["+", "-", "*", "/", "avg"];

/// Recursive-descent pre-order parser over plain `f64` literals.
pub fn oracle_parse(tokens: &[String]) -> Option<OracleTree> {
    fn at(tokens: &[String], pos: &mut usize) -> Option<OracleTree> {
        let t = tokens.get(*pos)?;
        *pos += 1;
        if OPS.contains(&t.as_str()) {
            let l = at(tokens, pos)?;
            let r = at(tokens, pos)?;
            Some(OracleTree::Op(t.clone(), Box::new(l), Box::new(r)))
        } else {
            t.parse().ok().map(OracleTree::Num)
        }
    }
    let mut pos = 0;
    let tree = at(tokens, &mut pos)?;
    (pos == tokens.len()).then_some(tree)
}

pub fn same_tree(lib: &ExpressionTree, oracle: &OracleTree) -> bool {
    match (lib, oracle) {
        (ExpressionTree::Leaf { value, .. }, OracleTree::Num(v)) => value.to_bits() == v.to_bits(),
        (ExpressionTree::Op { op, left, right }, OracleTree::Op(sym, l, r)) => {
            op.symbol() == sym && same_tree(left, l) && same_tree(right, r)
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleError {
    DivisionByZero,
    Overflow,
    Malformed,
}

/// Right-to-left stack machine over pre-order tokens.
pub fn oracle_eval(tokens: &[String]) -> Result<f64, OracleError> {
    let mut stack: Vec<f64> = Vec::new();
    for t in tokens.iter().rev() {
        if OPS.contains(&t.as_str()) {
            let a = stack.pop().ok_or(OracleError::Malformed)?;
            let b = stack.pop().ok_or(OracleError::Malformed)?;
            let v = match t.as_str() {
                "+" => a + b,
                "-" => a - b,
                "*" => a * b,
                "/" if b.abs() < 1e-12 => return Err(OracleError::DivisionByZero),
                "/" => a / b,
                _ => 0.5 * (a + b),
            };
            if !v.is_finite() {
                return Err(OracleError::Overflow);
            }
            stack.push(v);
        } else {
            stack.push(t.parse().map_err(|_| OracleError::Malformed)?);
        }
    }
    match stack.as_slice() {
        [v] => Ok(*v),
        _ => Err(OracleError::Malformed),
    }
}

pub fn close_relative(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}
