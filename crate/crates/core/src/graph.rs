//! Node enumeration and the three view graphs over a shared node set.
//!
//! Enumeration order is fixed: question node, question words, sentences,
//! paragraph words, rows, columns, cells (row-major), cell words. The view
//! builders locate nodes through their [`Locator`] rather than through
//! index arithmetic, so any permutation of the node list yields the
//! correspondingly permuted adjacencies.

use std::collections::HashMap;

use serde::Serialize;

use crate::document::{parse_number, split_sentences, tokenize, HybridDocument, Question, Table};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Question,
    Sentence,
    Row,
    Column,
    Cell,
    Word,
    Number,
}

/// Where a node comes from. Byte spans index the question text, the
/// paragraph text or the cell text respectively; `paragraph` is the
/// position in order-sorted paragraphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "at", rename_all = "snake_case")]
pub enum Locator {
    Question,
    QuestionToken {
        position: usize,
        start: usize,
        end: usize,
    },
    Sentence {
        paragraph: usize,
        sentence: usize,
        start: usize,
        end: usize,
    },
    ParagraphToken {
        paragraph: usize,
        sentence: usize,
        position: usize,
        start: usize,
        end: usize,
    },
    Row {
        row: usize,
    },
    Column {
        col: usize,
    },
    Cell {
        row: usize,
        col: usize,
    },
    CellToken {
        row: usize,
        col: usize,
        position: usize,
        start: usize,
        end: usize,
    },
}

impl Locator {
    pub fn is_token(&self) -> bool {
        matches!(
            self,
            Locator::QuestionToken { .. } | Locator::ParagraphToken { .. } | Locator::CellToken { .. }
        )
    }

    pub fn on_table_side(&self) -> bool {
        matches!(
            self,
            Locator::Row { .. } | Locator::Column { .. } | Locator::Cell { .. } | Locator::CellToken { .. }
        )
    }

    pub fn on_paragraph_side(&self) -> bool {
        matches!(self, Locator::Sentence { .. } | Locator::ParagraphToken { .. })
    }

    pub fn on_question_side(&self) -> bool {
        matches!(self, Locator::Question | Locator::QuestionToken { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    pub index: usize,
    pub kind: NodeKind,
    pub locator: Locator,
    /// Lowercased token for word/number nodes, source text otherwise.
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub numeric_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Tabular,
    Relation,
    Numerical,
}

impl ViewKind {
    pub fn is_directed(self) -> bool {
        self == ViewKind::Numerical
    }
}

/// Dense 0/1 adjacency matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.n + j] = true;
    }

    pub fn link(&mut self, i: usize, j: usize) {
        if i != j {
            self.set(i, j);
            self.set(j, i);
        }
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| !self.get(i, i))
    }

    /// Ordered pairs `(i, j)` with an edge; with `upper_only`, only `i < j`.
    pub fn edges(&self, upper_only: bool) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) && (!upper_only || i < j) {
                    out.push([i, j]);
                }
            }
        }
        out
    }

    pub fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.get(i, j))
    }

    pub fn permuted(&self, perm: &[usize]) -> Adjacency {
        let mut out = Adjacency::new(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    out.set(perm[i], perm[j]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewGraph {
    pub view: ViewKind,
    pub adjacency: Adjacency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct GraphConfig {
    pub tabular_view: bool,
    pub relation_view: bool,
    pub numerical_view: bool,
    pub row_col_nodes: bool,
    /// Let question words bridge to matching cells like paragraph words.
    pub question_bridging: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            tabular_view: true,
            relation_view: true,
            numerical_view: true,
            row_col_nodes: true,
            question_bridging: true,
        }
    }
}

impl GraphConfig {
    pub fn active_views(&self) -> Vec<ViewKind> {
        let mut v = Vec::new();
        if self.tabular_view {
            v.push(ViewKind::Tabular);
        }
        if self.relation_view {
            v.push(ViewKind::Relation);
        }
        if self.numerical_view {
            v.push(ViewKind::Numerical);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct MultiViewGraph {
    pub nodes: Vec<Node>,
    pub views: Vec<ViewGraph>,
    pub config: GraphConfig,
}

impl MultiViewGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn view(&self, kind: ViewKind) -> Option<&ViewGraph> {
        self.views.iter().find(|v| v.view == kind)
    }

    fn select(&self, pred: impl Fn(&Node) -> bool) -> Vec<usize> {
        self.nodes.iter().filter(|n| pred(n)).map(|n| n.index).collect()
    }

    pub fn question_nodes(&self) -> Vec<usize> {
        self.select(|n| n.locator.on_question_side())
    }

    pub fn table_nodes(&self) -> Vec<usize> {
        self.select(|n| n.locator.on_table_side())
    }

    pub fn paragraph_nodes(&self) -> Vec<usize> {
        self.select(|n| n.locator.on_paragraph_side())
    }

    pub fn number_nodes(&self) -> Vec<usize> {
        self.select(|n| n.kind == NodeKind::Number)
    }

    /// Span-tagging candidates: paragraph word/number nodes and cells.
    pub fn taggable_nodes(&self) -> Vec<usize> {
        self.select(|n| matches!(n.locator, Locator::ParagraphToken { .. } | Locator::Cell { .. }))
    }

    pub fn find(&self, locator: &Locator) -> Option<usize> {
        self.nodes.iter().find(|n| &n.locator == locator).map(|n| n.index)
    }

    /// Fine-grained members of each node: words of a sentence or question,
    /// cells of a row or column, tokens of a cell. Empty for leaves.
    pub fn members(&self) -> Vec<Vec<usize>> {
        containment(&self.nodes).unwrap_or_else(|_| vec![Vec::new(); self.nodes.len()])
    }
}

fn node(index: usize, kind: NodeKind, locator: Locator, text: String, value: Option<f64>) -> Node {
    Node {
        index,
        kind,
        locator,
        text,
        numeric_value: value,
    }
}

fn word_kind(text: &str) -> (NodeKind, Option<f64>) {
    match parse_number(text) {
        Some(v) => (NodeKind::Number, Some(v)),
        None => (NodeKind::Word, None),
    }
}

/// Tokens of a cell that become nodes. A cell whose whole text is a numeral
/// (`"(340)"`, `"$2,271"`, `"14.5%"`) yields one number token.
pub fn cell_tokens(text: &str) -> Vec<(String, usize, usize, Option<f64>)> {
    let trimmed = text.trim();
    if let Some(v) = parse_number(trimmed) {
        let start = text.len() - text.trim_start().len();
        return vec![(trimmed.to_lowercase(), start, start + trimmed.len(), Some(v))];
    }
    tokenize(text)
        .into_iter()
        .filter(|t| !t.is_punctuation())
        .map(|t| {
            let v = parse_number(&t.text);
            (t.text, t.start, t.end, v)
        })
        .collect()
}

/// Enumerates graph nodes for one question over its document.
/// Punctuation-only tokens do not become nodes.
pub fn enumerate_nodes(doc: &HybridDocument, question: &Question, row_col_nodes: bool) -> Vec<Node> {
    let mut nodes = Vec::new();
    nodes.push(node(0, NodeKind::Question, Locator::Question, question.text.clone(), None));
    for (position, tok) in tokenize(&question.text).into_iter().filter(|t| !t.is_punctuation()).enumerate() {
        let (kind, value) = word_kind(&tok.text);
        let loc = Locator::QuestionToken {
            position,
            start: tok.start,
            end: tok.end,
        };
        nodes.push(node(nodes.len(), kind, loc, tok.text, value));
    }

    let paragraphs = doc.ordered_paragraphs();
    let sentences: Vec<Vec<(usize, usize)>> = paragraphs.iter().map(|p| split_sentences(&p.text)).collect();
    for (pi, (p, spans)) in paragraphs.iter().zip(&sentences).enumerate() {
        for (si, &(start, end)) in spans.iter().enumerate() {
            let loc = Locator::Sentence {
                paragraph: pi,
                sentence: si,
                start,
                end,
            };
            nodes.push(node(nodes.len(), NodeKind::Sentence, loc, p.text[start..end].to_string(), None));
        }
    }
    for (pi, (p, spans)) in paragraphs.iter().zip(&sentences).enumerate() {
        let words = tokenize(&p.text).into_iter().filter(|t| !t.is_punctuation());
        for (position, tok) in words.enumerate() {
            let Some(si) = spans.iter().position(|&(s, e)| tok.start >= s && tok.end <= e) else {
                continue;
            };
            let (kind, value) = word_kind(&tok.text);
            let loc = Locator::ParagraphToken {
                paragraph: pi,
                sentence: si,
                position,
                start: tok.start,
                end: tok.end,
            };
            nodes.push(node(nodes.len(), kind, loc, tok.text, value));
        }
    }

    let table = &doc.table;
    if row_col_nodes {
        for r in 0..table.n_rows() {
            nodes.push(node(nodes.len(), NodeKind::Row, Locator::Row { row: r }, format!("row {r}"), None));
        }
        for c in 0..table.n_cols() {
            nodes.push(node(nodes.len(), NodeKind::Column, Locator::Column { col: c }, format!("column {c}"), None));
        }
    }
    for r in 0..table.n_rows() {
        for c in 0..table.n_cols() {
            let text = table.cell(r, c).to_string();
            nodes.push(node(nodes.len(), NodeKind::Cell, Locator::Cell { row: r, col: c }, text, None));
        }
    }
    for r in 0..table.n_rows() {
        for c in 0..table.n_cols() {
            for (position, (text, start, end, value)) in cell_tokens(table.cell(r, c)).into_iter().enumerate() {
                let kind = if value.is_some() { NodeKind::Number } else { NodeKind::Word };
                let loc = Locator::CellToken {
                    row: r,
                    col: c,
                    position,
                    start,
                    end,
                };
                nodes.push(node(nodes.len(), kind, loc, text, value));
            }
        }
    }
    nodes
}

fn check_indices(nodes: &[Node]) -> Result<()> {
    for (i, n) in nodes.iter().enumerate() {
        if n.index != i {
            return Err(Error::Consistency(format!("node at position {i} carries index {}", n.index)));
        }
        if n.kind == NodeKind::Number && n.numeric_value.is_none() {
            return Err(Error::Consistency(format!("number node {i} has no value")));
        }
    }
    Ok(())
}

struct TableIndex {
    rows: HashMap<usize, usize>,
    cols: HashMap<usize, usize>,
    cells: HashMap<(usize, usize), usize>,
}

fn index_table(nodes: &[Node], bounds: Option<(usize, usize)>) -> Result<TableIndex> {
    let mut idx = TableIndex {
        rows: HashMap::new(),
        cols: HashMap::new(),
        cells: HashMap::new(),
    };
    let in_bounds = |r: usize, c: usize| bounds.is_none_or(|(nr, nc)| r < nr && c < nc);
    for n in nodes {
        match n.locator {
            Locator::Row { row } => {
                if !in_bounds(row, 0) {
                    return Err(Error::Consistency(format!("row node {row} outside table")));
                }
                idx.rows.insert(row, n.index);
            }
            Locator::Column { col } => {
                if !in_bounds(0, col) {
                    return Err(Error::Consistency(format!("column node {col} outside table")));
                }
                idx.cols.insert(col, n.index);
            }
            Locator::Cell { row, col } => {
                if !in_bounds(row, col) {
                    return Err(Error::Consistency(format!("cell ({row},{col}) outside table")));
                }
                idx.cells.insert((row, col), n.index);
            }
            Locator::CellToken { row, col, .. } if !in_bounds(row, col) => {
                return Err(Error::Consistency(format!("cell token ({row},{col}) outside table")));
            }
            _ => {}
        }
    }
    Ok(idx)
}

/// Parent-to-members lists for the containment hierarchy.
fn containment(nodes: &[Node]) -> Result<Vec<Vec<usize>>> {
    check_indices(nodes)?;
    let table = index_table(nodes, None)?;
    let mut question = None;
    let mut sentences = HashMap::new();
    for n in nodes {
        match n.locator {
            Locator::Question => question = Some(n.index),
            Locator::Sentence { paragraph, sentence, .. } => {
                sentences.insert((paragraph, sentence), n.index);
            }
            _ => {}
        }
    }
    let mut members = vec![Vec::new(); nodes.len()];
    for n in nodes {
        match n.locator {
            Locator::QuestionToken { .. } => {
                let q = question.ok_or_else(|| Error::Consistency("question token without question node".into()))?;
                members[q].push(n.index);
            }
            Locator::ParagraphToken { paragraph, sentence, .. } => {
                let s = sentences
                    .get(&(paragraph, sentence))
                    .ok_or_else(|| Error::Consistency(format!("token of missing sentence {paragraph}/{sentence}")))?;
                members[*s].push(n.index);
            }
            Locator::Cell { row, col } => {
                if let Some(&r) = table.rows.get(&row) {
                    members[r].push(n.index);
                }
                if let Some(&c) = table.cols.get(&col) {
                    members[c].push(n.index);
                }
            }
            Locator::CellToken { row, col, .. } => {
                let c = table
                    .cells
                    .get(&(row, col))
                    .ok_or_else(|| Error::Consistency(format!("token of missing cell ({row},{col})")))?;
                members[*c].push(n.index);
            }
            _ => {}
        }
    }
    Ok(members)
}

/// Cells are linked to their 4-neighbours, their row, their column and
/// their tokens.
pub fn build_tabular_view(nodes: &[Node], table: &Table) -> Result<ViewGraph> {
    check_indices(nodes)?;
    let idx = index_table(nodes, Some((table.n_rows(), table.n_cols())))?;
    let mut a = Adjacency::new(nodes.len());
    for (&(r, c), &i) in &idx.cells {
        for (dr, dc) in [(1, 0), (0, 1)] {
            if let Some(&j) = idx.cells.get(&(r + dr, c + dc)) {
                a.link(i, j);
            }
        }
        if let Some(&row) = idx.rows.get(&r) {
            a.link(i, row);
        }
        if let Some(&col) = idx.cols.get(&c) {
            a.link(i, col);
        }
    }
    for n in nodes {
        if let Locator::CellToken { row, col, .. } = n.locator {
            let cell = idx
                .cells
                .get(&(row, col))
                .ok_or_else(|| Error::Consistency(format!("token of missing cell ({row},{col})")))?;
            a.link(n.index, *cell);
        }
    }
    Ok(ViewGraph {
        view: ViewKind::Tabular,
        adjacency: a,
    })
}

/// Containment edges plus word-cell bridges: a text word equal to one of a
/// cell's tokens links to that cell, and its sentence (or the question
/// node) links to the cell's row and column.
pub fn build_relation_view(nodes: &[Node], doc: &HybridDocument, question_bridging: bool) -> Result<ViewGraph> {
    let idx = index_table(nodes, Some((doc.table.n_rows(), doc.table.n_cols())))?;
    let paragraphs = doc.paragraphs.len();
    if let Some(n) = nodes.iter().find(|n| {
        matches!(n.locator, Locator::Sentence { paragraph, .. } | Locator::ParagraphToken { paragraph, .. } if paragraph >= paragraphs)
    }) {
        return Err(Error::Consistency(format!("node {} refers to a missing paragraph", n.index)));
    }
    let members = containment(nodes)?;
    let mut a = Adjacency::new(nodes.len());
    for (parent, kids) in members.iter().enumerate() {
        for &k in kids {
            a.link(parent, k);
        }
    }

    let mut by_token: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
    for n in nodes {
        if let Locator::CellToken { row, col, .. } = n.locator {
            let cells = by_token.entry(n.text.as_str()).or_default();
            if !cells.contains(&(row, col)) {
                cells.push((row, col));
            }
        }
    }
    let mut question = None;
    let mut sentences = HashMap::new();
    for n in nodes {
        match n.locator {
            Locator::Question => question = Some(n.index),
            Locator::Sentence { paragraph, sentence, .. } => {
                sentences.insert((paragraph, sentence), n.index);
            }
            _ => {}
        }
    }
    for n in nodes {
        let holder = match n.locator {
            Locator::ParagraphToken { paragraph, sentence, .. } => sentences.get(&(paragraph, sentence)).copied(),
            Locator::QuestionToken { .. } if question_bridging => question,
            _ => continue,
        };
        let key = n.text.to_lowercase();
        let Some(cells) = by_token.get(key.as_str()) else { continue };
        for &(r, c) in cells {
            let cell = idx.cells[&(r, c)];
            a.link(n.index, cell);
            if let Some(h) = holder {
                if let Some(&row) = idx.rows.get(&r) {
                    a.link(h, row);
                }
                if let Some(&col) = idx.cols.get(&c) {
                    a.link(h, col);
                }
            }
        }
    }
    Ok(ViewGraph {
        view: ViewKind::Relation,
        adjacency: a,
    })
}

/// Directed edge `i -> j` whenever number `i` is strictly greater than `j`.
pub fn build_numerical_view(nodes: &[Node]) -> Result<ViewGraph> {
    check_indices(nodes)?;
    let numbers: Vec<(usize, f64)> = nodes
        .iter()
        .filter_map(|n| n.numeric_value.filter(|_| n.kind == NodeKind::Number).map(|v| (n.index, v)))
        .collect();
    let mut a = Adjacency::new(nodes.len());
    for &(i, vi) in &numbers {
        for &(j, vj) in &numbers {
            if vi > vj {
                a.set(i, j);
            }
        }
    }
    Ok(ViewGraph {
        view: ViewKind::Numerical,
        adjacency: a,
    })
}

/// Undirected: `D^-1/2 (A + I) D^-1/2`; directed: `D^-1 (A + I)` with row
/// degrees. Degrees include the self-loop.
pub fn normalize_adjacency(a: &Adjacency, directed: bool) -> Tensor {
    let n = a.size();
    let mut out = Tensor::zeros(&[n, n]);
    let degree: Vec<f64> = (0..n).map(|i| 1.0 + a.neighbours(i).filter(|&j| j != i).count() as f64).collect();
    for i in 0..n {
        for j in 0..n {
            let e = if i == j || a.get(i, j) { 1.0 } else { 0.0 };
            if e == 0.0 {
                continue;
            }
            let v = if directed {
                e / degree[i]
            } else {
                e / (degree[i] * degree[j]).sqrt()
            };
            out.set(i, j, v);
        }
    }
    out
}

/// Dense-matrix form of a graph for callers that hold raw 0/1 matrices.
pub fn normalize_matrix(m: &Tensor, directed: bool) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    if r != c {
        return Err(Error::Shape(format!("adjacency must be square, got {r}x{c}")));
    }
    let mut a = Adjacency::new(r);
    for i in 0..r {
        for j in 0..r {
            if i != j && m.get(i, j) != 0.0 {
                a.set(i, j);
            }
        }
    }
    Ok(normalize_adjacency(&a, directed))
}

pub fn build_multi_view_graph(doc: &HybridDocument, question: &Question, config: &GraphConfig) -> Result<MultiViewGraph> {
    let views_wanted = config.active_views();
    if views_wanted.is_empty() {
        return Err(Error::Config("at least one view must be enabled".into()));
    }
    let nodes = enumerate_nodes(doc, question, config.row_col_nodes);
    let mut views = Vec::with_capacity(views_wanted.len());
    for kind in views_wanted {
        views.push(match kind {
            ViewKind::Tabular => build_tabular_view(&nodes, &doc.table)?,
            ViewKind::Relation => build_relation_view(&nodes, doc, config.question_bridging)?,
            ViewKind::Numerical => build_numerical_view(&nodes)?,
        });
    }
    Ok(MultiViewGraph {
        nodes,
        views,
        config: *config,
    })
}

#[derive(Debug, Serialize)]
pub struct GraphExport<'a> {
    pub document_id: &'a str,
    pub question_id: &'a str,
    pub nodes: &'a [Node],
    /// Undirected views list each edge once as `[i, j]` with `i < j`;
    /// the numerical view lists directed `[from, to]` pairs.
    pub views: std::collections::BTreeMap<&'static str, Vec<[usize; 2]>>,
}

impl MultiViewGraph {
    pub fn export<'a>(&'a self, document_id: &'a str, question_id: &'a str) -> GraphExport<'a> {
        let views = self
            .views
            .iter()
            .map(|v| {
                let name = match v.view {
                    ViewKind::Tabular => "tabular",
                    ViewKind::Relation => "relation",
                    ViewKind::Numerical => "numerical",
                };
                (name, v.adjacency.edges(!v.view.is_directed()))
            })
            .collect();
        GraphExport {
            document_id,
            question_id,
            nodes: &self.nodes,
            views,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{AnswerType, GoldAnswer, Paragraph, Scale};

    fn doc(cells: Vec<Vec<&str>>, paragraphs: &[&str]) -> HybridDocument {
        let cells = cells.into_iter().map(|r| r.into_iter().map(String::from).collect()).collect();
        HybridDocument {
            id: "d".into(),
            table: Table::new(cells, 0, 0).unwrap(),
            paragraphs: paragraphs
                .iter()
                .enumerate()
                .map(|(i, t)| Paragraph {
                    order: i as i64,
                    text: t.to_string(),
                })
                .collect(),
            questions: vec![],
        }
    }

    fn question(text: &str) -> Question {
        Question {
            id: "q".into(),
            text: text.into(),
            answer_type: AnswerType::Span,
            gold_answer: GoldAnswer::Spans(vec![]),
            gold_scale: Scale::None,
            gold_operator: None,
            gold_derivation: None,
            answer_from: None,
        }
    }

    fn count(nodes: &[Node], pred: impl Fn(&Node) -> bool) -> usize {
        nodes.iter().filter(|n| pred(n)).count()
    }

    #[test]
    fn exhaustive_counts_for_tiny_document() {
        let d = doc(vec![vec!["abc"]], &["Hi."]);
        let nodes = enumerate_nodes(&d, &question("What?"), true);
        assert_eq!(count(&nodes, |n| n.kind == NodeKind::Question), 1);
        assert_eq!(count(&nodes, |n| matches!(n.locator, Locator::QuestionToken { .. })), 1);
        assert_eq!(count(&nodes, |n| n.kind == NodeKind::Sentence), 1);
        let para: Vec<_> = nodes.iter().filter(|n| matches!(n.locator, Locator::ParagraphToken { .. })).collect();
        assert_eq!(para.len(), 1);
        assert_eq!(para[0].text, "hi");
        assert_eq!(count(&nodes, |n| n.kind == NodeKind::Row), 1);
        assert_eq!(count(&nodes, |n| n.kind == NodeKind::Column), 1);
        assert_eq!(count(&nodes, |n| n.kind == NodeKind::Cell), 1);
        assert_eq!(count(&nodes, |n| matches!(n.locator, Locator::CellToken { .. })), 1);
        assert_eq!(nodes.len(), 8);
        for (i, n) in nodes.iter().enumerate() {
            assert_eq!(n.index, i);
        }
    }

    #[test]
    fn paragraph_numbers_become_number_nodes() {
        let d = doc(vec![vec!["a"]], &["Revenue was 340."]);
        let nodes = enumerate_nodes(&d, &question("x"), true);
        let n = nodes.iter().find(|n| n.text == "340").unwrap();
        assert_eq!(n.kind, NodeKind::Number);
        assert_eq!(n.numeric_value, Some(340.0));
    }

    #[test]
    fn one_by_one_table_has_only_containment_edges() {
        let d = doc(vec![vec!["abc def"]], &["Hi."]);
        let nodes = enumerate_nodes(&d, &question("x"), true);
        let tab = build_tabular_view(&nodes, &d.table).unwrap();
        let cell = nodes.iter().find(|n| n.kind == NodeKind::Cell).unwrap().index;
        let mut nb: Vec<NodeKind> = tab.adjacency.neighbours(cell).map(|j| nodes[j].kind).collect();
        nb.sort_by_key(|k| *k as u8);
        assert_eq!(nb, [NodeKind::Row, NodeKind::Column, NodeKind::Word, NodeKind::Word]);
        assert!(tab.adjacency.is_symmetric() && tab.adjacency.has_zero_diagonal());
    }

    #[test]
    fn tabular_view_rejects_foreign_table() {
        let d = doc(vec![vec!["a", "b"], vec!["c", "d"]], &["Hi."]);
        let nodes = enumerate_nodes(&d, &question("x"), true);
        let small = Table::new(vec![vec!["z".into()]], 0, 0).unwrap();
        assert!(matches!(build_tabular_view(&nodes, &small), Err(Error::Consistency(_))));
    }

    #[test]
    fn numerical_view_examples() {
        let d = doc(vec![vec!["2,271", "2,611"]], &["No numbers here."]);
        let nodes = enumerate_nodes(&d, &question("x"), true);
        let num = build_numerical_view(&nodes).unwrap();
        let edges = num.adjacency.edges(false);
        assert_eq!(edges.len(), 1);
        let [from, to] = edges[0];
        assert_eq!(nodes[from].numeric_value, Some(2611.0));
        assert_eq!(nodes[to].numeric_value, Some(2271.0));

        let d = doc(vec![vec!["5", "5"]], &["x."]);
        let nodes = enumerate_nodes(&d, &question("x"), true);
        assert_eq!(build_numerical_view(&nodes).unwrap().adjacency.edge_count(), 0);
    }

    #[test]
    fn normalisation_examples() {
        let zero = Adjacency::new(2);
        assert_eq!(normalize_adjacency(&zero, false), Tensor::identity(2));
        assert_eq!(normalize_adjacency(&zero, true), Tensor::identity(2));

        let mut path = Adjacency::new(3);
        path.link(0, 1);
        path.link(1, 2);
        let p = normalize_adjacency(&path, false);
        assert_eq!(p, p.transpose());
        // degrees with self-loops: 2, 3, 2
        assert!((p.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((p.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        for i in 0..3 {
            assert!(p.row_slice(i).iter().sum::<f64>() <= 1.5);
        }

        let mut one = Adjacency::new(3);
        one.set(2, 0);
        let d = normalize_adjacency(&one, true);
        for i in 0..3 {
            assert_eq!(d.row_slice(i).iter().sum::<f64>(), 1.0);
        }
        assert!(normalize_matrix(&Tensor::zeros(&[2, 3]), false).is_err());
    }

    #[test]
    fn config_controls_views_and_row_col_nodes() {
        let d = doc(vec![vec!["a", "1"], vec!["b", "2"]], &["a is 1."]);
        let q = question("what is a?");
        let full = build_multi_view_graph(&d, &q, &GraphConfig::default()).unwrap();
        assert_eq!(full.views.len(), 3);
        let cfg = GraphConfig {
            numerical_view: false,
            ..Default::default()
        };
        let g = build_multi_view_graph(&d, &q, &cfg).unwrap();
        assert_eq!(g.views.len(), 2);
        assert!(g.view(ViewKind::Numerical).is_none());
        let cfg = GraphConfig {
            row_col_nodes: false,
            ..Default::default()
        };
        let g = build_multi_view_graph(&d, &q, &cfg).unwrap();
        assert!(g.nodes.iter().all(|n| !matches!(n.kind, NodeKind::Row | NodeKind::Column)));
        let all_off = GraphConfig {
            tabular_view: false,
            relation_view: false,
            numerical_view: false,
            ..Default::default()
        };
        assert!(build_multi_view_graph(&d, &q, &all_off).is_err());
    }

    #[test]
    fn whole_cell_numerals_keep_sign() {
        let toks = cell_tokens(" (340) ");
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].3, Some(-340.0));
        assert_eq!(toks[0].0, "(340)");
    }
}
