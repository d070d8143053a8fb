//! Operator and scale classifiers, answer routing, and span tagging.

use rand::Rng;

use crate::document::{AnswerSource, AnswerType, HybridDocument, Operator, Question, Scale};
use crate::error::{Error, Result};
use crate::expression::{ArithOp, ExpressionTree};
use crate::graph::{Locator, MultiViewGraph};
use crate::kernel::{Activation, Axis, ParamStore, Session, Tensor, TwoLayer, Var};

pub const TAG_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub operator: TwoLayer,
    pub scale: TwoLayer,
    pub tagger: TwoLayer,
}

impl HeadParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            operator: TwoLayer::new(store, "heads.operator", (d, d, Operator::ALL.len()), Activation::Gelu, rng),
            scale: TwoLayer::new(store, "heads.scale", (4 * d, d, Scale::ALL.len()), Activation::Gelu, rng),
            tagger: TwoLayer::new(store, "heads.tagger", (2 * d, d, 1), Activation::Gelu, rng),
        }
    }
}

/// `1 x d` mean-pooled summaries of the final node representations.
#[derive(Debug, Clone, Copy)]
pub struct SummaryVectors {
    pub cls: Var,
    pub question: Var,
    pub table: Var,
    pub paragraph: Var,
}

fn pooled(s: &mut Session, z: Var, nodes: &[usize], what: &str) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::Consistency(format!("no {what} nodes to summarise")));
    }
    let rows = s.tape.gather_rows(z, nodes)?;
    s.tape.mean_pool(rows, Axis::Rows)
}

pub fn summarize(s: &mut Session, z: Var, graph: &MultiViewGraph) -> Result<SummaryVectors> {
    let all: Vec<usize> = (0..graph.node_count()).collect();
    Ok(SummaryVectors {
        cls: pooled(s, z, &all, "graph")?,
        question: pooled(s, z, &graph.question_nodes(), "question")?,
        table: pooled(s, z, &graph.table_nodes(), "table")?,
        paragraph: pooled(s, z, &graph.paragraph_nodes(), "paragraph")?,
    })
}

/// Logits over the ten operators, `1 x 10`.
pub fn operator_logits(s: &mut Session, heads: &HeadParams, summary: &SummaryVectors) -> Result<Var> {
    heads.operator.forward(s, summary.cls)
}

/// Logits over the five scales from `[cls : h_Q : h_T : h_P]`, `1 x 5`.
pub fn scale_logits(s: &mut Session, heads: &HeadParams, summary: &SummaryVectors) -> Result<Var> {
    let joined = s
        .tape
        .concat(&[summary.cls, summary.question, summary.table, summary.paragraph], Axis::Cols)?;
    heads.scale.forward(s, joined)
}

pub fn predict_operator(s: &mut Session, heads: &HeadParams, summary: &SummaryVectors) -> Result<Vec<f64>> {
    let l = operator_logits(s, heads, summary)?;
    let p = s.tape.softmax(l, Axis::Cols)?;
    Ok(s.tape.value(p).data().to_vec())
}

pub fn predict_scale(s: &mut Session, heads: &HeadParams, summary: &SummaryVectors) -> Result<Vec<f64>> {
    let l = scale_logits(s, heads, summary)?;
    let p = s.tape.softmax(l, Axis::Cols)?;
    Ok(s.tape.value(p).data().to_vec())
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerPath {
    SpanPath,
    TreePath,
}

pub fn route(op: Operator) -> AnswerPath {
    if op.is_span_family() {
        AnswerPath::SpanPath
    } else {
        AnswerPath::TreePath
    }
}

/// Tag logits for the taggable nodes, `T x 1`, with the node indices.
/// Each node is scored from `[z_i : h_Q]`.
pub fn tag_logits(s: &mut Session, heads: &HeadParams, z: Var, graph: &MultiViewGraph) -> Result<(Var, Vec<usize>)> {
    let nodes = graph.taggable_nodes();
    if nodes.is_empty() {
        return Err(Error::Consistency("graph has no taggable nodes".into()));
    }
    let rows = s.tape.gather_rows(z, &nodes)?;
    let question = pooled(s, z, &graph.question_nodes(), "question")?;
    let ones = s.tape.constant(Tensor::filled(&[nodes.len(), 1], 1.0));
    let question = s.tape.matmul(ones, question)?;
    let joined = s.tape.concat(&[rows, question], Axis::Cols)?;
    Ok((heads.tagger.forward(s, joined)?, nodes))
}

/// Probabilities per taggable node and the spans they yield.
pub fn tag_spans(
    s: &mut Session,
    heads: &HeadParams,
    z: Var,
    doc: &HybridDocument,
    graph: &MultiViewGraph,
) -> Result<(Vec<f64>, Vec<String>)> {
    let (logits, nodes) = tag_logits(s, heads, z, graph)?;
    let p = s.tape.sigmoid(logits)?;
    let probs = s.tape.value(p).data().to_vec();
    let tagged: Vec<bool> = probs.iter().map(|&p| p >= TAG_THRESHOLD).collect();
    let spans = extract_spans(doc, graph, &nodes, &tagged);
    Ok((probs, spans))
}

/// Maximal runs of consecutively tagged paragraph tokens within a sentence
/// become one span each (the original text between the run's ends); each
/// tagged cell yields its trimmed text. Spans are de-duplicated by
/// lowercased text, keeping first occurrences in node order.
pub fn extract_spans(doc: &HybridDocument, graph: &MultiViewGraph, nodes: &[usize], tagged: &[bool]) -> Vec<String> {
    let paragraphs = doc.ordered_paragraphs();
    let mut spans: Vec<String> = Vec::new();
    let push = |text: &str, spans: &mut Vec<String>| {
        let text = text.trim();
        if !text.is_empty() && !spans.iter().any(|s| s.to_lowercase() == text.to_lowercase()) {
            spans.push(text.to_string());
        }
    };
    // (paragraph, sentence, last position, start byte, end byte)
    let mut run: Option<(usize, usize, usize, usize, usize)> = None;
    for (&node, &on) in nodes.iter().zip(tagged) {
        match graph.nodes[node].locator {
            Locator::ParagraphToken {
                paragraph,
                sentence,
                position,
                start,
                end,
            } => {
                let extends = matches!(run, Some((p, se, last, _, _)) if on && p == paragraph && se == sentence && last + 1 == position);
                if extends {
                    let r = run.as_mut().expect("checked");
                    r.2 = position;
                    r.4 = end;
                    continue;
                }
                if let Some((p, _, _, a, b)) = run.take() {
                    push(&paragraphs[p].text[a..b], &mut spans);
                }
                if on {
                    run = Some((paragraph, sentence, position, start, end));
                }
            }
            Locator::Cell { row, col } => {
                if let Some((p, _, _, a, b)) = run.take() {
                    push(&paragraphs[p].text[a..b], &mut spans);
                }
                if on {
                    push(doc.table.cell(row, col), &mut spans);
                }
            }
            _ => {}
        }
    }
    if let Some((p, _, _, a, b)) = run.take() {
        push(&paragraphs[p].text[a..b], &mut spans);
    }
    spans
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpanAnswer {
    Spans(Vec<String>),
    Count(usize),
}

/// Shapes extracted spans into the final answer for a span-family operator.
/// Count forces the scale to `None`.
pub fn finalize_span_answer(op: Operator, spans: &[String], scale: Scale) -> Result<(SpanAnswer, Scale)> {
    match op {
        Operator::SpanInText | Operator::CellInTable => {
            Ok((SpanAnswer::Spans(spans.iter().take(1).cloned().collect()), scale))
        }
        Operator::Spans => Ok((SpanAnswer::Spans(spans.to_vec()), scale)),
        Operator::Count => Ok((SpanAnswer::Count(spans.len()), Scale::None)),
        other => Err(Error::Config(format!(
            "operator {} does not produce span answers",
            other.name()
        ))),
    }
}

/// Gold operator: the annotated one, else inferred from the answer type and
/// derivation.
pub fn infer_operator(doc: &HybridDocument, q: &Question) -> Option<Operator> {
    if let Some(op) = q.gold_operator {
        return Some(op);
    }
    match q.answer_type {
        AnswerType::Spans => Some(Operator::Spans),
        AnswerType::Count => Some(Operator::Count),
        AnswerType::Span => Some(match q.source() {
            AnswerSource::Table => Operator::CellInTable,
            AnswerSource::Text => Operator::SpanInText,
            AnswerSource::TableText => {
                let gold = q.gold_spans().first().map(|s| s.trim().to_lowercase()).unwrap_or_default();
                let in_table = doc.table.cells.iter().flatten().any(|c| c.trim().to_lowercase() == gold);
                if in_table {
                    Operator::CellInTable
                } else {
                    Operator::SpanInText
                }
            }
        }),
        AnswerType::Arithmetic => {
            let tree = crate::expression::parse_derivation(q.gold_derivation.as_deref()?).ok()?;
            Some(arithmetic_operator(&tree))
        }
    }
}

fn is_change_ratio(tree: &ExpressionTree) -> bool {
    match tree {
        ExpressionTree::Op {
            op: ArithOp::Div,
            left,
            right,
        } => matches!(left.as_ref(), ExpressionTree::Op { op: ArithOp::Sub, right: base, .. } if base.same_expression(right)),
        ExpressionTree::Op {
            op: ArithOp::Mul,
            left,
            right,
        } => is_change_ratio(left) || is_change_ratio(right),
        _ => false,
    }
}

/// Operator class of an arithmetic derivation, read from its root. A
/// difference divided by its own subtrahend (optionally times a constant)
/// is a change ratio.
pub fn arithmetic_operator(tree: &ExpressionTree) -> Operator {
    if is_change_ratio(tree) {
        return Operator::ChangeRatio;
    }
    match tree {
        ExpressionTree::Op { op, .. } => match op {
            ArithOp::Add => Operator::Sum,
            ArithOp::Sub => Operator::Difference,
            ArithOp::Mul => Operator::Multiplication,
            ArithOp::Div => Operator::Division,
            ArithOp::Avg => Operator::Average,
        },
        ExpressionTree::Leaf { .. } => Operator::Sum,
    }
}

fn ascii_find_all(haystack: &str, needle: &str) -> Vec<usize> {
    let h = haystack.to_ascii_lowercase();
    let n = needle.to_ascii_lowercase();
    if n.is_empty() {
        return Vec::new();
    }
    h.match_indices(&n).map(|(i, _)| i).collect()
}

/// Binary tag targets over [`MultiViewGraph::taggable_nodes`].
///
/// A cell is positive when its trimmed text equals a gold span (case
/// insensitive). A paragraph token is positive when its byte span overlaps
/// a case-insensitive occurrence of a gold span that starts and ends on
/// token boundaries.
pub fn gold_tag_labels(doc: &HybridDocument, q: &Question, graph: &MultiViewGraph) -> Vec<f64> {
    let targets: Vec<String> = match q.answer_type {
        AnswerType::Count => q.count_items(),
        _ => q.gold_spans().to_vec(),
    };
    let targets: Vec<String> = targets.iter().map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
    let paragraphs = doc.ordered_paragraphs();
    let nodes = graph.taggable_nodes();

    let mut starts: Vec<Vec<usize>> = vec![Vec::new(); paragraphs.len()];
    let mut ends: Vec<Vec<usize>> = vec![Vec::new(); paragraphs.len()];
    for &n in &nodes {
        if let Locator::ParagraphToken { paragraph, start, end, .. } = graph.nodes[n].locator {
            starts[paragraph].push(start);
            ends[paragraph].push(end);
        }
    }
    let mut occurrences: Vec<Vec<(usize, usize)>> = vec![Vec::new(); paragraphs.len()];
    for (p, para) in paragraphs.iter().enumerate() {
        for t in &targets {
            for a in ascii_find_all(&para.text, t) {
                let b = a + t.len();
                if starts[p].contains(&a) && ends[p].contains(&b) {
                    occurrences[p].push((a, b));
                }
            }
        }
    }

    nodes
        .iter()
        .map(|&n| {
            let hit = match graph.nodes[n].locator {
                Locator::ParagraphToken { paragraph, start, end, .. } => {
                    occurrences[paragraph].iter().any(|&(a, b)| start < b && a < end)
                }
                Locator::Cell { row, col } => {
                    let text = doc.table.cell(row, col).trim().to_lowercase();
                    targets.iter().any(|t| t.to_lowercase() == text)
                }
                _ => false,
            };
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Constant `1 x n` one-hot row.
pub fn one_hot(n: usize, i: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, n]);
    t.set(0, i, 1.0);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{GoldAnswer, Paragraph, Table};
    use crate::graph::{build_multi_view_graph, GraphConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(paragraph: &str) -> HybridDocument {
        let cells = vec![
            vec!["".to_string(), "2017".to_string()],
            vec!["LinkedIn".to_string(), "2,271".to_string()],
            vec!["Other".to_string(), "2,611".to_string()],
        ];
        HybridDocument {
            id: "d".into(),
            table: Table::new(cells, 1, 1).unwrap(),
            paragraphs: vec![Paragraph {
                order: 0,
                text: paragraph.into(),
            }],
            questions: vec![],
        }
    }

    fn question(kind: AnswerType, answer: GoldAnswer) -> Question {
        Question {
            id: "q".into(),
            text: "Which?".into(),
            answer_type: kind,
            gold_answer: answer,
            gold_scale: Scale::None,
            gold_operator: None,
            gold_derivation: None,
            answer_from: None,
        }
    }

    fn spans_q() -> Question {
        question(AnswerType::Spans, GoldAnswer::Spans(vec![]))
    }

    #[test]
    fn summaries_of_constant_rows_are_constant() {
        let d = doc("Revenue grew.");
        let g = build_multi_view_graph(&d, &spans_q(), &GraphConfig::default()).unwrap();
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let z = s.tape.constant(Tensor::filled(&[g.node_count(), 3], 0.25));
        let sum = summarize(&mut s, z, &g).unwrap();
        for v in [sum.cls, sum.question, sum.table, sum.paragraph] {
            assert_eq!(s.tape.value(v).data(), &[0.25, 0.25, 0.25]);
        }
    }

    #[test]
    fn zero_weight_classifiers_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let heads = HeadParams::new(&mut store, 3, &mut rng);
        let second = [heads.operator.second.weight, heads.scale.second.weight];
        for id in second {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let d = doc("Revenue grew.");
        let g = build_multi_view_graph(&d, &spans_q(), &GraphConfig::default()).unwrap();
        let mut s = Session::inference(&store);
        let z = s.tape.constant(Tensor::filled(&[g.node_count(), 3], 0.5));
        let sum = summarize(&mut s, z, &g).unwrap();
        let op = predict_operator(&mut s, &heads, &sum).unwrap();
        let sc = predict_scale(&mut s, &heads, &sum).unwrap();
        assert!(op.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert!(sc.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn routing_partitions_operators() {
        assert_eq!(route(Operator::Count), AnswerPath::SpanPath);
        assert_eq!(route(Operator::ChangeRatio), AnswerPath::TreePath);
        let spans = Operator::ALL.iter().filter(|&&o| route(o) == AnswerPath::SpanPath).count();
        assert_eq!((spans, Operator::ALL.len() - spans), (4, 6));
    }

    fn tags_for(g: &MultiViewGraph, on: &[&str]) -> (Vec<usize>, Vec<bool>) {
        let nodes = g.taggable_nodes();
        let tags = nodes
            .iter()
            .map(|&n| on.contains(&g.nodes[n].text.as_str()))
            .collect();
        (nodes, tags)
    }

    #[test]
    fn runs_become_spans() {
        let d = doc("Revenue from LinkedIn grew.");
        let g = build_multi_view_graph(&d, &spans_q(), &GraphConfig::default()).unwrap();
        let (nodes, tags) = tags_for(&g, &["from", "linkedin"]);
        assert_eq!(extract_spans(&d, &g, &nodes, &tags), vec!["from LinkedIn"]);
        let (nodes, tags) = tags_for(&g, &[]);
        assert!(extract_spans(&d, &g, &nodes, &tags).is_empty());
    }

    #[test]
    fn tagged_cell_gives_its_text_and_duplicates_collapse() {
        let d = doc("LinkedIn grew.");
        let g = build_multi_view_graph(&d, &spans_q(), &GraphConfig::default()).unwrap();
        let nodes = g.taggable_nodes();
        let tags: Vec<bool> = nodes
            .iter()
            .map(|&n| {
                matches!(g.nodes[n].locator, Locator::Cell { row: 2, col: 1 } | Locator::Cell { row: 1, col: 0 })
                    || g.nodes[n].text == "linkedin"
            })
            .collect();
        assert_eq!(extract_spans(&d, &g, &nodes, &tags), vec!["LinkedIn", "2,611"]);
    }

    #[test]
    fn span_answers_take_the_right_shape() {
        let spans = vec!["LinkedIn".to_string(), "Other".to_string()];
        assert_eq!(
            finalize_span_answer(Operator::Spans, &spans, Scale::Million).unwrap(),
            (SpanAnswer::Spans(spans.clone()), Scale::Million)
        );
        assert_eq!(
            finalize_span_answer(Operator::SpanInText, &spans, Scale::None).unwrap().0,
            SpanAnswer::Spans(vec!["LinkedIn".into()])
        );
        let three = vec!["a".to_string(), "b".into(), "c".into()];
        assert_eq!(
            finalize_span_answer(Operator::Count, &three, Scale::Thousand).unwrap(),
            (SpanAnswer::Count(3), Scale::None)
        );
        assert_eq!(
            finalize_span_answer(Operator::CellInTable, &[], Scale::None).unwrap().0,
            SpanAnswer::Spans(vec![])
        );
        assert!(finalize_span_answer(Operator::Sum, &spans, Scale::None).is_err());
    }

    #[test]
    fn gold_labels_mark_cells_and_token_aligned_text() {
        let d = doc("Revenue from LinkedIn grew, unlike linkedinx.");
        let q = question(AnswerType::Span, GoldAnswer::Spans(vec!["LinkedIn".into()]));
        let g = build_multi_view_graph(&d, &q, &GraphConfig::default()).unwrap();
        let labels = gold_tag_labels(&d, &q, &g);
        let positive: Vec<String> = g
            .taggable_nodes()
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l > 0.5)
            .map(|(&n, _)| format!("{:?}", g.nodes[n].kind))
            .collect();
        assert_eq!(positive, vec!["Word", "Cell"]);
    }

    #[test]
    fn operator_inference() {
        let d = doc("x.");
        let mut q = question(AnswerType::Arithmetic, GoldAnswer::Number(0.1497));
        for (deriv, op) in [
            ("/ - 2611 2271 2271", Operator::ChangeRatio),
            ("* / - 2611 2271 2271 100", Operator::ChangeRatio),
            ("/ - 2611 2271 2611", Operator::Division),
            ("- 2611 2271", Operator::Difference),
            ("avg 2611 2271", Operator::Average),
            ("+ 1 2", Operator::Sum),
            ("* 2 3", Operator::Multiplication),
        ] {
            q.gold_derivation = Some(deriv.into());
            assert_eq!(infer_operator(&d, &q), Some(op), "{deriv}");
        }
        let q = question(AnswerType::Span, GoldAnswer::Spans(vec!["Other".into()]));
        assert_eq!(infer_operator(&d, &q), Some(Operator::CellInTable));
        let q = question(AnswerType::Span, GoldAnswer::Spans(vec!["x".into()]));
        assert_eq!(infer_operator(&d, &q), Some(Operator::SpanInText));
    }
}
