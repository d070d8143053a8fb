//! Random generators shared by tests, benches and the acceptance suite.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::document::{AnswerType, GoldAnswer, HybridDocument, Paragraph, Question, Scale, Table};
use crate::expression::{ArithOp, ExpressionTree};

const WORDS: &[&str] = &[
    "revenue", "cost", "linkedin", "other", "total", "segment", "growth", "cloud", "net", "income", "expense",
    "office", "gaming", "search",
];

const NUMERALS: &[&str] = &["2,271", "2,611", "14.5", "(340)", "$12", "7", "7", "0", "31%", "1,000"];

fn word<R: Rng>(rng: &mut R) -> String {
    if rng.random_bool(0.3) {
        NUMERALS.choose(rng).copied().unwrap_or("1").to_string()
    } else {
        WORDS.choose(rng).copied().unwrap_or("x").to_string()
    }
}

fn cell_text<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..10) {
        0 => String::new(),
        1..=3 => NUMERALS.choose(rng).copied().unwrap_or("1").to_string(),
        4 => format!("{} {}", word(rng), word(rng)),
        _ => WORDS.choose(rng).copied().unwrap_or("x").to_string(),
    }
}

fn sentence<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(2..=6);
    let words: Vec<String> = (0..n).map(|_| word(rng)).collect();
    let mut s = words.join(" ");
    let c = s.remove(0);
    s.insert_str(0, &c.to_uppercase().to_string());
    s.push('.');
    s
}

/// A valid document with a `rows x cols` table (2 to 4 each), one or two
/// paragraphs of one to three sentences, and one span question. Text draws
/// from a small vocabulary shared with the cells, so word-cell matches and
/// duplicate numbers are common.
pub fn random_document<R: Rng>(rng: &mut R, id: &str) -> HybridDocument {
    let rows = rng.random_range(2..=4);
    let cols = rng.random_range(2..=4);
    let cells: Vec<Vec<String>> = (0..rows).map(|_| (0..cols).map(|_| cell_text(rng)).collect()).collect();
    let paragraphs = (0..rng.random_range(1..=2))
        .map(|p| {
            let text: Vec<String> = (0..rng.random_range(1..=3)).map(|_| sentence(rng)).collect();
            Paragraph {
                order: p as i64 + 1,
                text: text.join(" "),
            }
        })
        .collect();
    let q_words: Vec<String> = (0..rng.random_range(2..=5)).map(|_| word(rng)).collect();
    let question = Question {
        id: format!("{id}-q"),
        text: format!("What is the {}?", q_words.join(" ")),
        answer_type: AnswerType::Span,
        gold_answer: GoldAnswer::Spans(vec![WORDS.choose(rng).copied().unwrap_or("x").to_string()]),
        gold_scale: Scale::None,
        gold_operator: None,
        gold_derivation: None,
        answer_from: None,
    };
    HybridDocument {
        id: id.to_string(),
        table: Table {
            cells,
            header_rows: 1,
            header_cols: 1,
        },
        paragraphs,
        questions: vec![question],
    }
}

fn leaf_value<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..8) {
        0 => 0.0,
        1 => rng.random_range(-50..50) as f64,
        2 => 100.0,
        3 => 1.0,
        4 => (rng.random_range(-1e6..1e6) * 100.0_f64).round() / 100.0,
        _ => rng.random_range(-1e4..1e4),
    }
}

/// A random expression tree of depth at most `max_depth`. Leaves include
/// zero often enough that divisions by zero occur.
pub fn random_tree<R: Rng>(rng: &mut R, max_depth: usize) -> ExpressionTree {
    if max_depth == 0 || rng.random_bool(0.3) {
        return ExpressionTree::leaf(leaf_value(rng));
    }
    let op = *ArithOp::ALL.choose(rng).unwrap_or(&ArithOp::Add);
    let left = random_tree(rng, max_depth - 1);
    let right = random_tree(rng, max_depth - 1);
    ExpressionTree::op(op, left, right)
}

/// A multiset of one to twelve numbers drawn from a narrow range so that
/// duplicates are frequent; occasionally every value is equal.
pub fn random_numbers<R: Rng>(rng: &mut R) -> Vec<f64> {
    let n = rng.random_range(1..=12);
    if rng.random_bool(0.15) {
        let v = rng.random_range(-5..5) as f64;
        return vec![v; n];
    }
    (0..n).map(|_| rng.random_range(-5..5) as f64 * 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_documents_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..200 {
            let doc = random_document(&mut rng, &format!("d{i}"));
            doc.validate().unwrap();
            assert!(doc.table.n_rows() <= 4 && doc.table.n_cols() <= 4);
            assert!(doc.paragraphs.len() <= 2);
        }
    }

    #[test]
    fn random_trees_respect_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut deepest = 0;
        for _ in 0..500 {
            let t = random_tree(&mut rng, 5);
            assert!(t.depth() <= 5);
            deepest = deepest.max(t.depth());
        }
        assert_eq!(deepest, 5);
    }
}
