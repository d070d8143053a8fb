//! Finite-difference checks of every parameterised operation and of the
//! full training loss on toy sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{DecoderParams, Vocab, DEFAULT_CONSTANTS, DEFAULT_MAX_OPS};
use crate::document::{AnswerSource, AnswerType, GoldAnswer, HybridDocument, Paragraph, Question, Scale, Table};
use crate::encoder::{
    gcn_view, graph_transformer, init_node_features, multi_view_attention, EncoderConfig, EncoderParams,
    LAYER_NORM_EPS,
};
use crate::error::Result;
use crate::expression::parse_derivation;
use crate::graph::{build_multi_view_graph, normalize_adjacency, GraphConfig, MultiViewGraph};
use crate::heads::{operator_logits, scale_logits, summarize, tag_logits, HeadParams};
use crate::kernel::{grad_check, Axis, GradCheckReport, GruCell, Linear, ParamId, ParamStore, Session, Tensor, Var};
use crate::model::{LossToggles, Model, ModelConfig};

/// Tolerance for checks without GELU.
pub const SMOOTH_TOLERANCE: f64 = 1e-4;
/// Tolerance for checks through a GELU.
pub const GELU_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

pub const SUITE_DIM: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub worst: Option<String>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Fixed pseudo-random weights `C` so that `sum(Y ⊙ C)` exercises every
/// output coordinate differently.
fn probe(s: &mut Session, y: Var, salt: u64) -> Result<Var> {
    let (r, c) = s.tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let w: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = s.tape.constant(Tensor::new(vec![r, c], w)?);
    let prod = s.tape.mul(y, w)?;
    s.tape.sum(prod)
}

fn random_input<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R) -> ParamId {
    store.normal(name, &[rows, cols], 1.0, rng)
}

/// A 2x2 table and a one-word paragraph with one arithmetic and one span
/// question. Without row and column nodes each graph has eight nodes.
pub fn toy_document() -> HybridDocument {
    let q = |id: &str, answer_type, gold_answer, derivation: Option<&str>| Question {
        id: id.into(),
        text: "?".into(),
        answer_type,
        gold_answer,
        gold_scale: Scale::None,
        gold_operator: None,
        gold_derivation: derivation.map(str::to_string),
        answer_from: Some(AnswerSource::Text),
    };
    HybridDocument {
        id: "toy".into(),
        table: Table {
            cells: vec![vec![String::new(), String::new()], vec![String::new(), "3".into()]],
            header_rows: 1,
            header_cols: 1,
        },
        paragraphs: vec![Paragraph {
            order: 1,
            text: "7.".into(),
        }],
        questions: vec![
            q("toy-arith", AnswerType::Arithmetic, GoldAnswer::Number(4.0), Some("- 7 3")),
            q("toy-span", AnswerType::Span, GoldAnswer::Spans(vec!["7".into()]), None),
        ],
    }
}

pub fn toy_graph_config() -> GraphConfig {
    GraphConfig {
        row_col_nodes: false,
        ..GraphConfig::default()
    }
}

fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig {
        dim: SUITE_DIM,
        hash_buckets: 32,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

fn toy_graph() -> Result<MultiViewGraph> {
    let doc = toy_document();
    build_multi_view_graph(&doc, &doc.questions[0], &toy_graph_config())
}

fn entry(name: &'static str, tolerance: f64, report: GradCheckReport) -> SuiteEntry {
    SuiteEntry {
        name,
        max_rel_error: report.max_rel_error,
        tolerance,
        coordinates: report.coordinates,
        worst: report.worst.map(|(n, k)| format!("{n}[{k}]")),
    }
}

fn check<F>(store: &mut ParamStore, f: F, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(store, &ids, f, STEP, seed)
}

/// Runs every check. All randomness derives from `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let d = SUITE_DIM;
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    {
        let mut store = ParamStore::new();
        let x = random_input(&mut store, "x", n, d, &mut rng);
        let lin = Linear::new(&mut store, "linear", d, 5, &mut rng);
        let r = check(
            &mut store,
            |s| {
                let x = s.param(x);
                let y = lin.forward(s, x)?;
                probe(s, y, 1)
            },
            seed,
        )?;
        out.push(entry("linear", SMOOTH_TOLERANCE, r));
    }

    {
        let mut store = ParamStore::new();
        let x = random_input(&mut store, "x", 1, 3 * d, &mut rng);
        let h = random_input(&mut store, "h", 1, d, &mut rng);
        let gru = GruCell::new(&mut store, "gru", 3 * d, d, &mut rng);
        let r = check(
            &mut store,
            |s| {
                let x = s.param(x);
                let h0 = s.param(h);
                let h1 = gru.forward(s, x, h0)?;
                let h2 = gru.forward(s, x, h1)?;
                probe(s, h2, 2)
            },
            seed,
        )?;
        out.push(entry("gru_cell", SMOOTH_TOLERANCE, r));
    }

    let graph = toy_graph()?;
    let nodes = graph.node_count();

    {
        let mut store = ParamStore::new();
        let x = random_input(&mut store, "x", nodes, d, &mut rng);
        let enc = EncoderParams::new(&mut store, toy_encoder_config(), graph.views.len(), &mut rng);
        let view = enc.views[0];
        let a_hat = normalize_adjacency(&graph.views[0].adjacency, false);
        let r = grad_check(
            &mut store,
            &[x, view.first, view.second],
            |s| {
                let a = s.tape.constant(a_hat.clone());
                let x = s.param(x);
                let y = gcn_view(s, a, x, &view, 0.0)?;
                probe(s, y, 3)
            },
            STEP,
            seed,
        )?;
        out.push(entry("gcn_view", SMOOTH_TOLERANCE, r));
    }

    {
        let mut store = ParamStore::new();
        let x = random_input(&mut store, "x", n, d, &mut rng);
        let gain = random_input(&mut store, "gain", 1, d, &mut rng);
        let bias = random_input(&mut store, "bias", 1, d, &mut rng);
        let r = check(
            &mut store,
            |s| {
                let x = s.param(x);
                let ln = s.tape.layer_norm(x, Axis::Cols, LAYER_NORM_EPS)?;
                let g = s.param(gain);
                let b = s.param(bias);
                let y = s.tape.mul(ln, g)?;
                let y = s.tape.add(y, b)?;
                probe(s, y, 4)
            },
            seed,
        )?;
        out.push(entry("layer_norm", SMOOTH_TOLERANCE, r));
    }

    {
        let k = 3;
        let mut store = ParamStore::new();
        let views: Vec<ParamId> = (0..k)
            .map(|v| random_input(&mut store, &format!("view{v}"), n, d, &mut rng))
            .collect();
        let queries = random_input(&mut store, "queries", k * d, k, &mut rng);
        let r = check(
            &mut store,
            |s| {
                let vs: Vec<Var> = views.iter().map(|&v| s.param(v)).collect();
                let q = s.param(queries);
                let (z, alpha) = multi_view_attention(s, &vs, Some(q))?;
                let pz = probe(s, z, 5)?;
                let pa = probe(s, alpha, 6)?;
                s.tape.add(pz, pa)
            },
            seed,
        )?;
        out.push(entry("multi_view_attention", SMOOTH_TOLERANCE, r));
    }

    {
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, toy_encoder_config(), graph.views.len(), &mut rng);
        let ids = [enc.embeddings, enc.separator, enc.empty_cell, enc.cell_mlp.first.weight, enc.cell_mlp.second.weight];
        let r = grad_check(
            &mut store,
            &ids,
            |s| {
                let x = init_node_features(s, &graph, &enc)?;
                probe(s, x, 7)
            },
            STEP,
            seed,
        )?;
        out.push(entry("node_features", SMOOTH_TOLERANCE, r));
    }

    {
        let mut store = ParamStore::new();
        let x = random_input(&mut store, "x", nodes, d, &mut rng);
        let enc = EncoderParams::new(&mut store, toy_encoder_config(), graph.views.len(), &mut rng);
        let mut ids = vec![x, enc.view_queries, enc.norm1.0, enc.norm1.1, enc.norm2.0, enc.norm2.1];
        ids.extend(enc.views.iter().flat_map(|v| [v.first, v.second]));
        ids.extend([enc.ffn.first.weight, enc.ffn.second.weight]);
        let r = grad_check(
            &mut store,
            &ids,
            |s| {
                let x = s.param(x);
                let e = graph_transformer(s, &graph, x, &enc)?;
                probe(s, e.output, 8)
            },
            STEP,
            seed,
        )?;
        out.push(entry("graph_transformer", GELU_TOLERANCE, r));
    }

    {
        let mut store = ParamStore::new();
        let z = random_input(&mut store, "z", nodes, d, &mut rng);
        let heads = HeadParams::new(&mut store, d, &mut rng);
        let r = check(
            &mut store,
            |s| {
                let z = s.param(z);
                let summary = summarize(s, z, &graph)?;
                let op = operator_logits(s, &heads, &summary)?;
                let sc = scale_logits(s, &heads, &summary)?;
                let (tag, _) = tag_logits(s, &heads, z, &graph)?;
                let a = probe(s, op, 9)?;
                let b = probe(s, sc, 10)?;
                let c = probe(s, tag, 11)?;
                let ab = s.tape.add(a, b)?;
                s.tape.add(ab, c)
            },
            seed,
        )?;
        out.push(entry("heads", GELU_TOLERANCE, r));
    }

    {
        let mut store = ParamStore::new();
        let z = random_input(&mut store, "z", nodes, d, &mut rng);
        let dec = DecoderParams::new(&mut store, d, &DEFAULT_CONSTANTS, DEFAULT_MAX_OPS, &mut rng);
        let vocab = Vocab::build(&graph, &DEFAULT_CONSTANTS);
        let tree = parse_derivation("* - 7 3 / 3 100")?;
        let gold = vocab.encode_tree(&tree)?;
        let r = check(
            &mut store,
            |s| {
                let z = s.param(z);
                let inputs = dec.prepare(s, z, &vocab)?;
                dec.teacher_forced_nll(s, &inputs, &gold)
            },
            seed,
        )?;
        out.push(entry("tree_decoder", SMOOTH_TOLERANCE, r));
    }

    {
        let config = ModelConfig {
            graph: toy_graph_config(),
            encoder: toy_encoder_config(),
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, seed)?;
        let docs = vec![toy_document()];
        let examples = model.prepare_examples(&docs)?;
        let mut store = std::mem::take(&mut model.store);
        let toggles = LossToggles::default();
        let r = check(
            &mut store,
            |s| {
                let mut total = None;
                for ex in &examples {
                    let (l, _) = model.example_loss(s, ex, &toggles)?;
                    total = Some(match total {
                        None => l,
                        Some(t) => s.tape.add(t, l)?,
                    });
                }
                Ok(total.expect("toy document has questions"))
            },
            seed,
        )?;
        out.push(entry("full_loss", GELU_TOLERANCE, r));
    }

    Ok(out)
}
