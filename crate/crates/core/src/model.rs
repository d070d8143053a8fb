//! The full question-answering model: graph construction, encoding, the
//! classifier heads and the tree decoder behind one parameter store.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeMode, DecoderParams, Vocab, DEFAULT_CONSTANTS, DEFAULT_MAX_OPS};
use crate::document::{HybridDocument, Operator, Question, Scale};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{Candidates, Prediction};
use crate::expression::{evaluate, parse_derivation, AnswerValue};
use crate::graph::{build_multi_view_graph, GraphConfig, MultiViewGraph};
use crate::heads::{
    argmax, finalize_span_answer, gold_tag_labels, infer_operator, operator_logits, route, scale_logits, summarize,
    tag_logits, tag_spans, AnswerPath, HeadParams, SpanAnswer,
};
use crate::kernel::{read_checkpoint, write_checkpoint, Axis, ParamStore, Session, Tensor, Var};

/// Name of the checkpoint tensor holding the JSON model configuration, one
/// byte per element.
pub const CONFIG_TENSOR: &str = "meta.config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    pub encoder: EncoderConfig,
    pub constants: Vec<f64>,
    pub max_ops: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            encoder: EncoderConfig::default(),
            constants: DEFAULT_CONSTANTS.to_vec(),
            max_ops: DEFAULT_MAX_OPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub op: bool,
    pub scale: bool,
    pub tree: bool,
    pub tag: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            op: true,
            scale: true,
            tree: true,
            tag: true,
        }
    }
}

/// Loss components of one example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub op: f64,
    pub scale: f64,
    pub tree: f64,
    pub tag: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.op + self.scale + self.tree + self.tag
    }
}

/// A question with its graph and supervision targets.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub document: usize,
    pub question: usize,
    pub graph: MultiViewGraph,
    pub vocab: Vocab,
    pub operator: Operator,
    pub scale: Scale,
    pub tree_tokens: Option<Vec<usize>>,
    pub tag_labels: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictOptions {
    pub mode: DecodeMode,
    pub gold_operator: bool,
    pub gold_scale: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam(3),
            gold_operator: false,
            gold_scale: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
    pub decoder: DecoderParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let views = config.graph.active_views().len();
        if views == 0 {
            return Err(Error::Config("at least one view must be enabled".into()));
        }
        if config.encoder.dim == 0 || config.encoder.hash_buckets == 0 {
            return Err(Error::Config("dimension and bucket count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.encoder.dim;
        let encoder = EncoderParams::new(&mut store, config.encoder, views, &mut rng);
        let heads = HeadParams::new(&mut store, d, &mut rng);
        let decoder = DecoderParams::new(&mut store, d, &config.constants, config.max_ops, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            heads,
            decoder,
        })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = self.store.clone();
        let n = json.len();
        store.add(
            CONFIG_TENSOR,
            Tensor::new(vec![n], json.into_iter().map(f64::from).collect())?,
        );
        write_checkpoint(&store, w)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let loaded = read_checkpoint(r)?;
        let meta = loaded
            .find(CONFIG_TENSOR)
            .ok_or_else(|| Error::Checkpoint(format!("missing {CONFIG_TENSOR} tensor")))?;
        let bytes: Vec<u8> = loaded.value(meta).data().iter().map(|&b| b as u8).collect();
        let config: ModelConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        if loaded.len() != model.store.len() + 1 {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len() - 1,
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let src = loaded
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let value = loaded.value(src);
            if value.shape() != model.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn graph(&self, doc: &HybridDocument, q: &Question) -> Result<MultiViewGraph> {
        build_multi_view_graph(doc, q, &self.config.graph)
    }

    /// Builds the graph and supervision targets of one question.
    pub fn prepare_example(&self, docs: &[HybridDocument], document: usize, question: usize) -> Result<TrainingExample> {
        let doc = &docs[document];
        let q = &doc.questions[question];
        let graph = self.graph(doc, q)?;
        let vocab = Vocab::build(&graph, &self.config.constants);
        let operator = infer_operator(doc, q)
            .ok_or_else(|| Error::Data(format!("question {} has no operator or derivation", q.id)))?;
        let tree_tokens = if operator.is_arithmetic() {
            let derivation = q
                .gold_derivation
                .as_deref()
                .ok_or_else(|| Error::Data(format!("arithmetic question {} has no derivation", q.id)))?;
            let tree = parse_derivation(derivation)?;
            if tree.operator_count() > self.config.max_ops {
                return Err(Error::Data(format!(
                    "derivation of {} uses {} operators, more than {}",
                    q.id,
                    tree.operator_count(),
                    self.config.max_ops
                )));
            }
            Some(vocab.encode_tree(&tree).map_err(|e| Error::Data(format!("question {}: {e}", q.id)))?)
        } else {
            None
        };
        let tag_labels = operator.is_span_family().then(|| gold_tag_labels(doc, q, &graph));
        Ok(TrainingExample {
            document,
            question,
            graph,
            vocab,
            operator,
            scale: q.gold_scale,
            tree_tokens,
            tag_labels,
        })
    }

    pub fn prepare_examples(&self, docs: &[HybridDocument]) -> Result<Vec<TrainingExample>> {
        let mut out = Vec::new();
        for (d, doc) in docs.iter().enumerate() {
            for q in 0..doc.questions.len() {
                out.push(self.prepare_example(docs, d, q)?);
            }
        }
        Ok(out)
    }

    /// `L_op + L_scale + L_tree + L_tag` for one example, restricted to the
    /// enabled components. `L_tree` applies to arithmetic questions and
    /// `L_tag` (mean binary cross-entropy over taggable nodes) to span
    /// questions.
    pub fn example_loss(&self, s: &mut Session, ex: &TrainingExample, toggles: &LossToggles) -> Result<(Var, LossParts)> {
        let enc = encode(s, &ex.graph, &self.encoder)?;
        let z = enc.output;
        let mut terms = Vec::new();
        let mut parts = LossParts::default();
        if toggles.op || toggles.scale {
            let summary = summarize(s, z, &ex.graph)?;
            if toggles.op {
                let l = operator_logits(s, &self.heads, &summary)?;
                let lp = s.tape.log_softmax(l, Axis::Cols)?;
                let pick = s.tape.pick(lp, 0, ex.operator.index())?;
                let nll = s.tape.scale(pick, -1.0)?;
                parts.op = s.tape.scalar(nll);
                terms.push(nll);
            }
            if toggles.scale {
                let l = scale_logits(s, &self.heads, &summary)?;
                let lp = s.tape.log_softmax(l, Axis::Cols)?;
                let pick = s.tape.pick(lp, 0, ex.scale.index())?;
                let nll = s.tape.scale(pick, -1.0)?;
                parts.scale = s.tape.scalar(nll);
                terms.push(nll);
            }
        }
        if toggles.tree {
            if let Some(tokens) = &ex.tree_tokens {
                let inputs = self.decoder.prepare(s, z, &ex.vocab)?;
                let nll = self.decoder.teacher_forced_nll(s, &inputs, tokens)?;
                parts.tree = s.tape.scalar(nll);
                terms.push(nll);
            }
        }
        if toggles.tag {
            if let Some(labels) = &ex.tag_labels {
                let (logits, _) = tag_logits(s, &self.heads, z, &ex.graph)?;
                let bce = s.tape.bce_with_logits(logits, labels)?;
                let mean = s.tape.scale(bce, 1.0 / labels.len() as f64)?;
                parts.tag = s.tape.scalar(mean);
                terms.push(mean);
            }
        }
        let total = if terms.is_empty() {
            s.tape.constant(Tensor::scalar(0.0))
        } else {
            let joined = s.tape.concat(&terms, Axis::Cols)?;
            s.tape.sum(joined)?
        };
        Ok((total, parts))
    }

    /// Answers one question. Both the span and the arithmetic candidate are
    /// computed and returned alongside the routed answer.
    pub fn predict_question(&self, doc: &HybridDocument, q: &Question, opts: &PredictOptions) -> Result<Prediction> {
        let graph = self.graph(doc, q)?;
        let mut s = Session::inference(&self.store);
        let z = encode(&mut s, &graph, &self.encoder)?.output;
        let summary = summarize(&mut s, z, &graph)?;
        let op_logits = operator_logits(&mut s, &self.heads, &summary)?;
        let sc_logits = scale_logits(&mut s, &self.heads, &summary)?;
        let mut operator = Operator::from_index(argmax(s.tape.value(op_logits).data())).expect("ten operators");
        let mut scale = Scale::from_index(argmax(s.tape.value(sc_logits).data())).expect("five scales");
        if opts.gold_operator {
            if let Some(op) = infer_operator(doc, q) {
                operator = op;
            }
        }
        if opts.gold_scale {
            scale = q.gold_scale;
        }

        let (_, spans) = tag_spans(&mut s, &self.heads, z, doc, &graph)?;
        let vocab = Vocab::build(&graph, &self.config.constants);
        let arithmetic = match self.decoder.prepare(&mut s, z, &vocab) {
            Ok(inputs) => self
                .decoder
                .decode_tree(&mut s, &inputs, opts.mode)
                .ok()
                .and_then(|d| evaluate(&d.tree).ok()),
            Err(_) => None,
        };

        let (answer, scale) = match route(operator) {
            AnswerPath::SpanPath => match finalize_span_answer(operator, &spans, scale)? {
                (SpanAnswer::Spans(v), sc) => (AnswerValue::Spans(v), sc),
                (SpanAnswer::Count(n), sc) => (AnswerValue::Number(n as f64), sc),
            },
            AnswerPath::TreePath => match arithmetic {
                Some(v) => (AnswerValue::Number(v), scale),
                None => (AnswerValue::Spans(Vec::new()), scale),
            },
        };
        Ok(Prediction {
            question_id: q.id.clone(),
            operator,
            scale,
            answer,
            candidates: Some(Candidates { spans, arithmetic }),
        })
    }

    /// Predictions for every question, ordered by question id.
    pub fn predict_dataset(&self, docs: &[HybridDocument], opts: &PredictOptions) -> Result<Vec<Prediction>> {
        let jobs: Vec<(&HybridDocument, &Question)> =
            docs.iter().flat_map(|d| d.questions.iter().map(move |q| (d, q))).collect();
        let mut out = jobs
            .par_iter()
            .map(|(d, q)| self.predict_question(d, q, opts))
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        Ok(out)
    }
}
