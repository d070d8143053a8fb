//! Goal-driven pre-order tree decoder with a number copy mechanism.
//!
//! Each step attends over the node representations, mixes a generation
//! distribution over operators and constants with a copy distribution over
//! the document's distinct quantities, and assembles the emitted tokens
//! into a tree with a pop-3-push-1 stack reduction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::expression::{ArithOp, ExpressionTree, Provenance};
use crate::graph::MultiViewGraph;
use crate::kernel::{Axis, GruCell, Linear, ParamId, ParamStore, Session, Tensor, Var};

pub const DEFAULT_CONSTANTS: [f64; 2] = [1.0, 100.0];
pub const DEFAULT_MAX_OPS: usize = 4;
const MASKED_LOGIT: f64 = -1e30;

/// Maximum number of tokens for an expression with at most `max_ops`
/// operators.
pub fn token_budget(max_ops: usize) -> usize {
    2 * max_ops + 1
}

#[derive(Debug, Clone, PartialEq)]
pub enum VocabEntry {
    Op(ArithOp),
    Const(f64),
    /// A distinct quantity of the document, realised by one or more number
    /// nodes (first occurrence first).
    Copy { value: f64, nodes: Vec<usize> },
}

impl VocabEntry {
    pub fn symbol(&self) -> String {
        match self {
            VocabEntry::Op(op) => op.symbol().to_string(),
            VocabEntry::Const(v) | VocabEntry::Copy { value: v, .. } => crate::expression::format_number(*v),
        }
    }
}

/// Operators, then constants, then one copy entry per distinct quantity.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub entries: Vec<VocabEntry>,
    pub generated: usize,
    pub number_nodes: Vec<usize>,
    /// `M x C`: number node `m` realises copy entry `c`.
    grouping: Tensor,
}

fn values_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl Vocab {
    pub fn build(graph: &MultiViewGraph, constants: &[f64]) -> Self {
        let mut entries: Vec<VocabEntry> = ArithOp::ALL.iter().map(|&o| VocabEntry::Op(o)).collect();
        entries.extend(constants.iter().map(|&c| VocabEntry::Const(c)));
        let generated = entries.len();
        let number_nodes = graph.number_nodes();
        let mut copies: Vec<(f64, Vec<usize>)> = Vec::new();
        let mut owner = Vec::with_capacity(number_nodes.len());
        for &n in &number_nodes {
            let v = graph.nodes[n].numeric_value.expect("number nodes carry values");
            match copies.iter().position(|(x, _)| *x == v) {
                Some(c) => {
                    copies[c].1.push(n);
                    owner.push(c);
                }
                None => {
                    owner.push(copies.len());
                    copies.push((v, vec![n]));
                }
            }
        }
        let mut grouping = Tensor::zeros(&[number_nodes.len(), copies.len()]);
        for (m, &c) in owner.iter().enumerate() {
            grouping.set(m, c, 1.0);
        }
        entries.extend(copies.into_iter().map(|(value, nodes)| VocabEntry::Copy { value, nodes }));
        Self {
            entries,
            generated,
            number_nodes,
            grouping,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn copy_count(&self) -> usize {
        self.entries.len() - self.generated
    }

    /// Token ids of the pre-order form of `tree`. Quantities present in the
    /// document map to their copy entry, otherwise to a matching constant.
    pub fn encode_tree(&self, tree: &ExpressionTree) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        self.encode_into(tree, &mut out)?;
        Ok(out)
    }

    fn encode_into(&self, tree: &ExpressionTree, out: &mut Vec<usize>) -> Result<()> {
        match tree {
            ExpressionTree::Op { op, left, right } => {
                out.push(ArithOp::ALL.iter().position(|o| o == op).expect("known operator"));
                self.encode_into(left, out)?;
                self.encode_into(right, out)
            }
            ExpressionTree::Leaf { value, .. } => {
                let copy = self.entries[self.generated..]
                    .iter()
                    .position(|e| matches!(e, VocabEntry::Copy { value: v, .. } if values_match(*v, *value)))
                    .map(|i| i + self.generated);
                let constant = || {
                    self.entries[..self.generated]
                        .iter()
                        .position(|e| matches!(e, VocabEntry::Const(c) if values_match(*c, *value)))
                };
                match copy.or_else(constant) {
                    Some(i) => {
                        out.push(i);
                        Ok(())
                    }
                    None => Err(Error::Data(format!(
                        "gold token {} is neither a document quantity nor a constant",
                        crate::expression::format_number(*value)
                    ))),
                }
            }
        }
    }

    fn leaf(&self, token: usize) -> Option<(f64, Provenance)> {
        match &self.entries[token] {
            VocabEntry::Op(_) => None,
            VocabEntry::Const(v) => Some((*v, Provenance::Constant)),
            VocabEntry::Copy { value, nodes } => Some((*value, Provenance::Node(nodes[0]))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum StackItem<C> {
    Open { op: ArithOp, ctx: C },
    Closed { tree: ExpressionTree, ctx: C, children: Option<(C, C)> },
}

/// Stack assembly of a pre-order token stream. A pushed quantity that
/// leaves `[Op, subtree, subtree]` on top triggers pop-3-push-1 reductions
/// until no pattern remains. Every stack item carries a context value.
#[derive(Debug, Clone)]
pub struct TreeAssembler<C> {
    stack: Vec<StackItem<C>>,
    tokens: usize,
    ops: usize,
}

impl<C: Clone> Default for TreeAssembler<C> {
    fn default() -> Self {
        Self::new()
    }
}

impl<C: Clone> TreeAssembler<C> {
    pub fn new() -> Self {
        Self {
            stack: Vec::new(),
            tokens: 0,
            ops: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn ops(&self) -> usize {
        self.ops
    }

    pub fn stack(&self) -> &[StackItem<C>] {
        &self.stack
    }

    pub fn is_complete(&self) -> bool {
        self.stack.len() == 1 && matches!(self.stack[0], StackItem::Closed { .. })
    }

    pub fn push_op(&mut self, op: ArithOp, ctx: C) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Decode(format!("token {} after a complete expression", self.tokens)));
        }
        self.stack.push(StackItem::Open { op, ctx });
        self.tokens += 1;
        self.ops += 1;
        Ok(())
    }

    pub fn push_leaf(&mut self, value: f64, provenance: Provenance, ctx: C) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Decode(format!("token {} after a complete expression", self.tokens)));
        }
        self.stack.push(StackItem::Closed {
            tree: ExpressionTree::Leaf { value, provenance },
            ctx,
            children: None,
        });
        self.tokens += 1;
        while self.reducible() {
            let right = self.stack.pop().expect("reducible");
            let left = self.stack.pop().expect("reducible");
            let head = self.stack.pop().expect("reducible");
            let (
                StackItem::Open { op, ctx },
                StackItem::Closed { tree: l, ctx: lc, .. },
                StackItem::Closed { tree: r, ctx: rc, .. },
            ) = (head, left, right)
            else {
                unreachable!("reducible checks the pattern")
            };
            self.stack.push(StackItem::Closed {
                tree: ExpressionTree::op(op, l, r),
                ctx,
                children: Some((lc, rc)),
            });
        }
        Ok(())
    }

    fn reducible(&self) -> bool {
        let n = self.stack.len();
        n >= 3
            && matches!(self.stack[n - 1], StackItem::Closed { .. })
            && matches!(self.stack[n - 2], StackItem::Closed { .. })
            && matches!(self.stack[n - 3], StackItem::Open { .. })
    }

    /// Contexts of the parent, left child and right child of the node on top
    /// of the stack. The parent is the nearest open operator below it.
    pub fn relatives(&self) -> (Option<C>, Option<C>, Option<C>) {
        let Some(top) = self.stack.last() else {
            return (None, None, None);
        };
        let parent = self.stack[..self.stack.len() - 1].iter().rev().find_map(|item| match item {
            StackItem::Open { ctx, .. } => Some(ctx.clone()),
            StackItem::Closed { .. } => None,
        });
        let (l, r) = match top {
            StackItem::Closed {
                children: Some((l, r)), ..
            } => (Some(l.clone()), Some(r.clone())),
            _ => (None, None),
        };
        (parent, l, r)
    }

    pub fn finish(&self) -> Result<ExpressionTree> {
        match self.stack.as_slice() {
            [StackItem::Closed { tree, .. }] => Ok(tree.clone()),
            _ => Err(Error::Decode(format!(
                "incomplete expression after {} tokens ({} stack items)",
                self.tokens,
                self.stack.len()
            ))),
        }
    }
}

/// Assembles string tokens with unit contexts; the stack-machine reading
/// of a pre-order sequence.
pub fn assemble_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<ExpressionTree> {
    let mut asm: TreeAssembler<()> = TreeAssembler::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if let Some(op) = ArithOp::from_symbol(t) {
            asm.push_op(op, ())?;
        } else {
            let v = crate::document::parse_number(t)
                .ok_or_else(|| Error::Expression {
                    position: i,
                    message: format!("unknown token {t:?}"),
                })?;
            asm.push_leaf(v, Provenance::Literal, ())?;
        }
    }
    asm.finish()
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub dim: usize,
    pub constants: Vec<f64>,
    pub max_ops: usize,
    pub attn_nodes: Linear,
    pub attn_state: Linear,
    pub attn_score: ParamId,
    pub aggregate: Linear,
    pub gru: GruCell,
    pub copy_gate: Linear,
    pub generate: Linear,
    pub token_embeddings: ParamId,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, constants: &[f64], max_ops: usize, rng: &mut R) -> Self {
        let generated = ArithOp::ALL.len() + constants.len();
        Self {
            dim: d,
            constants: constants.to_vec(),
            max_ops,
            attn_nodes: Linear::without_bias(store, "decoder.attn_nodes", d, d, rng),
            attn_state: Linear::new(store, "decoder.attn_state", 2 * d, d, rng),
            attn_score: store.glorot("decoder.attn_score", d, 1, rng),
            aggregate: Linear::new(store, "decoder.aggregate", 4 * d, d, rng),
            gru: GruCell::new(store, "decoder.gru", 3 * d, d, rng),
            copy_gate: Linear::new(store, "decoder.copy_gate", 3 * d, 1, rng),
            generate: Linear::new(store, "decoder.generate", 3 * d, generated, rng),
            token_embeddings: store.normal("decoder.token_embeddings", &[generated, d], 0.5, rng),
        }
    }
}

/// Per-question values shared by all decoding steps.
#[derive(Debug, Clone, Copy)]
pub struct DecodeInputs<'v> {
    pub nodes: Var,
    projected: Var,
    score: Var,
    pub vocab: &'v Vocab,
}

/// Decoder state: `s_t`, `g_t` and the partial stack.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub hidden: Var,
    pub goal: Var,
    pub stack: TreeAssembler<Var>,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `1 x V` distribution.
    pub probs: Var,
    /// `1 x d` attention context.
    pub context: Var,
    /// `N x 1` node attention.
    pub attention: Var,
    /// `1 x 1` copy gate.
    pub copy_gate: Var,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub tree: ExpressionTree,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

impl DecoderParams {
    pub fn prepare<'v>(&self, s: &mut Session, nodes: Var, vocab: &'v Vocab) -> Result<DecodeInputs<'v>> {
        if vocab.copy_count() == 0 {
            return Err(Error::Decode("no copyable quantities".into()));
        }
        let projected = self.attn_nodes.forward(s, nodes)?;
        let score = s.param(self.attn_score);
        Ok(DecodeInputs {
            nodes,
            projected,
            score,
            vocab,
        })
    }

    /// `s_1` is the min-pool over node representations and `g_1 = s_1`.
    pub fn initial_state(&self, s: &mut Session, inputs: &DecodeInputs) -> Result<DecoderState> {
        let s1 = s.tape.min_pool(inputs.nodes, Axis::Rows)?;
        Ok(DecoderState {
            hidden: s1,
            goal: s1,
            stack: TreeAssembler::new(),
            tokens: Vec::new(),
            log_prob: 0.0,
        })
    }

    /// Attention over nodes: `α = softmax_i(w · tanh(W_h z_i + W_s [s : g]))`
    /// and `c = Σ α_i z_i`.
    pub fn attend(&self, s: &mut Session, inputs: &DecodeInputs, hidden: Var, goal: Var) -> Result<(Var, Var)> {
        let sg = s.tape.concat(&[hidden, goal], Axis::Cols)?;
        let q = self.attn_state.forward(s, sg)?;
        let e = s.tape.add(inputs.projected, q)?;
        let e = s.tape.tanh(e)?;
        let scores = s.tape.matmul(e, inputs.score)?;
        let alpha = s.tape.softmax(scores, Axis::Rows)?;
        let at = s.tape.transpose(alpha)?;
        let c = s.tape.matmul(at, inputs.nodes)?;
        Ok((c, alpha))
    }

    /// `g' = σ(W_g [g : g_parent : g_left : g_right])`, absent relatives
    /// read as zeros.
    pub fn aggregate_context(
        &self,
        s: &mut Session,
        goal: Var,
        parent: Option<Var>,
        left: Option<Var>,
        right: Option<Var>,
    ) -> Result<Var> {
        let zero = s.tape.constant(Tensor::zeros(&[1, self.dim]));
        let parts = [goal, parent.unwrap_or(zero), left.unwrap_or(zero), right.unwrap_or(zero)];
        let joined = s.tape.concat(&parts, Axis::Cols)?;
        let lin = self.aggregate.forward(s, joined)?;
        s.tape.sigmoid(lin)
    }

    /// `s' = GRU([c : g : E(y)], s)`.
    pub fn step_state(&self, s: &mut Session, context: Var, goal: Var, embedding: Var, hidden: Var) -> Result<Var> {
        let x = s.tape.concat(&[context, goal, embedding], Axis::Cols)?;
        self.gru.forward(s, x, hidden)
    }

    fn token_embedding(&self, s: &mut Session, inputs: &DecodeInputs, token: usize) -> Result<Var> {
        match &inputs.vocab.entries[token] {
            VocabEntry::Copy { nodes, .. } => s.tape.gather_rows(inputs.nodes, &nodes[..1]),
            _ => s.param_rows(self.token_embeddings, &[token]),
        }
    }

    /// Output distribution for one step. Operators are masked once the
    /// operator budget is spent.
    pub fn predict_token(&self, s: &mut Session, inputs: &DecodeInputs, state: &DecoderState) -> Result<StepOutput> {
        let vocab = inputs.vocab;
        let (c, alpha) = self.attend(s, inputs, state.hidden, state.goal)?;
        let u = s.tape.concat(&[state.hidden, c, state.goal], Axis::Cols)?;
        let gate = self.copy_gate.forward(s, u)?;
        let pc = s.tape.sigmoid(gate)?;

        let alpha_num = s.tape.gather_rows(alpha, &vocab.number_nodes)?;
        let g = s.tape.constant(vocab.grouping.clone());
        let at = s.tape.transpose(alpha_num)?;
        let grouped = s.tape.matmul(at, g)?;
        let total = s.tape.sum(alpha_num)?;
        let p_copy = s.tape.div(grouped, total)?;

        let allow_ops = state.stack.ops() < self.max_ops;
        let n_const = vocab.generated - ArithOp::ALL.len();
        let probs = if !allow_ops && n_const == 0 {
            let zeros = s.tape.constant(Tensor::zeros(&[1, vocab.generated]));
            s.tape.concat(&[zeros, p_copy], Axis::Cols)?
        } else {
            let mut logits = self.generate.forward(s, u)?;
            if !allow_ops {
                let mut mask = Tensor::zeros(&[1, vocab.generated]);
                for j in 0..ArithOp::ALL.len() {
                    mask.set(0, j, MASKED_LOGIT);
                }
                let mask = s.tape.constant(mask);
                logits = s.tape.add(logits, mask)?;
            }
            let p_gen = s.tape.softmax(logits, Axis::Cols)?;
            let keep = s.tape.affine(pc, -1.0, 1.0)?;
            let gen = s.tape.mul(keep, p_gen)?;
            let copy = s.tape.mul(pc, p_copy)?;
            s.tape.concat(&[gen, copy], Axis::Cols)?
        };
        Ok(StepOutput {
            probs,
            context: c,
            attention: alpha,
            copy_gate: pc,
        })
    }

    /// Consumes `token`: updates the hidden state, pushes onto the stack and
    /// recomputes the goal from the relatives of the new stack top.
    pub fn advance(
        &self,
        s: &mut Session,
        inputs: &DecodeInputs,
        state: &DecoderState,
        step: &StepOutput,
        token: usize,
        log_prob: f64,
    ) -> Result<DecoderState> {
        let mut stack = state.stack.clone();
        match inputs.vocab.entries[token] {
            VocabEntry::Op(op) => stack.push_op(op, state.goal)?,
            _ => {
                let (v, prov) = inputs.vocab.leaf(token).expect("quantity token");
                stack.push_leaf(v, prov, state.goal)?;
            }
        }
        let mut tokens = state.tokens.clone();
        tokens.push(token);
        if stack.is_complete() {
            return Ok(DecoderState {
                stack,
                tokens,
                log_prob: state.log_prob + log_prob,
                ..state.clone()
            });
        }
        let emb = self.token_embedding(s, inputs, token)?;
        let hidden = self.step_state(s, step.context, state.goal, emb, state.hidden)?;
        let (p, l, r) = stack.relatives();
        let goal = self.aggregate_context(s, state.goal, p, l, r)?;
        Ok(DecoderState {
            hidden,
            goal,
            stack,
            tokens,
            log_prob: state.log_prob + log_prob,
        })
    }

    /// Sum of `-log P(y_t)` over the gold tokens under teacher forcing.
    pub fn teacher_forced_nll(&self, s: &mut Session, inputs: &DecodeInputs, gold: &[usize]) -> Result<Var> {
        let mut state = self.initial_state(s, inputs)?;
        let mut terms = Vec::with_capacity(gold.len());
        for (t, &y) in gold.iter().enumerate() {
            if state.stack.is_complete() {
                return Err(Error::Data(format!("gold expression has trailing token at {t}")));
            }
            if y >= inputs.vocab.len() {
                return Err(Error::Data(format!("gold token id {y} outside the vocabulary")));
            }
            if matches!(inputs.vocab.entries[y], VocabEntry::Op(_)) && state.stack.ops() >= self.max_ops {
                return Err(Error::Data(format!(
                    "gold expression exceeds {} operators",
                    self.max_ops
                )));
            }
            let step = self.predict_token(s, inputs, &state)?;
            let py = s.tape.pick(step.probs, 0, y)?;
            terms.push(s.tape.log(py)?);
            state = self.advance(s, inputs, &state, &step, y, 0.0)?;
        }
        if !state.stack.is_complete() {
            return Err(Error::Data("gold expression is incomplete".into()));
        }
        let joined = s.tape.concat(&terms, Axis::Cols)?;
        let total = s.tape.sum(joined)?;
        s.tape.scale(total, -1.0)
    }

    fn beam_search(&self, s: &mut Session, inputs: &DecodeInputs, width: usize) -> Result<Decoded> {
        let width = width.max(1);
        let mut active = vec![self.initial_state(s, inputs)?];
        let mut finished: Vec<DecoderState> = Vec::new();
        for _ in 0..token_budget(self.max_ops) {
            if active.is_empty() {
                break;
            }
            let mut steps = Vec::with_capacity(active.len());
            let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
            for (h, state) in active.iter().enumerate() {
                let step = self.predict_token(s, inputs, state)?;
                for (y, &p) in s.tape.value(step.probs).data().iter().enumerate() {
                    if p > 0.0 {
                        let lp = p.ln();
                        candidates.push((state.log_prob + lp, h, y, lp));
                    }
                }
                steps.push(step);
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut next = Vec::with_capacity(width);
            for &(_, h, y, lp) in candidates.iter().take(width) {
                let st = self.advance(s, inputs, &active[h], &steps[h], y, lp)?;
                if st.stack.is_complete() {
                    finished.push(st);
                } else {
                    next.push(st);
                }
            }
            active = next;
            let best_done = finished.iter().map(|f| f.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if active.iter().all(|a| a.log_prob <= best_done) {
                break;
            }
        }
        let mut best: Option<DecoderState> = None;
        for f in finished {
            if best.as_ref().is_none_or(|b| f.log_prob > b.log_prob) {
                best = Some(f);
            }
        }
        let best = best.ok_or_else(|| {
            Error::Decode(format!(
                "token budget of {} exhausted before the expression completed",
                token_budget(self.max_ops)
            ))
        })?;
        Ok(Decoded {
            tree: best.stack.finish()?,
            tokens: best.tokens,
            log_prob: best.log_prob,
        })
    }

    /// Greedy or beam decoding. The beam result is compared against the
    /// greedy path, and the higher log-probability wins.
    pub fn decode_tree(&self, s: &mut Session, inputs: &DecodeInputs, mode: DecodeMode) -> Result<Decoded> {
        let greedy = self.beam_search(s, inputs, 1)?;
        match mode {
            DecodeMode::Greedy | DecodeMode::Beam(0) | DecodeMode::Beam(1) => Ok(greedy),
            DecodeMode::Beam(w) => {
                let beam = self.beam_search(s, inputs, w)?;
                Ok(if beam.log_prob >= greedy.log_prob { beam } else { greedy })
            }
        }
    }
}

/// Renders token ids as their pre-order symbols.
pub fn render_tokens(vocab: &Vocab, tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|&t| vocab.entries[t].symbol()).collect()
}
