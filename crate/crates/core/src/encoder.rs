//! Node feature initialisation and the one-layer multi-view graph
//! transformer.
//!
//! Each active view runs a two-layer graph convolution `relu(Â X W)`; the
//! per-view outputs are fused per node with a softmax over views scored by
//! a learned query per view against the concatenation of all views, then
//! passed through `Ẑ = Z + LN(Z)` and `Z̄ = Ẑ + LN(FFN(Ẑ))`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, MultiViewGraph, NodeKind};
use crate::kernel::{Activation, Axis, ParamId, ParamStore, Session, Tensor, TwoLayer, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hash_buckets: usize,
    pub hash_seed: u64,
    pub dropout: f64,
    /// When false, views are averaged with uniform weights `1/K`.
    pub multi_view_attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hash_buckets: 1 << 14,
            hash_seed: 0x05ee_d0f7_a61e,
            dropout: 0.5,
            multi_view_attention: true,
        }
    }
}

/// Seeded FNV-1a over the token bytes, finished with a splitmix round.
pub fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy)]
pub struct GcnParams {
    pub first: ParamId,
    pub second: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embeddings: ParamId,
    pub separator: ParamId,
    pub empty_cell: ParamId,
    pub cell_mlp: TwoLayer,
    pub views: Vec<GcnParams>,
    /// `K·d x K`; column `k` is the query of view `k`.
    pub view_queries: ParamId,
    pub norm1: (ParamId, ParamId),
    pub ffn: TwoLayer,
    pub norm2: (ParamId, ParamId),
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, views: usize, rng: &mut R) -> Self {
        let d = config.dim;
        let embeddings = store.normal("encoder.embeddings", &[config.hash_buckets, d], 0.5, rng);
        let separator = store.normal("encoder.separator", &[1, d], 0.5, rng);
        let empty_cell = store.normal("encoder.empty_cell", &[1, d], 0.5, rng);
        let cell_mlp = TwoLayer::new(store, "encoder.cell_mlp", (d, d, d), Activation::Relu, rng);
        let views = (0..views)
            .map(|k| GcnParams {
                first: store.glorot(format!("encoder.view{k}.gconv1"), d, d, rng),
                second: store.glorot(format!("encoder.view{k}.gconv2"), d, d, rng),
            })
            .collect::<Vec<_>>();
        let k = views.len();
        let view_queries = store.normal("encoder.view_queries", &[k * d, k], (1.0 / (k * d) as f64).sqrt(), rng);
        let norm1 = (
            store.add("encoder.norm1.gain", Tensor::filled(&[1, d], 1.0)),
            store.zeros("encoder.norm1.bias", &[1, d]),
        );
        let ffn = TwoLayer::new(store, "encoder.ffn", (d, 2 * d, d), Activation::Gelu, rng);
        let norm2 = (
            store.add("encoder.norm2.gain", Tensor::filled(&[1, d], 1.0)),
            store.zeros("encoder.norm2.bias", &[1, d]),
        );
        Self {
            config,
            embeddings,
            separator,
            empty_cell,
            cell_mlp,
            views,
            view_queries,
            norm1,
            ffn,
            norm2,
        }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (token_hash(token, self.config.hash_seed) % self.config.hash_buckets as u64) as usize
    }
}

fn mean_matrix(groups: &[Vec<usize>], width: usize) -> Tensor {
    let mut m = Tensor::zeros(&[groups.len(), width]);
    for (r, g) in groups.iter().enumerate() {
        for &c in g {
            m.set(r, c, m.get(r, c) + 1.0 / g.len() as f64);
        }
    }
    m
}

/// Node feature matrix `X` (`N x d`), row `i` for node `i`.
///
/// Token nodes take their hashed embedding; a cell is the mean of its token
/// embeddings (or the learned empty-cell vector); rows and columns average
/// `MLP(cell)` over their cells; sentences and the question node add the
/// separator vector to the mean of their word embeddings.
pub fn init_node_features(s: &mut Session, graph: &MultiViewGraph, params: &EncoderParams) -> Result<Var> {
    let members = graph.members();
    let n = graph.node_count();
    let mut block_row = vec![usize::MAX; n];

    let tokens: Vec<usize> = graph.nodes.iter().filter(|x| x.locator.is_token()).map(|x| x.index).collect();
    let token_pos: HashMap<usize, usize> = tokens.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let cells: Vec<usize> = graph.nodes.iter().filter(|x| x.kind == NodeKind::Cell).map(|x| x.index).collect();
    let cell_pos: HashMap<usize, usize> = cells.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let lines: Vec<usize> = graph
        .nodes
        .iter()
        .filter(|x| matches!(x.kind, NodeKind::Row | NodeKind::Column))
        .map(|x| x.index)
        .collect();
    let sentences: Vec<usize> = graph
        .nodes
        .iter()
        .filter(|x| matches!(x.kind, NodeKind::Sentence | NodeKind::Question))
        .map(|x| x.index)
        .collect();

    let mut blocks = Vec::new();
    let mut offset = 0;
    let d = params.config.dim;

    let token_emb = if tokens.is_empty() {
        None
    } else {
        let buckets: Vec<usize> = tokens.iter().map(|&i| params.bucket(&graph.nodes[i].text)).collect();
        let e = s.param_rows(params.embeddings, &buckets)?;
        for (p, &i) in tokens.iter().enumerate() {
            block_row[i] = offset + p;
        }
        offset += tokens.len();
        blocks.push(e);
        Some(e)
    };

    let pooled_words = |s: &mut Session, parents: &[usize]| -> Result<Option<Var>> {
        let Some(e) = token_emb else { return Ok(None) };
        let groups: Vec<Vec<usize>> = parents
            .iter()
            .map(|&p| members[p].iter().filter_map(|m| token_pos.get(m).copied()).collect())
            .collect();
        let pm = s.tape.constant(mean_matrix(&groups, tokens.len()));
        Ok(Some(s.tape.matmul(pm, e)?))
    };

    if !cells.is_empty() {
        let mean = pooled_words(s, &cells)?;
        let empty: Vec<f64> = cells
            .iter()
            .map(|&c| if members[c].is_empty() { 1.0 } else { 0.0 })
            .collect();
        let mut h = match mean {
            Some(m) => m,
            None => s.tape.constant(Tensor::zeros(&[cells.len(), d])),
        };
        if empty.iter().any(|&e| e > 0.0) {
            let mask = s.tape.constant(Tensor::column(empty));
            let ec = s.param(params.empty_cell);
            let fill = s.tape.mul(mask, ec)?;
            h = s.tape.add(h, fill)?;
        }
        for (p, &i) in cells.iter().enumerate() {
            block_row[i] = offset + p;
        }
        offset += cells.len();
        blocks.push(h);

        if !lines.is_empty() {
            let projected = params.cell_mlp.forward(s, h)?;
            let groups: Vec<Vec<usize>> = lines
                .iter()
                .map(|&l| members[l].iter().filter_map(|m| cell_pos.get(m).copied()).collect())
                .collect();
            let pm = s.tape.constant(mean_matrix(&groups, cells.len()));
            let r = s.tape.matmul(pm, projected)?;
            for (p, &i) in lines.iter().enumerate() {
                block_row[i] = offset + p;
            }
            offset += lines.len();
            blocks.push(r);
        }
    }

    if !sentences.is_empty() {
        let sep = s.param(params.separator);
        let h = match pooled_words(s, &sentences)? {
            Some(m) => s.tape.add(m, sep)?,
            None => {
                let z = s.tape.constant(Tensor::zeros(&[sentences.len(), d]));
                s.tape.add(z, sep)?
            }
        };
        for (p, &i) in sentences.iter().enumerate() {
            block_row[i] = offset + p;
        }
        blocks.push(h);
    }

    if let Some(i) = block_row.iter().position(|&r| r == usize::MAX) {
        return Err(Error::Consistency(format!("node {i} received no feature")));
    }
    let stacked = s.tape.concat(&blocks, Axis::Rows)?;
    s.tape.gather_rows(stacked, &block_row)
}

/// `GConv2(Â, GConv1(Â, X))` with `GConv(Â, X) = relu(Â X W)`; dropout
/// follows each convolution on training tapes.
pub fn gcn_view(s: &mut Session, a_hat: Var, x: Var, view: &GcnParams, dropout: f64) -> Result<Var> {
    let mut h = x;
    for w in [view.first, view.second] {
        let w = s.param(w);
        let ax = s.tape.matmul(a_hat, h)?;
        let axw = s.tape.matmul(ax, w)?;
        let act = s.tape.relu(axw)?;
        h = s.tape.dropout(act, dropout)?;
    }
    Ok(h)
}

/// Fuses per-view node features. Returns `(Z, α)` with `α` of shape `N x K`.
/// With `queries = None` every view gets weight `1/K`.
pub fn multi_view_attention(s: &mut Session, views: &[Var], queries: Option<Var>) -> Result<(Var, Var)> {
    let k = views.len();
    if k == 0 {
        return Err(Error::Config("multi-view attention needs at least one view".into()));
    }
    let (n, _) = s.tape.shape(views[0]);
    let alpha = match queries {
        Some(t) => {
            let c = s.tape.concat(views, Axis::Cols)?;
            let scores = s.tape.matmul(c, t)?;
            s.tape.softmax(scores, Axis::Cols)?
        }
        None => s.tape.constant(Tensor::filled(&[n, k], 1.0 / k as f64)),
    };
    let mut z = None;
    for (j, &x) in views.iter().enumerate() {
        let a = s.tape.slice(alpha, Axis::Cols, j, 1)?;
        let weighted = s.tape.mul(a, x)?;
        z = Some(match z {
            None => weighted,
            Some(acc) => s.tape.add(acc, weighted)?,
        });
    }
    Ok((z.expect("k >= 1"), alpha))
}

fn affine_norm(s: &mut Session, x: Var, norm: (ParamId, ParamId)) -> Result<Var> {
    let ln = s.tape.layer_norm(x, Axis::Cols, LAYER_NORM_EPS)?;
    let g = s.param(norm.0);
    let b = s.param(norm.1);
    let scaled = s.tape.mul(ln, g)?;
    s.tape.add(scaled, b)
}

#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub features: Var,
    pub view_weights: Var,
    pub output: Var,
}

/// Runs the encoder over an already-built feature matrix.
pub fn graph_transformer(s: &mut Session, graph: &MultiViewGraph, x: Var, params: &EncoderParams) -> Result<Encoded> {
    if graph.views.len() != params.views.len() {
        return Err(Error::Config(format!(
            "graph has {} views but the encoder was built for {}",
            graph.views.len(),
            params.views.len()
        )));
    }
    let dropout = params.config.dropout;
    let mut per_view = Vec::with_capacity(graph.views.len());
    for (view, p) in graph.views.iter().zip(&params.views) {
        let a_hat = normalize_adjacency(&view.adjacency, view.view.is_directed());
        let a_hat = s.tape.constant(a_hat);
        per_view.push(gcn_view(s, a_hat, x, p, dropout)?);
    }
    let queries = params.config.multi_view_attention.then(|| s.param(params.view_queries));
    let (z, alpha) = multi_view_attention(s, &per_view, queries)?;
    let n1 = affine_norm(s, z, params.norm1)?;
    let z_hat = s.tape.add(z, n1)?;
    let f = params.ffn.forward(s, z_hat)?;
    let f = s.tape.dropout(f, dropout)?;
    let n2 = affine_norm(s, f, params.norm2)?;
    let out = s.tape.add(z_hat, n2)?;
    Ok(Encoded {
        features: x,
        view_weights: alpha,
        output: out,
    })
}

/// Feature initialisation followed by the graph transformer.
pub fn encode(s: &mut Session, graph: &MultiViewGraph, params: &EncoderParams) -> Result<Encoded> {
    let x = init_node_features(s, graph, params)?;
    graph_transformer(s, graph, x, params)
}
