//! Node-edge communicative message passing over an enclosing subgraph, with
//! a hand-written reverse pass.
//!
//! Forward pass for a subgraph with node labels `x_i` and target `(s, r, t)`:
//!
//! ```text
//! n_i^0   = W_in x_i
//! e_uv^0  = relu(W_e0 [n_u^0 ; R_rel(uv) ; n_v^0])
//! for k in 1..=layers:
//!     m_uv^k  = relu(W_msg^k [n_u^{k-1} ; e_uv^{k-1} ; n_v^{k-1}])      (e^k = m^k)
//!     a_v^k   = sum of m_uv^k over edges into v
//!     g_v^k   = sigmoid(W_gate^k [n_v^{k-1} ; a_v^k])
//!     n_v^k   = g_v^k * n_v^{k-1} + (1 - g_v^k) * relu(W_node^k a_v^k)
//! S = w_out . [sum_i n_i^L ; n_s^L ; R_r ; n_t^L]
//! ```
//!
//! All parameters live in one flat `f64` vector. Flattening order:
//! `relations` (n_relations x d), `w_in` (d x 2(h+1)), `w_edge0` (d x 3d), then
//! for each layer `w_msg` (d x 3d), `w_node` (d x d), `w_gate` (d x 2d), and
//! finally `w_out` (4d). Matrices are row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::RelationId;
use crate::subgraph::{label_nodes, EnclosingSubgraph};

pub const DEFAULT_MARGIN: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_relations: usize,
    pub dim: usize,
    pub hops: u32,
    pub layers: usize,
}

impl ModelShape {
    pub fn label_dim(&self) -> usize {
        2 * (self.hops as usize + 1)
    }

    /// `n_rel*d + d*2(h+1) + 3d^2 + layers*6d^2 + 4d`
    pub fn num_params(&self) -> usize {
        self.layout().total
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Names of the parameter blocks in flattening order.
    pub fn flattening_order(&self) -> Vec<String> {
        let mut names = vec!["relations".to_owned(), "w_in".into(), "w_edge0".into()];
        for k in 1..=self.layers {
            names.extend([
                format!("w_msg{k}"),
                format!("w_node{k}"),
                format!("w_gate{k}"),
            ]);
        }
        names.push("w_out".into());
        names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerOffsets {
    msg: usize,
    node: usize,
    gate: usize,
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    dim: usize,
    label_dim: usize,
    relations: usize,
    w_in: usize,
    w_edge0: usize,
    layers: Vec<LayerOffsets>,
    w_out: usize,
    total: usize,
}

impl Layout {
    fn new(shape: &ModelShape) -> Self {
        let d = shape.dim;
        let label_dim = shape.label_dim();
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let relations = take(shape.n_relations * d);
        let w_in = take(d * label_dim);
        let w_edge0 = take(3 * d * d);
        let layers = (0..shape.layers)
            .map(|_| LayerOffsets {
                msg: take(3 * d * d),
                node: take(d * d),
                gate: take(2 * d * d),
            })
            .collect();
        let w_out = take(4 * d);
        Self {
            dim: d,
            label_dim,
            relations,
            w_in,
            w_edge0,
            layers,
            w_out,
            total: at,
        }
    }

    /// `(offset, len, fan_in)` for every block, in flattening order.
    fn blocks(&self, n_relations: usize) -> Vec<(usize, usize, usize)> {
        let d = self.dim;
        let mut blocks = vec![
            (self.relations, n_relations * d, d),
            (self.w_in, d * self.label_dim, self.label_dim),
            (self.w_edge0, 3 * d * d, 3 * d),
        ];
        for l in &self.layers {
            blocks.extend([
                (l.msg, 3 * d * d, 3 * d),
                (l.node, d * d, d),
                (l.gate, 2 * d * d, 2 * d),
            ]);
        }
        blocks.push((self.w_out, 4 * d, 4 * d));
        blocks
    }

    pub fn relation_range(&self, r: RelationId) -> std::ops::Range<usize> {
        let start = self.relations + r as usize * self.dim;
        start..start + self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            values: vec![0.0; shape.num_params()],
            shape,
        }
    }

    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.num_params() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters for {:?}, got {}",
                shape.num_params(),
                shape,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per block.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(shape);
        for (offset, len, fan_in) in shape.layout().blocks(shape.n_relations) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params.values[offset..offset + len] {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        params
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Result of a forward pass, with everything the reverse pass needs.
#[derive(Clone, Debug)]
pub struct ScoredSubgraph {
    pub score: f64,
    cache: ForwardCache,
}

impl ScoredSubgraph {
    /// Sign of every ReLU pre-activation, in evaluation order. Two parameter
    /// points with the same pattern lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        pattern.extend(self.cache.edge_pre[0].iter().map(|&x| x > 0.0));
        for k in 0..self.cache.layers.len() {
            pattern.extend(self.cache.edge_pre[k + 1].iter().map(|&x| x > 0.0));
            pattern.extend(self.cache.layers[k].node_pre.iter().map(|&x| x > 0.0));
        }
        pattern
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    agg: Vec<f64>,
    node_pre: Vec<f64>,
    update: Vec<f64>,
    gate: Vec<f64>,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    labels: Vec<Vec<f64>>,
    edges: Vec<(usize, RelationId, usize)>,
    head: usize,
    tail: usize,
    relation: RelationId,
    /// `nodes[k]` is the flat n x d state after layer k.
    nodes: Vec<Vec<f64>>,
    /// `edge_state[k]` and `edge_pre[k]` are flat m x d.
    edge_state: Vec<Vec<f64>>,
    edge_pre: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    readout: Vec<f64>,
}

/// `out = W x` for row-major `W` (rows x x.len()).
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `dx += W^T dy` and `dW += dy x^T`.
fn matvec_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], dx: &mut [f64]) {
    let cols = x.len();
    for ((row, drow), &g) in w.chunks_exact(cols).zip(dw.chunks_exact_mut(cols)).zip(dy) {
        if g == 0.0 {
            continue;
        }
        for j in 0..cols {
            dx[j] += row[j] * g;
            drow[j] += x[j] * g;
        }
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn validate(params: &ModelParams, sg: &EnclosingSubgraph) -> Result<()> {
    let shape = params.shape();
    if sg.num_nodes() == 0 {
        return Err(Error::EmptySubgraph);
    }
    if sg.hops() != shape.hops {
        return Err(Error::InvalidArgument(format!(
            "subgraph labelled with {} hops, model expects {}",
            sg.hops(),
            shape.hops
        )));
    }
    let bad = std::iter::once(sg.relation())
        .chain(sg.edges().iter().map(|e| e.relation))
        .find(|&r| r as usize >= shape.n_relations);
    match bad {
        Some(r) => Err(Error::IdOutOfRange {
            what: "relation",
            id: r,
            len: shape.n_relations,
        }),
        None => Ok(()),
    }
}

/// Forward pass. See the module docs for the equations.
pub fn score_subgraph(params: &ModelParams, sg: &EnclosingSubgraph) -> Result<ScoredSubgraph> {
    validate(params, sg)?;
    let layout = params.shape().layout();
    let p = params.values();
    let d = layout.dim;
    let n = sg.num_nodes();
    let labels = label_nodes(sg);
    let edges: Vec<(usize, RelationId, usize)> = sg
        .edges()
        .iter()
        .map(|e| (e.src as usize, e.relation, e.dst as usize))
        .collect();
    let m = edges.len();

    let w_in = &p[layout.w_in..layout.w_in + d * layout.label_dim];
    let mut nodes0 = vec![0.0; n * d];
    for (i, label) in labels.iter().enumerate() {
        matvec(w_in, label, &mut nodes0[i * d..(i + 1) * d]);
    }

    let w_e0 = &p[layout.w_edge0..layout.w_edge0 + 3 * d * d];
    let mut pre0 = vec![0.0; m * d];
    let mut input = vec![0.0; 3 * d];
    for (j, &(u, r, v)) in edges.iter().enumerate() {
        input[..d].copy_from_slice(&nodes0[u * d..(u + 1) * d]);
        input[d..2 * d].copy_from_slice(&p[layout.relation_range(r)]);
        input[2 * d..].copy_from_slice(&nodes0[v * d..(v + 1) * d]);
        matvec(w_e0, &input, &mut pre0[j * d..(j + 1) * d]);
    }
    let state0: Vec<f64> = pre0.iter().map(|&x| relu(x)).collect();

    let mut node_states = vec![nodes0];
    let mut edge_state = vec![state0];
    let mut edge_pre = vec![pre0];
    let mut layer_caches = Vec::with_capacity(layout.layers.len());

    for off in &layout.layers {
        let w_msg = &p[off.msg..off.msg + 3 * d * d];
        let w_node = &p[off.node..off.node + d * d];
        let w_gate = &p[off.gate..off.gate + 2 * d * d];
        let prev_nodes = node_states.last().unwrap();
        let prev_edges = edge_state.last().unwrap();

        let mut pre = vec![0.0; m * d];
        for (j, &(u, _, v)) in edges.iter().enumerate() {
            input[..d].copy_from_slice(&prev_nodes[u * d..(u + 1) * d]);
            input[d..2 * d].copy_from_slice(&prev_edges[j * d..(j + 1) * d]);
            input[2 * d..].copy_from_slice(&prev_nodes[v * d..(v + 1) * d]);
            matvec(w_msg, &input, &mut pre[j * d..(j + 1) * d]);
        }
        let msg: Vec<f64> = pre.iter().map(|&x| relu(x)).collect();

        let mut agg = vec![0.0; n * d];
        for (j, &(_, _, v)) in edges.iter().enumerate() {
            for (a, &x) in agg[v * d..(v + 1) * d]
                .iter_mut()
                .zip(&msg[j * d..(j + 1) * d])
            {
                *a += x;
            }
        }

        let mut node_pre = vec![0.0; n * d];
        let mut gate = vec![0.0; n * d];
        let mut next = vec![0.0; n * d];
        let mut gate_in = vec![0.0; 2 * d];
        for i in 0..n {
            let rows = i * d..(i + 1) * d;
            matvec(w_node, &agg[rows.clone()], &mut node_pre[rows.clone()]);
            gate_in[..d].copy_from_slice(&prev_nodes[rows.clone()]);
            gate_in[d..].copy_from_slice(&agg[rows.clone()]);
            matvec(w_gate, &gate_in, &mut gate[rows.clone()]);
            for k in rows {
                gate[k] = sigmoid(gate[k]);
                next[k] = gate[k] * prev_nodes[k] + (1.0 - gate[k]) * relu(node_pre[k]);
            }
        }
        let update = node_pre.iter().map(|&x| relu(x)).collect();
        layer_caches.push(LayerCache {
            agg,
            node_pre,
            update,
            gate,
        });
        node_states.push(next);
        edge_state.push(msg);
        edge_pre.push(pre);
    }

    let last = node_states.last().unwrap();
    let (s, t) = (sg.head() as usize, sg.tail() as usize);
    let mut readout = vec![0.0; 4 * d];
    for i in 0..n {
        for k in 0..d {
            readout[k] += last[i * d + k];
        }
    }
    readout[d..2 * d].copy_from_slice(&last[s * d..(s + 1) * d]);
    readout[2 * d..3 * d].copy_from_slice(&p[layout.relation_range(sg.relation())]);
    readout[3 * d..].copy_from_slice(&last[t * d..(t + 1) * d]);
    let w_out = &p[layout.w_out..layout.w_out + 4 * d];
    let score = w_out.iter().zip(&readout).map(|(a, b)| a * b).sum();

    Ok(ScoredSubgraph {
        score,
        cache: ForwardCache {
            labels,
            edges,
            head: s,
            tail: t,
            relation: sg.relation(),
            nodes: node_states,
            edge_state,
            edge_pre,
            layers: layer_caches,
            readout,
        },
    })
}

/// Adds `dscore * dS/dθ` into `grad`.
pub fn backward(params: &ModelParams, scored: &ScoredSubgraph, dscore: f64, grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), params.len());
    if dscore == 0.0 {
        return;
    }
    let layout = params.shape().layout();
    let p = params.values();
    let d = layout.dim;
    let c = &scored.cache;
    let n = c.labels.len();
    let m = c.edges.len();

    // readout
    let w_out = &p[layout.w_out..layout.w_out + 4 * d];
    for (g, &x) in grad[layout.w_out..layout.w_out + 4 * d]
        .iter_mut()
        .zip(&c.readout)
    {
        *g += dscore * x;
    }
    let mut d_nodes = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..d {
            d_nodes[i * d + k] = dscore * w_out[k];
        }
    }
    for k in 0..d {
        d_nodes[c.head * d + k] += dscore * w_out[d + k];
        d_nodes[c.tail * d + k] += dscore * w_out[3 * d + k];
    }
    let target_rel = layout.relation_range(c.relation);
    for (k, g) in grad[target_rel].iter_mut().enumerate() {
        *g += dscore * w_out[2 * d + k];
    }
    let mut d_edges = vec![0.0; m * d];

    let mut input = vec![0.0; 3 * d];
    let mut d_input = vec![0.0; 3 * d];
    let mut gate_in = vec![0.0; 2 * d];
    let mut d_gate_in = vec![0.0; 2 * d];

    for (li, off) in layout.layers.iter().enumerate().rev() {
        let lc = &c.layers[li];
        let prev_nodes = &c.nodes[li];
        let prev_edges = &c.edge_state[li];
        let pre = &c.edge_pre[li + 1];
        let w_msg = &p[off.msg..off.msg + 3 * d * d];
        let w_node = &p[off.node..off.node + d * d];
        let w_gate = &p[off.gate..off.gate + 2 * d * d];

        let mut d_prev_nodes = vec![0.0; n * d];
        let mut d_agg = vec![0.0; n * d];
        let mut d_node_pre = vec![0.0; d];
        let mut d_gate_pre = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                let idx = i * d + k;
                let g = lc.gate[idx];
                let dn = d_nodes[idx];
                d_prev_nodes[idx] += dn * g;
                let du = dn * (1.0 - g);
                d_node_pre[k] = if lc.node_pre[idx] > 0.0 { du } else { 0.0 };
                let dg = dn * (prev_nodes[idx] - lc.update[idx]);
                d_gate_pre[k] = dg * g * (1.0 - g);
            }
            let rows = i * d..(i + 1) * d;
            {
                let (dw, _) = grad[off.node..].split_at_mut(d * d);
                matvec_backward(
                    w_node,
                    &lc.agg[rows.clone()],
                    &d_node_pre,
                    dw,
                    &mut d_agg[rows.clone()],
                );
            }
            gate_in[..d].copy_from_slice(&prev_nodes[rows.clone()]);
            gate_in[d..].copy_from_slice(&lc.agg[rows.clone()]);
            d_gate_in.fill(0.0);
            {
                let (dw, _) = grad[off.gate..].split_at_mut(2 * d * d);
                matvec_backward(w_gate, &gate_in, &d_gate_pre, dw, &mut d_gate_in);
            }
            for k in 0..d {
                d_prev_nodes[i * d + k] += d_gate_in[k];
                d_agg[i * d + k] += d_gate_in[d + k];
            }
        }

        // messages: e^k = m^k, and m feeds the aggregate at its destination
        let mut d_prev_edges = vec![0.0; m * d];
        let mut d_pre = vec![0.0; d];
        for (j, &(u, _, v)) in c.edges.iter().enumerate() {
            for k in 0..d {
                let dm = d_edges[j * d + k] + d_agg[v * d + k];
                d_pre[k] = if pre[j * d + k] > 0.0 { dm } else { 0.0 };
            }
            input[..d].copy_from_slice(&prev_nodes[u * d..(u + 1) * d]);
            input[d..2 * d].copy_from_slice(&prev_edges[j * d..(j + 1) * d]);
            input[2 * d..].copy_from_slice(&prev_nodes[v * d..(v + 1) * d]);
            d_input.fill(0.0);
            {
                let (dw, _) = grad[off.msg..].split_at_mut(3 * d * d);
                matvec_backward(w_msg, &input, &d_pre, dw, &mut d_input);
            }
            for k in 0..d {
                d_prev_nodes[u * d + k] += d_input[k];
                d_prev_edges[j * d + k] += d_input[d + k];
                d_prev_nodes[v * d + k] += d_input[2 * d + k];
            }
        }
        d_nodes = d_prev_nodes;
        d_edges = d_prev_edges;
    }

    // edge initialisation
    let nodes0 = &c.nodes[0];
    let pre0 = &c.edge_pre[0];
    let w_e0 = &p[layout.w_edge0..layout.w_edge0 + 3 * d * d];
    let mut d_pre = vec![0.0; d];
    for (j, &(u, r, v)) in c.edges.iter().enumerate() {
        for k in 0..d {
            d_pre[k] = if pre0[j * d + k] > 0.0 {
                d_edges[j * d + k]
            } else {
                0.0
            };
        }
        input[..d].copy_from_slice(&nodes0[u * d..(u + 1) * d]);
        input[d..2 * d].copy_from_slice(&p[layout.relation_range(r)]);
        input[2 * d..].copy_from_slice(&nodes0[v * d..(v + 1) * d]);
        d_input.fill(0.0);
        {
            let (dw, _) = grad[layout.w_edge0..].split_at_mut(3 * d * d);
            matvec_backward(w_e0, &input, &d_pre, dw, &mut d_input);
        }
        for k in 0..d {
            d_nodes[u * d + k] += d_input[k];
            d_nodes[v * d + k] += d_input[2 * d + k];
        }
        for (g, &x) in grad[layout.relation_range(r)]
            .iter_mut()
            .zip(&d_input[d..2 * d])
        {
            *g += x;
        }
    }

    // input projection
    let label_dim = layout.label_dim;
    let w_in_grad = &mut grad[layout.w_in..layout.w_in + d * label_dim];
    for (i, label) in c.labels.iter().enumerate() {
        for k in 0..d {
            let g = d_nodes[i * d + k];
            if g == 0.0 {
                continue;
            }
            for (q, &x) in label.iter().enumerate() {
                w_in_grad[k * label_dim + q] += g * x;
            }
        }
    }
}

/// Margin ranking loss `sum_j max(0, margin + S(neg_j) - S(pos))` and its
/// gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    positive: &EnclosingSubgraph,
    negatives: &[EnclosingSubgraph],
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let loss = accumulate_loss_and_grad(params, positive, negatives, margin, &mut grad)?;
    Ok((loss, grad))
}

/// As [`loss_and_grad`], adding the gradient into `grad`.
pub fn accumulate_loss_and_grad(
    params: &ModelParams,
    positive: &EnclosingSubgraph,
    negatives: &[EnclosingSubgraph],
    margin: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "margin loss needs at least one negative".into(),
        ));
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "margin must be >= 0, got {margin}"
        )));
    }
    let pos = score_subgraph(params, positive)?;
    let mut loss = 0.0;
    let mut active = 0usize;
    for neg in negatives {
        let scored = score_subgraph(params, neg)?;
        let hinge = margin + scored.score - pos.score;
        if hinge > 0.0 {
            loss += hinge;
            active += 1;
            backward(params, &scored, 1.0, grad);
        }
    }
    backward(params, &pos, -(active as f64), grad);
    Ok(loss)
}

/// Loss without the reverse pass.
pub fn margin_loss(
    params: &ModelParams,
    positive: &EnclosingSubgraph,
    negatives: &[EnclosingSubgraph],
    margin: f64,
) -> Result<f64> {
    let pos = score_subgraph(params, positive)?.score;
    let mut loss = 0.0;
    for neg in negatives {
        loss += (margin + score_subgraph(params, neg)?.score - pos).max(0.0);
    }
    Ok(loss)
}
