//! Test-only oracles shared by the integration suites. Nothing here calls
//! into the code path it checks except through the public scoring entry
//! points.
#![allow(dead_code)]

use std::collections::BTreeSet;

use metaikg::kg::{KnowledgeGraph, Triplet};
use metaikg::mpnn::{score_subgraph, ModelParams, ModelShape};
use metaikg::subgraph::{EnclosingSubgraph, LocalEdge};
use rand::Rng;

/// Random subgraph with `head = 0`, `tail = n - 1`.
pub fn random_subgraph<R: Rng>(rng: &mut R, n_relations: u32, hops: u32) -> EnclosingSubgraph {
    let n = rng.gen_range(2..=6u32);
    let m = rng.gen_range(1..=9usize);
    let edges = (0..m)
        .map(|_| LocalEdge {
            src: rng.gen_range(0..n),
            relation: rng.gen_range(0..n_relations),
            dst: rng.gen_range(0..n),
        })
        .collect();
    let nodes = (0..n).map(|i| i * 3 + rng.gen_range(0..3)).collect();
    EnclosingSubgraph::from_parts(nodes, edges, 0, n - 1, rng.gen_range(0..n_relations), hops)
        .unwrap()
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel_err: f64,
    /// Coordinates above the relative tolerance whose absolute error is at
    /// most 1e-8, the finite-difference rounding level for losses of order 10.
    pub within_abs_floor: usize,
    pub failures: Vec<(usize, f64, f64)>,
    /// Coordinates whose finite-difference stencil crosses a ReLU or hinge kink.
    pub kinked: usize,
}

fn pattern(
    params: &ModelParams,
    pos: &EnclosingSubgraph,
    negs: &[EnclosingSubgraph],
    margin: f64,
) -> (f64, Vec<bool>) {
    let p = score_subgraph(params, pos).unwrap();
    let mut pat = p.relu_pattern();
    let mut loss = 0.0;
    for n in negs {
        let s = score_subgraph(params, n).unwrap();
        pat.extend(s.relu_pattern());
        let h = margin + s.score - p.score;
        pat.push(h > 0.0);
        loss += h.max(0.0);
    }
    (loss, pat)
}

/// Central differences with step `eps` on every coordinate.
/// Relative error is `|a - n| / max(|a|, |n|)`; a coordinate fails when it
/// exceeds `tol` and the absolute error exceeds 1e-8, since coordinates whose
/// true derivative is zero have no meaningful relative error.
/// `worst_rel_err` is taken over coordinates with magnitude at least 1e-4.
pub fn check_gradient(
    params: &ModelParams,
    pos: &EnclosingSubgraph,
    negs: &[EnclosingSubgraph],
    margin: f64,
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> GradCheck {
    let (_, base) = pattern(params, pos, negs, margin);
    let mut out = GradCheck {
        checked: 0,
        worst_rel_err: 0.0,
        within_abs_floor: 0,
        failures: Vec::new(),
        kinked: 0,
    };
    let mut probe = params.clone();
    for k in 0..params.len() {
        let orig = params.values()[k];
        probe.values_mut()[k] = orig + eps;
        let (up, pat_up) = pattern(&probe, pos, negs, margin);
        probe.values_mut()[k] = orig - eps;
        let (down, pat_down) = pattern(&probe, pos, negs, margin);
        probe.values_mut()[k] = orig;
        if pat_up != base || pat_down != base {
            out.kinked += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[k];
        let err = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { err / scale };
        out.checked += 1;
        if scale >= 1e-4 {
            out.worst_rel_err = out.worst_rel_err.max(rel);
        }
        if rel > tol && err <= 1e-8 {
            out.within_abs_floor += 1;
        } else if rel > tol {
            out.failures.push((k, a, numeric));
        }
    }
    out
}

/// Straight-line forward pass written against nested `Vec` matrices, read
/// off the parameter vector block by block in the documented order.
pub fn reference_score(params: &ModelParams, sg: &EnclosingSubgraph) -> f64 {
    let ModelShape {
        n_relations,
        dim: d,
        hops,
        layers,
    } = *params.shape();
    let ld = 2 * (hops as usize + 1);
    let mut it = params.values().iter().copied();
    let mut mat = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| it.next().unwrap()).collect())
            .collect()
    };
    let rel = mat(n_relations, d);
    let w_in = mat(d, ld);
    let w_e0 = mat(d, 3 * d);
    let mut layer_w = Vec::new();
    for _ in 0..layers {
        let msg = mat(d, 3 * d);
        let node = mat(d, d);
        let gate = mat(d, 2 * d);
        layer_w.push((msg, node, gate));
    }
    let w_out = mat(1, 4 * d).remove(0);

    let mv = |w: &Vec<Vec<f64>>, x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    let relu = |v: Vec<f64>| -> Vec<f64> {
        v.into_iter()
            .map(|x| if x > 0.0 { x } else { 0.0 })
            .collect()
    };
    let cat =
        |parts: &[&[f64]]| -> Vec<f64> { parts.iter().flat_map(|p| p.iter().copied()).collect() };

    let n = sg.num_nodes();
    let labels: Vec<Vec<f64>> = sg
        .distances()
        .iter()
        .map(|&(ds, dt)| {
            let mut l = vec![0.0; ld];
            l[ds as usize] = 1.0;
            l[ld / 2 + dt as usize] = 1.0;
            l
        })
        .collect();
    let mut h: Vec<Vec<f64>> = labels.iter().map(|l| mv(&w_in, l)).collect();
    let mut e: Vec<Vec<f64>> = sg
        .edges()
        .iter()
        .map(|ed| {
            relu(mv(
                &w_e0,
                &cat(&[
                    &h[ed.src as usize],
                    &rel[ed.relation as usize],
                    &h[ed.dst as usize],
                ]),
            ))
        })
        .collect();
    for (msg_w, node_w, gate_w) in &layer_w {
        let msgs: Vec<Vec<f64>> = sg
            .edges()
            .iter()
            .zip(&e)
            .map(|(ed, ev)| {
                relu(mv(
                    msg_w,
                    &cat(&[&h[ed.src as usize], ev, &h[ed.dst as usize]]),
                ))
            })
            .collect();
        let mut agg = vec![vec![0.0; d]; n];
        for (ed, m) in sg.edges().iter().zip(&msgs) {
            for k in 0..d {
                agg[ed.dst as usize][k] += m[k];
            }
        }
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let u = relu(mv(node_w, &agg[i]));
            let g: Vec<f64> = mv(gate_w, &cat(&[&h[i], &agg[i]]))
                .into_iter()
                .map(|x| 1.0 / (1.0 + (-x).exp()))
                .collect();
            next.push(
                (0..d)
                    .map(|k| g[k] * h[i][k] + (1.0 - g[k]) * u[k])
                    .collect::<Vec<f64>>(),
            );
        }
        h = next;
        e = msgs;
    }
    let mut pooled = vec![0.0; d];
    for hv in &h {
        for k in 0..d {
            pooled[k] += hv[k];
        }
    }
    let z = cat(&[
        &pooled,
        &h[sg.head() as usize],
        &rel[sg.relation() as usize],
        &h[sg.tail() as usize],
    ]);
    w_out.iter().zip(&z).map(|(a, b)| a * b).sum()
}

/// Nodes on any directed head -> tail walk of at most `hops + 1` edges in `g`
/// minus every copy of the target edge, found by exhaustive enumeration.
pub fn walk_oracle(
    g: &KnowledgeGraph,
    target: &Triplet,
    hops: u32,
) -> Option<(BTreeSet<u32>, Vec<Triplet>)> {
    let usable: Vec<Triplet> = g.edges().iter().copied().filter(|e| e != target).collect();
    let mut on_walk = BTreeSet::new();
    let mut stack = vec![vec![target.head]];
    while let Some(walk) = stack.pop() {
        let last = *walk.last().unwrap();
        if last == target.tail && walk.len() > 1 {
            on_walk.extend(walk.iter().copied());
        }
        if walk.len() as u32 > hops + 1 {
            continue;
        }
        for e in usable.iter().filter(|e| e.head == last) {
            let mut next = walk.clone();
            next.push(e.tail);
            stack.push(next);
        }
    }
    if on_walk.is_empty() || target.head == target.tail {
        return None;
    }
    let mut edges: Vec<Triplet> = usable
        .into_iter()
        .filter(|e| on_walk.contains(&e.head) && on_walk.contains(&e.tail))
        .collect();
    edges.sort();
    Some((on_walk, edges))
}

/// Random multigraph on 2..=12 entities with a mix of sparse and dense cases.
pub fn random_graph<R: Rng>(rng: &mut R, n_relations: u32) -> KnowledgeGraph {
    let n = rng.gen_range(2..=12u32);
    let density = rng.gen_range(0.05..0.45);
    let mut edges = BTreeSet::new();
    for h in 0..n {
        for t in 0..n {
            for r in 0..n_relations {
                if rng.gen_bool(density / n_relations as f64) {
                    edges.insert(Triplet::new(h, r, t));
                }
            }
        }
    }
    let edges: Vec<Triplet> = edges.into_iter().collect();
    KnowledgeGraph::build(&edges, n as usize, n_relations as usize).unwrap()
}

/// Targets to probe on `g`: every stored edge plus a few absent ones.
pub fn probe_targets<R: Rng>(rng: &mut R, g: &KnowledgeGraph) -> Vec<Triplet> {
    let n = g.n_entities() as u32;
    let mut out: Vec<Triplet> = g.edges().to_vec();
    for _ in 0..4 {
        out.push(Triplet::new(
            rng.gen_range(0..n),
            rng.gen_range(0..g.n_relations() as u32),
            rng.gen_range(0..n),
        ));
    }
    out
}

/// Compares extraction against [`walk_oracle`] on one target. Returns a
/// description of the first mismatch.
pub fn compare_with_oracle(
    g: &KnowledgeGraph,
    target: &Triplet,
    hops: u32,
) -> Result<bool, String> {
    use metaikg::subgraph::{extract_enclosing_subgraph, DirectionMode};
    let got = extract_enclosing_subgraph(g, target, hops, DirectionMode::PathConsistent)
        .map_err(|e| e.to_string())?;
    let want = walk_oracle(g, target, hops);
    match (got, want) {
        (None, None) => Ok(false),
        (Some(sg), Some((nodes, edges))) => {
            let got_nodes: BTreeSet<u32> = sg.nodes().iter().copied().collect();
            let mut got_edges = sg.global_edges();
            got_edges.sort();
            if got_nodes != nodes {
                return Err(format!(
                    "{target:?} h={hops}: nodes {got_nodes:?} vs oracle {nodes:?}"
                ));
            }
            if got_edges != edges {
                return Err(format!(
                    "{target:?} h={hops}: edges {got_edges:?} vs oracle {edges:?}"
                ));
            }
            Ok(true)
        }
        (got, want) => Err(format!(
            "{target:?} h={hops}: extraction {} but oracle {}",
            if got.is_some() {
                "found a subgraph"
            } else {
                "found none"
            },
            if want.is_some() {
                "found one"
            } else {
                "found none"
            },
        )),
    }
}

/// Average precision by pairwise counting. Each positive's position in the
/// pessimistic ordering is `1 + #{scores above} + #{negatives tied} + #{tied
/// positives listed before it}`; the precision terms are then added in
/// position order, which is the only ordering the definition fixes.
pub fn brute_force_ap(positives: &[f64], negatives: &[f64]) -> f64 {
    let n = positives.len() + negatives.len();
    let mut terms = vec![None; n + 1];
    for (i, &p) in positives.iter().enumerate() {
        let pos_above = positives.iter().filter(|&&q| q > p).count();
        let pos_tied_before = positives[..i].iter().filter(|&&q| q == p).count();
        let neg_at_or_above = negatives.iter().filter(|&&q| q >= p).count();
        let hits = pos_above + pos_tied_before + 1;
        let position = hits + neg_at_or_above;
        terms[position] = Some(hits as f64 / position as f64);
    }
    let sum: f64 = terms.into_iter().flatten().sum();
    sum / positives.len() as f64
}

/// Random score list of length `len` drawn from a small alphabet so ties are common.
pub fn tied_scores<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| f64::from(rng.gen_range(0..5u8)) * 0.25)
        .collect()
}
