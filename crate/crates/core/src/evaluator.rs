//! Ranking evaluation against sampled corruptions.
//!
//! Every usable test triplet yields two ranking queries, one against head
//! corruptions and one against tail corruptions, and one positive/negative
//! pair for AUC-PR.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triplet, Vocab};
use crate::mpnn::{score_subgraph, ModelParams};
use crate::subgraph::{extract_pruned, ExtractOptions};

pub const DEFAULT_NEGATIVES_PER_SIDE: usize = 49;
pub const DEFAULT_HITS_K: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Head => "head",
            Side::Tail => "tail",
        }
    }

    fn corrupt(self, t: &Triplet, e: EntityId) -> Triplet {
        match self {
            Side::Head => Triplet::new(e, t.relation, t.tail),
            Side::Tail => Triplet::new(t.head, t.relation, e),
        }
    }

    fn original(self, t: &Triplet) -> EntityId {
        match self {
            Side::Head => t.head,
            Side::Tail => t.tail,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedQuery {
    pub positive: f64,
    pub negatives: Vec<f64>,
    pub side: Side,
}

impl RankedQuery {
    /// `1 + #{neg >= pos}`
    pub fn rank(&self) -> usize {
        1 + self
            .negatives
            .iter()
            .filter(|&&n| n >= self.positive)
            .count()
    }
}

pub fn hits_at_k(q: &RankedQuery, k: usize) -> bool {
    q.rank() <= k
}

/// Average precision of positives against negatives, with every negative
/// placed ahead of any positive it ties with.
pub fn auc_pr(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "auc_pr needs at least one pair".into(),
        ));
    }
    let pos: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let neg: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    average_precision(&pos, &neg)
}

pub fn average_precision(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument(
            "average precision needs a positive".into(),
        ));
    }
    if positives.iter().chain(negatives).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut items: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    // descending score, negatives first among equals
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &(_, is_pos)) in items.iter().enumerate() {
        if is_pos {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / positives.len() as f64)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seeded generator for one (triplet, stream) pair.
pub fn query_rng(seed: u64, t: &Triplet, stream: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for v in [t.head as u64, t.relation as u64, t.tail as u64, stream] {
        h = splitmix64(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Facts a corruption must avoid under the filtered protocol.
pub struct KnownFacts<'a> {
    graph: &'a KnowledgeGraph,
    extra: HashSet<Triplet>,
    entities: Vec<EntityId>,
}

impl<'a> KnownFacts<'a> {
    pub fn new(graph: &'a KnowledgeGraph, extra: &[Triplet]) -> Self {
        let entities = (0..graph.n_entities() as EntityId)
            .filter(|&e| !graph.out_edges(e).is_empty() || !graph.in_edges(e).is_empty())
            .collect();
        Self {
            graph,
            extra: extra.iter().copied().collect(),
            entities,
        }
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.graph.contains(t) || self.extra.contains(t)
    }

    /// Entities with at least one edge in the graph.
    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }
}

/// `n` distinct corruptions of `t` on `side`, drawn uniformly from the graph's
/// entities. The original entity is never used; with `filtered` set, neither is
/// any corruption that is a known fact.
pub fn sample_eval_negatives(
    facts: &KnownFacts<'_>,
    t: &Triplet,
    side: Side,
    n: usize,
    filtered: bool,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one negative".into()));
    }
    let original = side.original(t);
    let candidates: Vec<Triplet> = facts
        .entities()
        .iter()
        .filter(|&&e| e != original)
        .map(|&e| side.corrupt(t, e))
        .filter(|c| !filtered || !facts.contains(c))
        .collect();
    if candidates.len() < n {
        return Err(Error::InsufficientNegatives {
            needed: n,
            available: candidates.len(),
        });
    }
    let mut rng = query_rng(seed, t, side as u64);
    Ok(candidates.choose_multiple(&mut rng, n).copied().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub label: String,
    /// Relations with at most this many training triplets.
    pub max_train_count: f64,
}

impl SliceSpec {
    pub fn at_most(k: usize) -> Self {
        Self {
            label: format!("K<={k}"),
            max_train_count: k as f64,
        }
    }

    pub fn few_shot(threshold: f64) -> Self {
        Self {
            label: "K<=K_T".into(),
            max_train_count: threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub negatives_per_side: usize,
    pub hits_k: usize,
    pub filtered: bool,
    pub seed: u64,
    pub extract: ExtractOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            negatives_per_side: DEFAULT_NEGATIVES_PER_SIDE,
            hits_k: DEFAULT_HITS_K,
            filtered: true,
            seed: 0,
            extract: ExtractOptions::default(),
        }
    }
}

pub struct EvalData<'a> {
    pub test_graph: &'a KnowledgeGraph,
    pub test_triplets: &'a [Triplet],
    pub relations: &'a Vocab,
    /// Training-triplet count per relation id.
    pub train_counts: &'a [usize],
    pub slices: Vec<SliceSpec>,
    /// Restrict evaluation to these relations.
    pub relation_filter: Option<HashSet<RelationId>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub triplet: Triplet,
    pub positive: f64,
    pub head_rank: usize,
    pub tail_rank: usize,
    pub auc_side: Side,
    pub auc_negative: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub triplets: usize,
    pub auc_pr: f64,
    pub hits_at_10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub max_train_count: f64,
    pub relations: usize,
    #[serde(flatten)]
    pub metrics: GroupMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_pr: f64,
    pub hits_at_10: f64,
    pub hits_k: usize,
    pub n_test_used: usize,
    pub n_test_skipped: usize,
    pub skipped_no_subgraph: usize,
    pub skipped_insufficient_negatives: usize,
    pub per_relation: BTreeMap<String, GroupMetrics>,
    pub slices: BTreeMap<String, SliceMetrics>,
    pub notes: Vec<String>,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub queries: Vec<QueryRecord>,
}

enum Outcome {
    Used(QueryRecord),
    NoSubgraph,
    Insufficient,
}

fn score_or_floor(
    params: &ModelParams,
    g: &KnowledgeGraph,
    t: &Triplet,
    opts: &ExtractOptions,
) -> Result<f64> {
    Ok(match extract_pruned(g, t, opts)? {
        Some(sg) => score_subgraph(params, &sg)?.score,
        None => f64::NEG_INFINITY,
    })
}

fn evaluate_one(
    params: &ModelParams,
    facts: &KnownFacts<'_>,
    t: &Triplet,
    config: &EvalConfig,
) -> Result<Outcome> {
    let g = facts.graph;
    let mut sides = Vec::with_capacity(2);
    for side in [Side::Head, Side::Tail] {
        match sample_eval_negatives(
            facts,
            t,
            side,
            config.negatives_per_side,
            config.filtered,
            config.seed,
        ) {
            Ok(n) => sides.push(n),
            Err(Error::InsufficientNegatives { .. }) => return Ok(Outcome::Insufficient),
            Err(e) => return Err(e),
        }
    }
    let Some(pos_sg) = extract_pruned(g, t, &config.extract)? else {
        return Ok(Outcome::NoSubgraph);
    };
    let positive = score_subgraph(params, &pos_sg)?.score;
    let mut queries = Vec::with_capacity(2);
    for (side, negs) in [Side::Head, Side::Tail].into_iter().zip(&sides) {
        let negatives = negs
            .iter()
            .map(|n| score_or_floor(params, g, n, &config.extract))
            .collect::<Result<Vec<_>>>()?;
        queries.push(RankedQuery {
            positive,
            negatives,
            side,
        });
    }
    let auc_side = if query_rng(config.seed, t, 2).gen_bool(0.5) {
        Side::Head
    } else {
        Side::Tail
    };
    let auc_negative = queries[auc_side as usize].negatives[0];
    Ok(Outcome::Used(QueryRecord {
        triplet: *t,
        positive,
        head_rank: queries[0].rank(),
        tail_rank: queries[1].rank(),
        auc_side,
        auc_negative,
    }))
}

fn group_metrics<'q>(
    records: impl Iterator<Item = &'q QueryRecord>,
    k: usize,
) -> Result<GroupMetrics> {
    let mut pairs = Vec::new();
    let mut hits = 0usize;
    for r in records {
        pairs.push((r.positive, r.auc_negative));
        hits += (r.head_rank <= k) as usize + (r.tail_rank <= k) as usize;
    }
    Ok(GroupMetrics {
        triplets: pairs.len(),
        auc_pr: auc_pr(&pairs)?,
        hits_at_10: hits as f64 / (2 * pairs.len()) as f64,
    })
}

/// Scores every test triplet and its corruptions against the test graph.
pub fn evaluate(
    params: &ModelParams,
    data: &EvalData<'_>,
    config: &EvalConfig,
) -> Result<EvalOutcome> {
    let facts = KnownFacts::new(data.test_graph, data.test_triplets);
    let selected: Vec<&Triplet> = data
        .test_triplets
        .iter()
        .filter(|t| {
            data.relation_filter
                .as_ref()
                .map_or(true, |f| f.contains(&t.relation))
        })
        .collect();
    let outcomes: Vec<Outcome> = selected
        .par_iter()
        .map(|t| evaluate_one(params, &facts, t, config))
        .collect::<Result<_>>()?;

    let mut queries = Vec::new();
    let (mut no_sg, mut insufficient) = (0, 0);
    for o in outcomes {
        match o {
            Outcome::Used(q) => queries.push(q),
            Outcome::NoSubgraph => no_sg += 1,
            Outcome::Insufficient => insufficient += 1,
        }
    }
    if queries.is_empty() {
        return Err(Error::NoUsableTriplets);
    }
    let k = config.hits_k;
    let overall = group_metrics(queries.iter(), k)?;

    let name = |r: RelationId| {
        data.relations
            .name(r)
            .map(str::to_owned)
            .unwrap_or_else(|| r.to_string())
    };
    let mut by_relation: BTreeMap<RelationId, Vec<&QueryRecord>> = BTreeMap::new();
    for q in &queries {
        by_relation.entry(q.triplet.relation).or_default().push(q);
    }
    let mut per_relation = BTreeMap::new();
    for (r, qs) in &by_relation {
        per_relation.insert(name(*r), group_metrics(qs.iter().copied(), k)?);
    }

    let train_count = |r: RelationId| data.train_counts.get(r as usize).copied().unwrap_or(0);
    let mut slices = BTreeMap::new();
    let mut notes = Vec::new();
    for spec in &data.slices {
        let members: Vec<&QueryRecord> = queries
            .iter()
            .filter(|q| train_count(q.triplet.relation) as f64 <= spec.max_train_count)
            .collect();
        if members.is_empty() {
            notes.push(format!(
                "slice {} omitted: no test relation has at most {} training triplets",
                spec.label, spec.max_train_count
            ));
            continue;
        }
        let relations = members
            .iter()
            .map(|q| q.triplet.relation)
            .collect::<HashSet<_>>()
            .len();
        slices.insert(
            spec.label.clone(),
            SliceMetrics {
                max_train_count: spec.max_train_count,
                relations,
                metrics: group_metrics(members.into_iter(), k)?,
            },
        );
    }

    let report = EvalReport {
        auc_pr: overall.auc_pr,
        hits_at_10: overall.hits_at_10,
        hits_k: k,
        n_test_used: queries.len(),
        n_test_skipped: no_sg + insufficient,
        skipped_no_subgraph: no_sg,
        skipped_insufficient_negatives: insufficient,
        per_relation,
        slices,
        notes,
    };
    Ok(EvalOutcome { report, queries })
}

impl EvalReport {
    /// Rows of `scope,metric,value,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,metric,value,count\n");
        let mut row = |scope: &str, m: &GroupMetrics| {
            let _ = writeln!(out, "{scope},auc_pr,{},{}", m.auc_pr, m.triplets);
            let _ = writeln!(
                out,
                "{scope},hits_at_{},{},{}",
                self.hits_k, m.hits_at_10, m.triplets
            );
        };
        row(
            "all",
            &GroupMetrics {
                triplets: self.n_test_used,
                auc_pr: self.auc_pr,
                hits_at_10: self.hits_at_10,
            },
        );
        for (label, s) in &self.slices {
            row(&format!("slice:{label}"), &s.metrics);
        }
        for (name, m) in &self.per_relation {
            row(&format!("relation:{name}"), m);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = dir.join("eval.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("eval.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// `head relation tail side rank`, one line per ranking query.
pub fn write_query_tsv(
    path: &Path,
    queries: &[QueryRecord],
    entities: &Vocab,
    relations: &Vocab,
) -> Result<()> {
    let mut out = String::from("head\trelation\ttail\tside\trank\n");
    let ent = |e: EntityId| {
        entities
            .name(e)
            .map(str::to_owned)
            .unwrap_or_else(|| e.to_string())
    };
    let rel = |r: RelationId| {
        relations
            .name(r)
            .map(str::to_owned)
            .unwrap_or_else(|| r.to_string())
    };
    for q in queries {
        let t = q.triplet;
        for (side, rank) in [(Side::Head, q.head_rank), (Side::Tail, q.tail_rank)] {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                ent(t.head),
                rel(t.relation),
                ent(t.tail),
                side.as_str(),
                rank
            );
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(pos: f64, negs: Vec<f64>) -> RankedQuery {
        RankedQuery {
            positive: pos,
            negatives: negs,
            side: Side::Tail,
        }
    }

    #[test]
    fn documented_rank_examples() {
        assert!(hits_at_k(&q(0.9, vec![0.1; 49]), 10));
        assert_eq!(q(0.9, vec![0.1; 49]).rank(), 1);
        assert_eq!(q(-1.0, vec![0.0; 49]).rank(), 50);
        assert!(!hits_at_k(&q(-1.0, vec![0.0; 49]), 10));
        let mut negs = vec![0.5; 10];
        negs.extend(vec![0.1; 39]);
        assert_eq!(q(0.5, negs.clone()).rank(), 11);
        assert!(!hits_at_k(&q(0.5, negs), 10));
    }

    #[test]
    fn documented_ap_examples() {
        assert_eq!(auc_pr(&[(2.0, 1.0), (3.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(
            auc_pr(&[(1.0, 1.0), (1.0, 1.0)]).unwrap(),
            (1.0 / 3.0 + 2.0 / 4.0) / 2.0
        );
        assert_eq!(auc_pr(&[(2.0, 3.0)]).unwrap(), 0.5);
        assert!(auc_pr(&[]).is_err());
        assert!(auc_pr(&[(f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn negative_infinity_ranks_last() {
        assert_eq!(q(-5.0, vec![f64::NEG_INFINITY; 49]).rank(), 1);
        assert_eq!(auc_pr(&[(-5.0, f64::NEG_INFINITY)]).unwrap(), 1.0);
    }

    fn sparse_graph(n: u32) -> KnowledgeGraph {
        let edges: Vec<Triplet> = (0..n).map(|i| Triplet::new(i, 0, (i + 1) % n)).collect();
        KnowledgeGraph::build(&edges, n as usize, 1).unwrap()
    }

    #[test]
    fn negatives_are_distinct_filtered_and_deterministic() {
        let g = sparse_graph(100);
        let facts = KnownFacts::new(&g, &[]);
        let t = Triplet::new(3, 0, 4);
        let a = sample_eval_negatives(&facts, &t, Side::Tail, 49, true, 7).unwrap();
        assert_eq!(a.len(), 49);
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 49);
        assert!(a
            .iter()
            .all(|c| c.head == 3 && c.tail != 4 && !g.contains(c)));
        assert_eq!(
            a,
            sample_eval_negatives(&facts, &t, Side::Tail, 49, true, 7).unwrap()
        );
        assert_ne!(
            a,
            sample_eval_negatives(&facts, &t, Side::Tail, 49, true, 8).unwrap()
        );
    }

    #[test]
    fn too_few_entities_is_insufficient() {
        let g = sparse_graph(3);
        let facts = KnownFacts::new(&g, &[]);
        let r = sample_eval_negatives(&facts, &Triplet::new(0, 0, 2), Side::Head, 49, true, 0);
        assert!(matches!(
            r,
            Err(Error::InsufficientNegatives { needed: 49, .. })
        ));
    }

    #[test]
    fn filtering_excludes_test_triplets() {
        let g = sparse_graph(4);
        let extra = [Triplet::new(0, 0, 3)];
        let facts = KnownFacts::new(&g, &extra);
        let t = Triplet::new(0, 0, 2);
        // tails other than 2: 0 (free), 1 (graph fact), 3 (test fact)
        let negs = sample_eval_negatives(&facts, &t, Side::Tail, 1, true, 0).unwrap();
        assert_eq!(negs, vec![Triplet::new(0, 0, 0)]);
        assert_eq!(
            sample_eval_negatives(&facts, &t, Side::Tail, 3, false, 0)
                .unwrap()
                .len(),
            3
        );
    }
}
