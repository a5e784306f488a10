mod common;

use std::collections::{BTreeSet, HashSet};

use common::{brute_force_ap, tied_scores};
use metaikg::evaluator::{
    auc_pr, average_precision, evaluate, hits_at_k, write_query_tsv, EvalConfig, EvalData,
    RankedQuery, Side, SliceSpec,
};
use metaikg::kg::{KnowledgeGraph, Triplet, Vocab};
use metaikg::mpnn::{ModelParams, ModelShape};
use metaikg::subgraph::{DirectionMode, ExtractOptions};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn average_precision_matches_pairwise_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut cases = 0;
    while cases < 20_000 {
        let n_pos = rng.gen_range(1..=7usize);
        let n_neg = rng.gen_range(0..=8 - n_pos);
        let pos = if rng.gen_bool(0.8) {
            tied_scores(&mut rng, n_pos)
        } else {
            (0..n_pos).map(|_| rng.gen::<f64>()).collect()
        };
        let neg = tied_scores(&mut rng, n_neg);
        let got = average_precision(&pos, &neg).unwrap();
        let want = brute_force_ap(&pos, &neg);
        assert_eq!(
            got.to_bits(),
            want.to_bits(),
            "pos {pos:?} neg {neg:?}: {got} vs {want}"
        );
        cases += 1;
    }
}

#[test]
fn paired_scores_pool_positives_and_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2_000 {
        let n = rng.gen_range(1..=4usize);
        let pos = tied_scores(&mut rng, n);
        let neg = tied_scores(&mut rng, n);
        let pairs: Vec<(f64, f64)> = pos.iter().copied().zip(neg.iter().copied()).collect();
        assert_eq!(
            auc_pr(&pairs).unwrap().to_bits(),
            brute_force_ap(&pos, &neg).to_bits()
        );
    }
}

#[test]
fn documented_hits_examples() {
    let q = |pos: f64, negs: Vec<f64>| RankedQuery {
        positive: pos,
        negatives: negs,
        side: Side::Tail,
    };
    let top = q(0.9, vec![0.1; 49]);
    assert_eq!(top.rank(), 1);
    assert!(hits_at_k(&top, 10));

    let bottom = q(0.0, (1..=49).map(|i| i as f64).collect());
    assert_eq!(bottom.rank(), 50);
    assert!(!hits_at_k(&bottom, 10));

    let mut negs = vec![0.5; 10];
    negs.extend(vec![0.1; 39]);
    let tied = q(0.5, negs);
    assert_eq!(tied.rank(), 11);
    assert!(!hits_at_k(&tied, 10));
}

proptest! {
    #[test]
    fn hits_is_monotone_in_k(pos in 0u8..6, negs in prop::collection::vec(0u8..6, 0..60)) {
        let q = RankedQuery {
            positive: pos as f64,
            negatives: negs.iter().map(|&x| x as f64).collect(),
            side: Side::Head,
        };
        let mut prev = false;
        for k in 1..=62 {
            let h = hits_at_k(&q, k);
            prop_assert!(h || !prev);
            prev = h;
        }
    }

    #[test]
    fn ranks_ignore_monotone_rescaling(pos in -5.0f64..5.0, negs in prop::collection::vec(-5.0f64..5.0, 0..60), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
        let f = |x: f64| (x * scale + shift).atan() * 3.0;
        let q = RankedQuery { positive: pos, negatives: negs.clone(), side: Side::Head };
        let mapped = RankedQuery {
            positive: f(pos),
            negatives: negs.iter().map(|&x| f(x)).collect(),
            side: Side::Head,
        };
        prop_assume!(negs.iter().all(|&n| (n > pos) == (f(n) > f(pos)) && (n == pos) == (f(n) == f(pos))));
        prop_assert_eq!(q.rank(), mapped.rank());
    }
}

struct Fixture {
    graph: KnowledgeGraph,
    test: Vec<Triplet>,
    relations: Vocab,
    train_counts: Vec<usize>,
}

/// Dense random graph on 80 entities whose test triplets are a random sample
/// of its own edges, so positives and corruptions are structurally alike.
fn random_fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 80u32;
    let n_rel = 3u32;
    let mut edges = BTreeSet::new();
    while edges.len() < 1_500 {
        let h = rng.gen_range(0..n);
        let t = rng.gen_range(0..n);
        if h != t {
            edges.insert(Triplet::new(h, rng.gen_range(0..n_rel), t));
        }
    }
    let edges: Vec<Triplet> = edges.into_iter().collect();
    let graph = KnowledgeGraph::build(&edges, n as usize, n_rel as usize).unwrap();
    let test: Vec<Triplet> = edges.choose_multiple(&mut rng, 150).copied().collect();
    Fixture {
        graph,
        test,
        relations: Vocab::from_names(["p", "q", "s"]),
        train_counts: vec![3, 8, 40],
    }
}

fn eval_config() -> EvalConfig {
    EvalConfig {
        seed: 4,
        extract: ExtractOptions {
            hops: 1,
            max_nodes: 100,
            directions: DirectionMode::PathConsistent,
        },
        ..EvalConfig::default()
    }
}

fn params(seed: u64) -> ModelParams {
    let shape = ModelShape {
        n_relations: 3,
        dim: 8,
        hops: 1,
        layers: 1,
    };
    ModelParams::init(shape, seed)
}

fn data(f: &Fixture, slices: Vec<SliceSpec>) -> EvalData<'_> {
    EvalData {
        test_graph: &f.graph,
        test_triplets: &f.test,
        relations: &f.relations,
        train_counts: &f.train_counts,
        slices,
        relation_filter: None,
    }
}

#[test]
fn untrained_model_ranks_like_chance() {
    let f = random_fixture(1);
    let mut hits = Vec::new();
    for seed in 0..3 {
        let out = evaluate(&params(seed), &data(&f, vec![]), &eval_config()).unwrap();
        assert!(out.report.n_test_used >= 100, "{}", out.report.n_test_used);
        hits.push(out.report.hits_at_10);
    }
    let mean = hits.iter().sum::<f64>() / hits.len() as f64;
    assert!((mean - 0.2).abs() <= 0.1, "{hits:?}");
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let f = random_fixture(2);
    let slices = vec![
        SliceSpec::at_most(5),
        SliceSpec::at_most(10),
        SliceSpec::few_shot(9.5),
    ];
    let a = evaluate(&params(0), &data(&f, slices.clone()), &eval_config()).unwrap();
    let b = evaluate(&params(0), &data(&f, slices), &eval_config()).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    assert_eq!(a.report.to_csv(), b.report.to_csv());

    let dir = tempfile::tempdir().unwrap();
    a.report.write(dir.path()).unwrap();
    let json = std::fs::read_to_string(dir.path().join("eval.json")).unwrap();
    let back: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(back["n_test_used"], a.report.n_test_used);
    assert!(std::fs::read_to_string(dir.path().join("eval.csv"))
        .unwrap()
        .starts_with("scope,metric"));
}

#[test]
fn smaller_slices_are_subsets_of_larger_ones() {
    let f = random_fixture(3);
    let slices = vec![
        SliceSpec::at_most(5),
        SliceSpec::at_most(10),
        SliceSpec::at_most(1),
    ];
    let out = evaluate(&params(1), &data(&f, slices), &eval_config()).unwrap();
    let r = &out.report;
    let small = &r.slices["K<=5"];
    let large = &r.slices["K<=10"];
    assert!(small.metrics.triplets <= large.metrics.triplets);
    assert!(small.relations <= large.relations);
    assert!(large.metrics.triplets < r.n_test_used);
    let by_rel = |rel: &str| r.per_relation.get(rel).map_or(0, |m| m.triplets);
    assert_eq!(small.metrics.triplets, by_rel("p"));
    assert_eq!(large.metrics.triplets, by_rel("p") + by_rel("q"));
    assert!(!r.slices.contains_key("K<=1"));
    assert_eq!(r.notes.len(), 1);
}

#[test]
fn relation_filter_and_query_dump() {
    let f = random_fixture(4);
    let mut d = data(&f, vec![]);
    d.relation_filter = Some(HashSet::from([2]));
    let out = evaluate(&params(2), &d, &eval_config()).unwrap();
    assert!(out.queries.iter().all(|q| q.triplet.relation == 2));
    assert_eq!(
        out.report.per_relation.keys().collect::<Vec<_>>(),
        vec!["s"]
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("queries.tsv");
    let entities = Vocab::from_names((0..80).map(|i| format!("n{i}")));
    write_query_tsv(&path, &out.queries, &entities, &f.relations).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * out.queries.len());
    let first = text.lines().nth(1).unwrap();
    assert_eq!(first.split('\t').nth(1), Some("s"));
}

#[test]
fn empty_usable_set_is_an_error() {
    let f = random_fixture(5);
    let mut d = data(&f, vec![]);
    d.test_triplets = &[];
    assert!(evaluate(&params(0), &d, &eval_config()).is_err());
}
