mod common;

use metaikg::mpnn::{loss_and_grad, score_subgraph, ModelParams, ModelShape};
use metaikg::subgraph::{EnclosingSubgraph, LocalEdge};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{check_gradient, random_subgraph, reference_score};

fn shape(hops: u32) -> ModelShape {
    ModelShape {
        n_relations: 4,
        dim: 3,
        hops,
        layers: 2,
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..50 {
        let hops = 1 + i % 3;
        let params = ModelParams::init(shape(hops), i as u64);
        let sg = random_subgraph(&mut rng, 4, hops);
        let fast = score_subgraph(&params, &sg).unwrap().score;
        let slow = reference_score(&params, &sg);
        assert!((fast - slow).abs() <= 1e-10, "case {i}: {fast} vs {slow}");
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    while pairs < 20 {
        let hops = rng.gen_range(1..=3);
        let params = ModelParams::init(shape(hops), rng.gen());
        let pos = random_subgraph(&mut rng, 4, hops);
        let negs: Vec<_> = (0..2).map(|_| random_subgraph(&mut rng, 4, hops)).collect();
        let (loss, grad) = loss_and_grad(&params, &pos, &negs, 10.0).unwrap();
        assert!(loss > 0.0);
        let report = check_gradient(&params, &pos, &negs, 10.0, &grad, 1e-5, 1e-4);
        if report.kinked > 0 {
            continue;
        }
        assert!(
            report.failures.is_empty(),
            "{:?}",
            &report.failures[..report.failures.len().min(5)]
        );
        pairs += 1;
    }
}

#[test]
fn untouched_relations_get_zero_gradient() {
    let s = ModelShape {
        n_relations: 6,
        dim: 4,
        hops: 2,
        layers: 2,
    };
    let params = ModelParams::init(s, 3);
    let mk = |rel_edge, rel_target| {
        EnclosingSubgraph::from_parts(
            vec![0, 1, 2],
            vec![
                LocalEdge {
                    src: 0,
                    relation: rel_edge,
                    dst: 1,
                },
                LocalEdge {
                    src: 1,
                    relation: rel_edge,
                    dst: 2,
                },
            ],
            0,
            2,
            rel_target,
            2,
        )
        .unwrap()
    };
    let (_, grad) = loss_and_grad(&params, &mk(0, 1), &[mk(2, 1)], 100.0).unwrap();
    let layout = s.layout();
    for r in 3..6 {
        assert!(
            grad[layout.relation_range(r)].iter().all(|&g| g == 0.0),
            "relation {r}"
        );
    }
    assert!(grad[layout.relation_range(0)].iter().any(|&g| g != 0.0));
    assert!(grad[layout.relation_range(2)].iter().any(|&g| g != 0.0));
}

fn permuted(sg: &EnclosingSubgraph, perm: &[u32]) -> EnclosingSubgraph {
    let mut nodes = vec![0; sg.num_nodes()];
    for (old, &new) in perm.iter().enumerate() {
        nodes[new as usize] = sg.nodes()[old];
    }
    let edges = sg
        .edges()
        .iter()
        .map(|e| LocalEdge {
            src: perm[e.src as usize],
            relation: e.relation,
            dst: perm[e.dst as usize],
        })
        .collect();
    EnclosingSubgraph::from_parts(
        nodes,
        edges,
        perm[sg.head() as usize],
        perm[sg.tail() as usize],
        sg.relation(),
        sg.hops(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_is_permutation_invariant(seed in any::<u64>(), rot in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(shape(2), seed);
        let sg = random_subgraph(&mut rng, 4, 2);
        let n = sg.num_nodes();
        let mut perm: Vec<u32> = (0..n as u32).collect();
        perm.rotate_left(rot % n);
        perm.reverse();
        let a = score_subgraph(&params, &sg).unwrap().score;
        let b = score_subgraph(&params, &permuted(&sg, &perm)).unwrap().score;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn scores_stay_finite(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(shape(3), seed);
        for v in params.values_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        let sg = random_subgraph(&mut rng, 4, 3);
        let neg = random_subgraph(&mut rng, 4, 3);
        let (loss, grad) = loss_and_grad(&params, &sg, &[neg], 10.0).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert!(grad.iter().all(|g| g.is_finite()));
    }
}
