//! Few-shot sweep: shrink selected relations to K training triplets, retrain,
//! and evaluate on those relations only.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use log::info;
use metaikg::dataset::InductiveDataset;
use metaikg::evaluator::{evaluate, EvalData};
use metaikg::kg::{KnowledgeGraph, RelationId, Triplet};
use metaikg::trainer::train;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::{eval_config, load_dataset, warn_all};
use crate::config::{RunArgs, RunConfig};
use crate::failure::{Failure, Kind};
use crate::output::{write_json, write_text, OutputLock};

/// `None` is the unreduced baseline.
pub fn parse_k(s: &str) -> Result<Option<usize>, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "∞" => Ok(None),
        other => match other.parse::<usize>() {
            Ok(0) => Err("K must be at least 1".into()),
            Ok(k) => Ok(Some(k)),
            Err(_) => Err(format!("`{s}` is neither a count nor `inf`")),
        },
    }
}

/// Upper end of the selection window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum WindowMax {
    Unbounded,
    FewShotThreshold,
    Count(usize),
}

pub fn parse_window_max(s: &str) -> Result<WindowMax, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" | "inf" => Ok(WindowMax::Unbounded),
        "kt" | "k_t" => Ok(WindowMax::FewShotThreshold),
        other => other
            .parse()
            .map(WindowMax::Count)
            .map_err(|_| format!("`{s}` is not a count, `kt` or `none`")),
    }
}

/// Relations whose training count lies in `[min, max]` and that occur among
/// the test triplets.
pub fn select_relations(
    d: &InductiveDataset,
    min: usize,
    max: WindowMax,
    gamma: f64,
) -> Result<Vec<RelationId>, Failure> {
    let counts = d.train_relation_counts();
    let upper = match max {
        WindowMax::Unbounded => f64::INFINITY,
        WindowMax::FewShotThreshold => d.relation_split(gamma)?.threshold,
        WindowMax::Count(c) => c as f64,
    };
    let tested: HashSet<RelationId> = d.test_triplets.iter().map(|t| t.relation).collect();
    Ok((0..counts.len() as RelationId)
        .filter(|r| tested.contains(r))
        .filter(|&r| counts[r as usize] >= min && counts[r as usize] as f64 <= upper)
        .collect())
}

/// Copy of `d` in which each selected relation keeps `k` randomly chosen
/// training triplets. Removed triplets leave the train graph as well.
pub fn reduce_to_k(
    d: &InductiveDataset,
    selected: &[RelationId],
    k: usize,
    seed: u64,
) -> Result<InductiveDataset, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let chosen: HashSet<RelationId> = selected.iter().copied().collect();
    let mut by_relation: BTreeMap<RelationId, Vec<usize>> = BTreeMap::new();
    for (i, t) in d.train_triplets.iter().enumerate() {
        if chosen.contains(&t.relation) {
            by_relation.entry(t.relation).or_default().push(i);
        }
    }
    let mut dropped = vec![false; d.train_triplets.len()];
    let mut removed: HashMap<Triplet, usize> = HashMap::new();
    for idx in by_relation.values_mut() {
        idx.shuffle(&mut rng);
        for &i in idx.iter().skip(k) {
            dropped[i] = true;
            *removed.entry(d.train_triplets[i]).or_default() += 1;
        }
    }
    let train_triplets: Vec<Triplet> = d
        .train_triplets
        .iter()
        .zip(&dropped)
        .filter(|(_, &x)| !x)
        .map(|(t, _)| *t)
        .collect();
    let mut edges = Vec::with_capacity(d.train_graph.edges().len());
    for t in d.train_graph.edges() {
        match removed.get_mut(t) {
            Some(n) if *n > 0 => *n -= 1,
            _ => edges.push(*t),
        }
    }
    let train_graph = KnowledgeGraph::build(
        &edges,
        d.train_graph.n_entities(),
        d.train_graph.n_relations(),
    )?;
    Ok(InductiveDataset {
        train_graph,
        train_triplets,
        ..d.clone()
    })
}

#[derive(Debug, Serialize)]
struct SweepRow {
    k: Option<usize>,
    seed: u64,
    auc_pr: f64,
    hits_at_10: f64,
    test_triplets: usize,
}

fn k_label(k: Option<usize>) -> String {
    k.map_or_else(|| "inf".to_owned(), |k| k.to_string())
}

pub struct SweepRequest<'a> {
    pub run: &'a RunArgs,
    pub ks: Vec<Option<usize>>,
    pub min_train_count: usize,
    pub max_train_count: WindowMax,
}

#[derive(Serialize)]
struct SweepConfig<'a> {
    run: &'a RunConfig,
    ks: Vec<String>,
    min_train_count: usize,
    max_train_count: WindowMax,
    selected_relations: Vec<String>,
}

pub fn ksweep(req: &SweepRequest<'_>) -> Result<(), Failure> {
    let (cfg, warnings) = req.run.resolve()?;
    warn_all(&warnings);
    let out = cfg.out()?.to_path_buf();
    let _lock = OutputLock::acquire(&out)?;
    let d = load_dataset(cfg.dataset()?, &cfg.layout, &cfg.train.extract)?;
    let selected = select_relations(
        &d,
        req.min_train_count,
        req.max_train_count,
        cfg.train.gamma,
    )?;
    if selected.is_empty() {
        return Err(Failure {
            kind: Kind::Data,
            error: anyhow::anyhow!(
                "no test relation has between {} and {:?} training triplets",
                req.min_train_count,
                req.max_train_count
            ),
        });
    }
    let names: Vec<String> = selected
        .iter()
        .map(|&r| d.relations.name(r).unwrap_or("?").to_owned())
        .collect();
    info!("sweeping {} relations: {}", names.len(), names.join(" "));
    write_json(
        &out.join("config.json"),
        &SweepConfig {
            run: &cfg,
            ks: req.ks.iter().map(|k| k_label(*k)).collect(),
            min_train_count: req.min_train_count,
            max_train_count: req.max_train_count,
            selected_relations: names,
        },
    )?;

    let filter: HashSet<RelationId> = selected.iter().copied().collect();
    let mut rows = Vec::new();
    for &k in &req.ks {
        for &seed in &cfg.seeds {
            let data = match k {
                Some(k) => reduce_to_k(&d, &selected, k, seed)?,
                None => d.clone(),
            };
            let train_cfg = cfg.for_seed(seed);
            let split = data.relation_split(train_cfg.gamma)?;
            let (state, _) = train(&train_cfg, &data.train_graph, &data.train_triplets, split)?;
            let counts = data.train_relation_counts();
            let eval_data = EvalData {
                test_graph: &data.test_graph,
                test_triplets: &data.test_triplets,
                relations: &data.relations,
                train_counts: &counts,
                slices: Vec::new(),
                relation_filter: Some(filter.clone()),
            };
            let report = evaluate(
                &state.params,
                &eval_data,
                &eval_config(&cfg.eval, train_cfg.extract, seed),
            )?
            .report;
            info!("K={} seed {seed}: auc_pr {:.4}", k_label(k), report.auc_pr);
            rows.push(SweepRow {
                k,
                seed,
                auc_pr: report.auc_pr,
                hits_at_10: report.hits_at_10,
                test_triplets: report.n_test_used,
            });
        }
    }
    write_text(&out.join("ksweep_runs.csv"), &runs_csv(&rows))?;
    let means = means_csv(&rows, &req.ks);
    write_text(&out.join("ksweep.csv"), &means)?;
    print!("{means}");
    Ok(())
}

fn runs_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,seed,auc_pr,hits_at_10,test_triplets\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            k_label(r.k),
            r.seed,
            r.auc_pr,
            r.hits_at_10,
            r.test_triplets
        );
    }
    out
}

/// One row per K with metrics averaged over seeds.
fn means_csv(rows: &[SweepRow], ks: &[Option<usize>]) -> String {
    let mut out = String::from("k,auc_pr,hits_at_10,seeds\n");
    for &k in ks {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.k == k).collect();
        let n = group.len() as f64;
        let auc = group.iter().map(|r| r.auc_pr).sum::<f64>() / n;
        let hits = group.iter().map(|r| r.hits_at_10).sum::<f64>() / n;
        let _ = writeln!(out, "{},{auc},{hits},{}", k_label(k), group.len());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use metaikg::kg::count_relations;
    use metaikg::synthkg::{generate, SynthSpec};

    #[test]
    fn reduction_leaves_exactly_k_per_selected_relation() {
        let kg = generate(&SynthSpec::default()).unwrap();
        let d = &kg.dataset;
        let selected = select_relations(d, 10, WindowMax::Unbounded, 0.1).unwrap();
        assert!(!selected.is_empty());
        for k in [2, 5, 10] {
            let reduced = reduce_to_k(d, &selected, k, 3).unwrap();
            let before = count_relations(&d.train_triplets, d.relations.len());
            let after = count_relations(&reduced.train_triplets, d.relations.len());
            for r in 0..before.len() {
                if selected.contains(&(r as RelationId)) {
                    assert_eq!(after[r], k);
                    assert_eq!(
                        reduced.train_graph.relation_counts()[r],
                        d.train_graph.relation_counts()[r] - (before[r] - k)
                    );
                } else {
                    assert_eq!(after[r], before[r]);
                }
            }
            let graph_edges: HashSet<&Triplet> = reduced.train_graph.edges().iter().collect();
            assert!(reduced
                .train_triplets
                .iter()
                .all(|t| graph_edges.contains(t)));
        }
        let a = reduce_to_k(d, &selected, 4, 9).unwrap();
        let b = reduce_to_k(d, &selected, 4, 9).unwrap();
        assert_eq!(a.train_triplets, b.train_triplets);
    }

    #[test]
    fn window_selection() {
        let kg = generate(&SynthSpec::default()).unwrap();
        let d = &kg.dataset;
        let few = select_relations(d, 1, WindowMax::FewShotThreshold, 0.1).unwrap();
        let names: Vec<&str> = few.iter().map(|&r| d.relations.name(r).unwrap()).collect();
        assert_eq!(names, vec!["r2", "r3"]);
        assert!(select_relations(d, 10, WindowMax::Count(9), 0.1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn k_parsing() {
        assert_eq!(parse_k("inf"), Ok(None));
        assert_eq!(parse_k("6"), Ok(Some(6)));
        assert!(parse_k("0").is_err());
        assert_eq!(parse_window_max("kt"), Ok(WindowMax::FewShotThreshold));
        assert_eq!(parse_window_max("12"), Ok(WindowMax::Count(12)));
    }
}
