//! Synthetic rule-governed knowledge graphs with disjoint train and test
//! entities.
//!
//! Base relations are random sparse edges drawn independently on each entity
//! set. Each rule `head(x, z) <- b1(x, y), b2(y, z)` is materialised wherever
//! its body holds, and the rule-head facts are the prediction targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetLayout, InductiveDataset, TrainTripletSource};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triplet, Vocab};
use crate::subgraph::{DirectionMode, ExtractOptions};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub head: String,
    pub body: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_entities_train: usize,
    pub n_entities_test: usize,
    /// Relations that only ever appear in rule bodies.
    pub base_relations: Vec<String>,
    pub rules: Vec<Rule>,
    /// Expected out-degree of every entity in every base and noise relation.
    pub base_edge_density: f64,
    /// Give every rule its own entity group: the first body relation of rule
    /// `i` only leaves group `i` and the second only enters it, so rule `i`
    /// relates group `i` to itself and a corruption can never be supported
    /// by the body of a different rule.
    pub typed_rules: bool,
    pub noise_relation_count: usize,
    /// Rule heads that keep only this many training triplets.
    pub few_shot_relations: Vec<(String, usize)>,
    /// Fraction of test-side rule-head facts held out as test triplets.
    pub test_fraction: f64,
    /// Fraction of train-side large-shot rule-head facts held out for validation.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let base_relations: Vec<String> = (0..8).map(|i| format!("b{i}")).collect();
        let rules = (0..4)
            .map(|i| Rule {
                head: format!("r{i}"),
                body: [
                    base_relations[2 * i].clone(),
                    base_relations[2 * i + 1].clone(),
                ],
            })
            .collect();
        Self {
            n_entities_train: 200,
            n_entities_test: 100,
            base_relations,
            rules,
            base_edge_density: 1.0,
            typed_rules: true,
            noise_relation_count: 2,
            few_shot_relations: vec![("r2".into(), 3), ("r3".into(), 5)],
            test_fraction: 0.3,
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_entities_train < 3 || self.n_entities_test < 3 {
            return bad("each side needs at least 3 entities".into());
        }
        if self.rules.is_empty() {
            return bad("at least one rule is required".into());
        }
        if !(self.base_edge_density >= 0.0 && self.base_edge_density.is_finite()) {
            return bad("base_edge_density must be a finite non-negative number".into());
        }
        for f in [self.test_fraction, self.valid_fraction] {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("fraction {f} outside [0, 1)"));
            }
        }
        let base: BTreeSet<&str> = self.base_relations.iter().map(String::as_str).collect();
        let mut heads = BTreeSet::new();
        for r in &self.rules {
            if base.contains(r.head.as_str()) || !heads.insert(r.head.as_str()) {
                return bad(format!(
                    "rule head `{}` must be unique and not a base relation",
                    r.head
                ));
            }
            if let Some(b) = r.body.iter().find(|b| !base.contains(b.as_str())) {
                return bad(format!("rule body relation `{b}` is not a base relation"));
            }
        }
        if self.typed_rules {
            let mut seen = BTreeSet::new();
            if let Some(b) = self
                .rules
                .iter()
                .flat_map(|r| r.body.iter())
                .find(|b| !seen.insert(b.as_str()))
            {
                return bad(format!(
                    "typed rules need distinct body relations, `{b}` is reused"
                ));
            }
            if self.n_entities_test < 2 * self.rules.len() {
                return bad("typed rules need at least two test entities per rule".into());
            }
        }
        for (name, budget) in &self.few_shot_relations {
            if !heads.contains(name.as_str()) {
                return bad(format!("few-shot relation `{name}` is not a rule head"));
            }
            if *budget == 0 {
                return bad(format!(
                    "few-shot relation `{name}` needs a positive budget"
                ));
            }
        }
        Ok(())
    }

    fn relation_names(&self) -> Vec<String> {
        let mut names = self.base_relations.clone();
        names.extend((0..self.noise_relation_count).map(|i| format!("noise{i}")));
        names.extend(self.rules.iter().map(|r| r.head.clone()));
        names
    }
}

/// Training settings that learn the default synthetic graph in about a
/// minute of single-core time.
pub fn recommended_train_config(mode: TrainMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        dim: 16,
        layers: 2,
        extract: ExtractOptions {
            hops: 1,
            max_nodes: 100,
            directions: DirectionMode::PathConsistent,
        },
        beta: 0.001,
        beta_prime: 0.0005,
        alpha_init: 0.001,
        alpha_lr: Some(1e-6),
        margin: 3.0,
        epochs: 30,
        meta_updates: 100,
        negatives_per_positive: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    pub triplet: [String; 3],
    /// Middle entities `y` for which the rule body holds.
    pub via: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rules: Vec<Rule>,
    pub few_shot_relations: Vec<(String, usize)>,
    pub test_derivations: Vec<Derivation>,
}

/// A generated dataset. Train entities use ids `0..n_train` and test entities
/// `n_train..n_train + n_test`; inside [`SynthKg::dataset`] the test side is
/// renumbered from zero and both sides share the `e<global id>` naming.
pub struct SynthKg {
    pub dataset: InductiveDataset,
    pub ground_truth: GroundTruth,
}

struct Side {
    graph: Vec<Triplet>,
    /// Rule-head facts per rule, with their witnesses.
    derived: Vec<BTreeMap<(EntityId, EntityId), Vec<EntityId>>>,
}

fn sample_side(rng: &mut ChaCha8Rng, spec: &SynthSpec, n: usize, offset: u32, rel: &Vocab) -> Side {
    let n_random = spec.base_relations.len() + spec.noise_relation_count;
    let groups = spec.rules.len() as u32;
    // (rule index, body position) of each typed relation
    let mut typed: BTreeMap<RelationId, (u32, usize)> = BTreeMap::new();
    if spec.typed_rules {
        for (i, rule) in spec.rules.iter().enumerate() {
            for (pos, b) in rule.body.iter().enumerate() {
                typed.insert(rel.get(b).unwrap(), (i as u32, pos));
            }
        }
    }
    let mut graph = Vec::new();
    for r in 0..n_random as RelationId {
        let constraint = typed.get(&r).copied();
        let scale = if constraint.is_some() {
            groups as f64
        } else {
            1.0
        };
        let p = (scale * spec.base_edge_density / (n - 1) as f64).min(1.0);
        for x in 0..n as u32 {
            for y in 0..n as u32 {
                let allowed = match constraint {
                    Some((g, 0)) => x % groups == g,
                    Some((g, _)) => y % groups == g,
                    None => true,
                };
                if x != y && allowed && rng.gen_bool(p) {
                    graph.push(Triplet::new(x + offset, r, y + offset));
                }
            }
        }
    }
    let mut out: BTreeMap<(RelationId, EntityId), Vec<EntityId>> = BTreeMap::new();
    for t in &graph {
        out.entry((t.relation, t.head)).or_default().push(t.tail);
    }
    let derived = spec
        .rules
        .iter()
        .map(|rule| {
            let b1 = rel.get(&rule.body[0]).unwrap();
            let b2 = rel.get(&rule.body[1]).unwrap();
            let mut facts: BTreeMap<(EntityId, EntityId), Vec<EntityId>> = BTreeMap::new();
            for x in offset..offset + n as u32 {
                for &y in out.get(&(b1, x)).map(Vec::as_slice).unwrap_or(&[]) {
                    for &z in out.get(&(b2, y)).map(Vec::as_slice).unwrap_or(&[]) {
                        if z != x {
                            facts.entry((x, z)).or_default().push(y);
                        }
                    }
                }
            }
            facts
        })
        .collect();
    Side { graph, derived }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthKg> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let relations = Vocab::from_names(spec.relation_names());
    let n_tr = spec.n_entities_train;
    let train = sample_side(&mut rng, spec, n_tr, 0, &relations);
    let test = sample_side(
        &mut rng,
        spec,
        spec.n_entities_test,
        n_tr as u32,
        &relations,
    );

    let budgets: BTreeMap<&str, usize> = spec
        .few_shot_relations
        .iter()
        .map(|(r, b)| (r.as_str(), *b))
        .collect();
    let mut train_graph = train.graph.clone();
    let mut train_triplets = Vec::new();
    let mut valid_triplets = Vec::new();
    for (rule, facts) in spec.rules.iter().zip(&train.derived) {
        let r = relations.get(&rule.head).unwrap();
        let mut ts: Vec<Triplet> = facts.keys().map(|&(x, z)| Triplet::new(x, r, z)).collect();
        if ts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "rule `{}` has no instances on the training entities",
                rule.head
            )));
        }
        ts.shuffle(&mut rng);
        match budgets.get(rule.head.as_str()) {
            Some(&b) => {
                if ts.len() < b {
                    return Err(Error::InvalidArgument(format!(
                        "rule `{}` has {} instances, fewer than its budget {b}",
                        rule.head,
                        ts.len()
                    )));
                }
                ts.truncate(b);
                train_graph.extend(&ts);
                train_triplets.extend(ts);
            }
            None => {
                let n_valid = (ts.len() as f64 * spec.valid_fraction).floor() as usize;
                valid_triplets.extend(ts.drain(..n_valid));
                train_graph.extend(&ts);
                train_triplets.extend(ts);
            }
        }
    }

    let mut test_graph = test.graph.clone();
    let mut test_triplets = Vec::new();
    let mut test_derivations = Vec::new();
    let name = |e: EntityId| format!("e{e}");
    for (rule, facts) in spec.rules.iter().zip(&test.derived) {
        let r = relations.get(&rule.head).unwrap();
        let mut ts: Vec<Triplet> = facts.keys().map(|&(x, z)| Triplet::new(x, r, z)).collect();
        ts.shuffle(&mut rng);
        let n_test = ((ts.len() as f64 * spec.test_fraction).round() as usize)
            .max(1)
            .min(ts.len());
        for t in ts.drain(..n_test) {
            test_derivations.push(Derivation {
                triplet: [name(t.head), rule.head.clone(), name(t.tail)],
                via: facts[&(t.head, t.tail)].iter().map(|&y| name(y)).collect(),
            });
            test_triplets.push(t);
        }
        test_graph.extend(ts);
    }
    if test_triplets.is_empty() {
        return Err(Error::InvalidArgument(
            "no rule instances on the test entities".into(),
        ));
    }

    let train_entities = Vocab::from_names((0..n_tr as u32).map(name));
    let test_entities =
        Vocab::from_names((n_tr as u32..(n_tr + spec.n_entities_test) as u32).map(name));
    let local = |ts: &[Triplet]| -> Vec<Triplet> {
        ts.iter()
            .map(|t| Triplet::new(t.head - n_tr as u32, t.relation, t.tail - n_tr as u32))
            .collect()
    };
    let dataset = InductiveDataset {
        train_graph: KnowledgeGraph::build(&train_graph, n_tr, relations.len())?,
        test_graph: KnowledgeGraph::build(
            &local(&test_graph),
            spec.n_entities_test,
            relations.len(),
        )?,
        test_triplets: local(&test_triplets),
        train_triplets,
        train_triplet_source: TrainTripletSource::File,
        valid_triplets,
        relations,
        train_entities,
        test_entities,
    };
    Ok(SynthKg {
        dataset,
        ground_truth: GroundTruth {
            rules: spec.rules.clone(),
            few_shot_relations: spec.few_shot_relations.clone(),
            test_derivations,
        },
    })
}

impl SynthKg {
    /// Writes the flat dataset layout plus `ground_truth.json` and `spec.json`.
    pub fn write(&self, dir: &Path, spec: &SynthSpec) -> Result<()> {
        self.dataset.write_flat(dir, &DatasetLayout::default())?;
        let gt = dir.join("ground_truth.json");
        fs::write(&gt, serde_json::to_string_pretty(&self.ground_truth)?)
            .map_err(|e| Error::io(&gt, e))?;
        let sp = dir.join("spec.json");
        fs::write(&sp, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&sp, e))
    }

    /// Whether the rule for `t.relation` has a body path from `t.head` to
    /// `t.tail` in `g`.
    pub fn has_rule_support(&self, g: &KnowledgeGraph, t: &Triplet) -> bool {
        let rel = &self.dataset.relations;
        let Some(name) = rel.name(t.relation) else {
            return false;
        };
        let Some(rule) = self.ground_truth.rules.iter().find(|r| r.head == name) else {
            return false;
        };
        let b1 = rel.get(&rule.body[0]).unwrap();
        let b2 = rel.get(&rule.body[1]).unwrap();
        g.out_edges(t.head)
            .iter()
            .filter(|(r, _)| *r == b1)
            .any(|&(_, y)| g.out_edges(y).iter().any(|&(r, z)| r == b2 && z == t.tail))
    }
}
