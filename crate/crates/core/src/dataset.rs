//! Inductive benchmark directories.
//!
//! Two layouts are understood. The flat layout keeps everything in one
//! directory (`train.txt`, `valid.txt`, `train_ind.txt`, `test_ind.txt`). The
//! paired layout keeps the inductive files in a sibling directory named
//! `<dir>_ind` holding `train.txt` (test graph) and `test.txt`.
//!
//! Training triplets come from `train_triplets.txt` when present. Otherwise
//! they are the train-graph facts that still have an enclosing subgraph once
//! their own edge is removed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{
    compute_threshold, count_relations, load_triplets, load_triplets_known_relations,
    split_relations, write_triplets, KnowledgeGraph, RelationSplit, Triplet, Vocab,
};
use crate::subgraph::{is_extractable, ExtractOptions};

/// File names inside a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetLayout {
    pub train_graph: String,
    pub valid: String,
    pub test_graph: String,
    pub test_triplets: String,
    pub train_triplets: String,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            train_graph: "train.txt".into(),
            valid: "valid.txt".into(),
            test_graph: "train_ind.txt".into(),
            test_triplets: "test_ind.txt".into(),
            train_triplets: "train_triplets.txt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub train_graph: PathBuf,
    pub valid: PathBuf,
    pub test_graph: PathBuf,
    pub test_triplets: PathBuf,
    /// `None` when training triplets are derived from the train graph.
    pub train_triplets: Option<PathBuf>,
}

impl DatasetLayout {
    pub fn resolve(&self, dir: &Path) -> Result<DatasetPaths> {
        let flat_test_graph = dir.join(&self.test_graph);
        let (test_graph, test_triplets) = if flat_test_graph.is_file() {
            (flat_test_graph, dir.join(&self.test_triplets))
        } else {
            let name = dir.file_name().ok_or_else(|| {
                Error::InvalidArgument(format!("bad dataset path {}", dir.display()))
            })?;
            let mut sibling_name = name.to_os_string();
            sibling_name.push("_ind");
            let sibling = dir.with_file_name(sibling_name);
            (sibling.join("train.txt"), sibling.join("test.txt"))
        };
        let train_triplets = dir.join(&self.train_triplets);
        let paths = DatasetPaths {
            train_graph: dir.join(&self.train_graph),
            valid: dir.join(&self.valid),
            test_graph,
            test_triplets,
            train_triplets: train_triplets.is_file().then_some(train_triplets),
        };
        for p in [
            &paths.train_graph,
            &paths.valid,
            &paths.test_graph,
            &paths.test_triplets,
        ] {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "missing dataset file"),
                ));
            }
        }
        Ok(paths)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainTripletSource {
    File,
    FilteredTrainGraph,
}

#[derive(Clone, Debug)]
pub struct InductiveDataset {
    pub relations: Vocab,
    pub train_entities: Vocab,
    pub test_entities: Vocab,
    pub train_graph: KnowledgeGraph,
    pub train_triplets: Vec<Triplet>,
    pub train_triplet_source: TrainTripletSource,
    pub valid_triplets: Vec<Triplet>,
    pub test_graph: KnowledgeGraph,
    pub test_triplets: Vec<Triplet>,
}

/// Loads a dataset directory. Valid triplets are never inserted into the
/// train graph and test triplets are never inserted into the test graph.
pub fn load_inductive_dataset(
    dir: &Path,
    layout: &DatasetLayout,
    extract: &ExtractOptions,
) -> Result<InductiveDataset> {
    let paths = layout.resolve(dir)?;
    let mut relations = Vocab::new();
    let mut train_entities = Vocab::new();
    let train_edges = load_triplets(&paths.train_graph, &mut train_entities, &mut relations)?;
    let explicit_train = match &paths.train_triplets {
        Some(p) => Some(load_triplets_known_relations(
            p,
            &mut train_entities,
            &relations,
        )?),
        None => None,
    };
    let valid_triplets =
        load_triplets_known_relations(&paths.valid, &mut train_entities, &relations)?;

    let mut test_entities = Vocab::new();
    let test_edges =
        load_triplets_known_relations(&paths.test_graph, &mut test_entities, &relations)?;
    let test_triplets =
        load_triplets_known_relations(&paths.test_triplets, &mut test_entities, &relations)?;

    let train_graph = KnowledgeGraph::build(&train_edges, train_entities.len(), relations.len())?;
    let test_graph = KnowledgeGraph::build(&test_edges, test_entities.len(), relations.len())?;

    let (train_triplets, train_triplet_source) = match explicit_train {
        Some(ts) => (ts, TrainTripletSource::File),
        None => (
            filter_extractable(&train_graph, &train_edges, extract)?,
            TrainTripletSource::FilteredTrainGraph,
        ),
    };

    Ok(InductiveDataset {
        relations,
        train_entities,
        test_entities,
        train_graph,
        train_triplets,
        train_triplet_source,
        valid_triplets,
        test_graph,
        test_triplets,
    })
}

/// Keeps the triplets that have a non-empty enclosing subgraph in `g`.
pub fn filter_extractable(
    g: &KnowledgeGraph,
    triplets: &[Triplet],
    extract: &ExtractOptions,
) -> Result<Vec<Triplet>> {
    let keep: Vec<bool> = triplets
        .par_iter()
        .map(|t| is_extractable(g, t, extract))
        .collect::<Result<_>>()?;
    Ok(triplets
        .iter()
        .zip(keep)
        .filter_map(|(t, k)| k.then_some(*t))
        .collect())
}

impl InductiveDataset {
    /// Per-relation counts over the training triplets.
    pub fn train_relation_counts(&self) -> Vec<usize> {
        count_relations(&self.train_triplets, self.relations.len())
    }

    /// Few-shot threshold and relation partition. The relation count used in
    /// the threshold is the number of relations with at least one training
    /// triplet.
    pub fn relation_split(&self, gamma: f64) -> Result<RelationSplit> {
        let counts = self.train_relation_counts();
        let present = counts.iter().filter(|&&c| c > 0).count();
        let threshold = compute_threshold(self.train_triplets.len(), present, gamma)?;
        Ok(split_relations(&counts, threshold))
    }

    pub fn stats(&self, gamma: f64) -> Result<DatasetStats> {
        let split = self.relation_split(gamma)?;
        let counts = self.train_relation_counts();
        let shared_entities = self
            .test_entities
            .names()
            .iter()
            .filter(|n| self.train_entities.get(n).is_some())
            .count();
        let test_relations: BTreeSet<u32> =
            self.test_graph.edges().iter().map(|t| t.relation).collect();
        Ok(DatasetStats {
            train_relations: self.train_graph.present_relations(),
            train_graph: self.train_graph.edges().len(),
            train_triplets: self.train_triplets.len(),
            validation_triplets: self.valid_triplets.len(),
            test_relations: test_relations.len(),
            test_graph: self.test_graph.edges().len(),
            test_triplets: self.test_triplets.len(),
            train_entities: self.train_graph.n_entities(),
            test_entities: self.test_graph.n_entities(),
            shared_entities,
            train_triplet_source: self.train_triplet_source,
            gamma,
            few_shot_threshold: split.threshold,
            large_shot_relations: split
                .large_shot
                .iter()
                .filter(|&&r| counts[r as usize] > 0)
                .count(),
            few_shot_relations: split
                .few_shot
                .iter()
                .filter(|&&r| counts[r as usize] > 0)
                .count(),
        })
    }

    /// Writes the dataset back in the flat layout.
    pub fn write_flat(&self, dir: &Path, layout: &DatasetLayout) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (tr, te, rel) = (&self.train_entities, &self.test_entities, &self.relations);
        write_triplets(
            &dir.join(&layout.train_graph),
            self.train_graph.edges(),
            tr,
            rel,
        )?;
        write_triplets(
            &dir.join(&layout.train_triplets),
            &self.train_triplets,
            tr,
            rel,
        )?;
        write_triplets(&dir.join(&layout.valid), &self.valid_triplets, tr, rel)?;
        write_triplets(
            &dir.join(&layout.test_graph),
            self.test_graph.edges(),
            te,
            rel,
        )?;
        write_triplets(
            &dir.join(&layout.test_triplets),
            &self.test_triplets,
            te,
            rel,
        )
    }
}

/// Dataset statistics, with the first seven fields in benchmark-table order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train_relations: usize,
    pub train_graph: usize,
    pub train_triplets: usize,
    pub validation_triplets: usize,
    pub test_relations: usize,
    pub test_graph: usize,
    pub test_triplets: usize,
    pub train_entities: usize,
    pub test_entities: usize,
    pub shared_entities: usize,
    pub train_triplet_source: TrainTripletSource,
    pub gamma: f64,
    pub few_shot_threshold: f64,
    pub large_shot_relations: usize,
    pub few_shot_relations: usize,
}
