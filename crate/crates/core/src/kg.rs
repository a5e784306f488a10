//! Triplet storage, vocabularies and the directed adjacency indices.
//!
//! A [`KnowledgeGraph`] is immutable once built. Both adjacency lists are
//! filled in edge order, so `out_adj[h]` lists `(relation, tail)` pairs in the
//! order the triplets were supplied and `in_adj[t]` lists `(relation, head)`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

/// A `(head, relation, tail)` fact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub const fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// String to dense-id bijection. Ids are assigned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for name in names {
            vocab.intern(&name.into());
        }
        vocab
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// SHA-256 over the names in id order. Two vocabularies with the same
    /// fingerprint assign the same ids.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for name in &self.names {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// One name per line, in id order.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = File::create(path).map_err(|e| Error::io(path, e))?;
        for name in &self.names {
            writeln!(out, "{name}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Self::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            vocab.intern(&line);
        }
        Ok(vocab)
    }
}

/// Directed multigraph over interned ids.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    n_entities: usize,
    n_relations: usize,
    edges: Vec<Triplet>,
    out_adj: Vec<Vec<(RelationId, EntityId)>>,
    in_adj: Vec<Vec<(RelationId, EntityId)>>,
    relation_counts: Vec<usize>,
    facts: HashSet<Triplet>,
}

impl KnowledgeGraph {
    pub fn build(triplets: &[Triplet], n_entities: usize, n_relations: usize) -> Result<Self> {
        let mut out_adj = vec![Vec::new(); n_entities];
        let mut in_adj = vec![Vec::new(); n_entities];
        let mut relation_counts = vec![0usize; n_relations];
        let mut facts = HashSet::with_capacity(triplets.len());
        for t in triplets {
            check_id("entity", t.head, n_entities)?;
            check_id("entity", t.tail, n_entities)?;
            check_id("relation", t.relation, n_relations)?;
            out_adj[t.head as usize].push((t.relation, t.tail));
            in_adj[t.tail as usize].push((t.relation, t.head));
            relation_counts[t.relation as usize] += 1;
            facts.insert(*t);
        }
        Ok(Self {
            n_entities,
            n_relations,
            edges: triplets.to_vec(),
            out_adj,
            in_adj,
            relation_counts,
            facts,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn edges(&self) -> &[Triplet] {
        &self.edges
    }

    pub fn out_edges(&self, entity: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_adj[entity as usize]
    }

    pub fn in_edges(&self, entity: EntityId) -> &[(RelationId, EntityId)] {
        &self.in_adj[entity as usize]
    }

    pub fn relation_counts(&self) -> &[usize] {
        &self.relation_counts
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.facts.contains(t)
    }

    pub fn contains_entity(&self, entity: EntityId) -> bool {
        (entity as usize) < self.n_entities
    }

    /// Relations with at least one edge in this graph.
    pub fn present_relations(&self) -> usize {
        self.relation_counts.iter().filter(|&&c| c > 0).count()
    }

    /// Writes the edges back as `head<TAB>relation<TAB>tail` lines.
    pub fn write_tsv(&self, path: &Path, entities: &Vocab, relations: &Vocab) -> Result<()> {
        write_triplets(path, &self.edges, entities, relations)
    }
}

fn check_id(what: &'static str, id: u32, len: usize) -> Result<()> {
    if (id as usize) < len {
        Ok(())
    } else {
        Err(Error::IdOutOfRange { what, id, len })
    }
}

pub fn write_triplets(
    path: &Path,
    triplets: &[Triplet],
    entities: &Vocab,
    relations: &Vocab,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for t in triplets {
        writeln!(
            out,
            "{}\t{}\t{}",
            vocab_name(entities, "entity", t.head)?,
            vocab_name(relations, "relation", t.relation)?,
            vocab_name(entities, "entity", t.tail)?
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn vocab_name<'a>(v: &'a Vocab, what: &'static str, id: u32) -> Result<&'a str> {
    v.name(id).ok_or(Error::IdOutOfRange {
        what,
        id,
        len: v.len(),
    })
}

/// Loads a tab-separated triplet file, interning new entities and relations.
///
/// Blank lines are skipped and fields are trimmed. Duplicate lines are kept.
pub fn load_triplets(
    path: &Path,
    entities: &mut Vocab,
    relations: &mut Vocab,
) -> Result<Vec<Triplet>> {
    read_triplets(path, entities, relations, true)
}

/// Like [`load_triplets`] but every relation must already be in `relations`.
pub fn load_triplets_known_relations(
    path: &Path,
    entities: &mut Vocab,
    relations: &Vocab,
) -> Result<Vec<Triplet>> {
    let mut relations = relations.clone();
    read_triplets(path, entities, &mut relations, false)
}

fn read_triplets(
    path: &Path,
    entities: &mut Vocab,
    relations: &mut Vocab,
    allow_new_relations: bool,
) -> Result<Vec<Triplet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut triplets = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let relation = if allow_new_relations {
            relations.intern(fields[1])
        } else {
            relations
                .get(fields[1])
                .ok_or_else(|| Error::UnknownRelation {
                    path: path.to_owned(),
                    line: lineno + 1,
                    name: fields[1].to_owned(),
                })?
        };
        let head = entities.intern(fields[0]);
        let tail = entities.intern(fields[2]);
        triplets.push(Triplet::new(head, relation, tail));
    }
    Ok(triplets)
}

/// Per-relation triplet counts.
pub fn count_relations(triplets: &[Triplet], n_relations: usize) -> Vec<usize> {
    let mut counts = vec![0; n_relations];
    for t in triplets {
        counts[t.relation as usize] += 1;
    }
    counts
}

/// `K_T = n_triplets / n_relations * gamma`, kept as an exact real.
pub fn compute_threshold(n_triplets: usize, n_relations: usize, gamma: f64) -> Result<f64> {
    if n_relations == 0 {
        return Err(Error::InvalidArgument(
            "threshold needs at least one relation".into(),
        ));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "few-shot factor must be non-negative, got {gamma}"
        )));
    }
    Ok(n_triplets as f64 / n_relations as f64 * gamma)
}

/// Partition of the relation vocabulary into large-shot and few-shot sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSplit {
    pub threshold: f64,
    pub large_shot: BTreeSet<RelationId>,
    pub few_shot: BTreeSet<RelationId>,
}

impl RelationSplit {
    pub fn is_few_shot(&self, r: RelationId) -> bool {
        self.few_shot.contains(&r)
    }

    pub fn is_large_shot(&self, r: RelationId) -> bool {
        self.large_shot.contains(&r)
    }
}

/// `n_r > K_T` is large-shot, `n_r <= K_T` is few-shot.
pub fn split_relations(counts: &[usize], threshold: f64) -> RelationSplit {
    let mut large_shot = BTreeSet::new();
    let mut few_shot = BTreeSet::new();
    for (r, &n) in counts.iter().enumerate() {
        if n as f64 > threshold {
            large_shot.insert(r as RelationId);
        } else {
            few_shot.insert(r as RelationId);
        }
    }
    RelationSplit {
        threshold,
        large_shot,
        few_shot,
    }
}
