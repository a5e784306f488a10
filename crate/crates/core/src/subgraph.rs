//! Directed enclosing subgraphs and double-radius node labels.
//!
//! The subgraph around a target `(head, r, tail)` holds every node that sits
//! on a directed walk `head -> ... -> tail` of at most `hops + 1` edges in the
//! graph with the target edge removed, plus all edges of the graph between
//! those nodes. Each node carries a pair `(d_s, d_t)`: its distance from the
//! head and its distance to the tail, measured inside the subgraph.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triplet};

pub const DEFAULT_HOPS: u32 = 3;
pub const DEFAULT_MAX_NODES: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Outgoing,
    Incoming,
}

/// Which neighbourhoods are intersected during extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionMode {
    /// Nodes downstream of the head and upstream of the tail.
    #[default]
    PathConsistent,
    /// Nodes upstream of the head and downstream of the tail.
    PaperLiteral,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub hops: u32,
    pub max_nodes: usize,
    pub directions: DirectionMode,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            hops: DEFAULT_HOPS,
            max_nodes: DEFAULT_MAX_NODES,
            directions: DirectionMode::PathConsistent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocalEdge {
    pub src: u32,
    pub relation: RelationId,
    pub dst: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnclosingSubgraph {
    nodes: Vec<EntityId>,
    local_index: HashMap<EntityId, u32>,
    edges: Vec<LocalEdge>,
    distances: Vec<(u32, u32)>,
    head: u32,
    tail: u32,
    relation: RelationId,
    hops: u32,
}

impl EnclosingSubgraph {
    /// Builds a subgraph from explicit parts and computes the node distances.
    ///
    /// Edges refer to positions in `nodes`.
    pub fn from_parts(
        nodes: Vec<EntityId>,
        edges: Vec<LocalEdge>,
        head: u32,
        tail: u32,
        relation: RelationId,
        hops: u32,
    ) -> Result<Self> {
        let n = nodes.len() as u32;
        if head >= n || tail >= n || head == tail {
            return Err(Error::InvalidArgument(format!(
                "target positions ({head}, {tail}) invalid for {n} nodes"
            )));
        }
        if let Some(e) = edges.iter().find(|e| e.src >= n || e.dst >= n) {
            return Err(Error::InvalidArgument(format!(
                "edge {e:?} refers to a node outside the subgraph"
            )));
        }
        if hops == 0 {
            return Err(Error::InvalidArgument("hops must be at least 1".into()));
        }
        let local_index = nodes
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i as u32))
            .collect();
        let mut sg = Self {
            nodes,
            local_index,
            edges,
            distances: Vec::new(),
            head,
            tail,
            relation,
            hops,
        };
        sg.distances = sg.compute_distances();
        Ok(sg)
    }

    pub fn nodes(&self) -> &[EntityId] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[LocalEdge] {
        &self.edges
    }

    pub fn local_index(&self, entity: EntityId) -> Option<u32> {
        self.local_index.get(&entity).copied()
    }

    /// `(d_s, d_t)` per node, clamped to `hops`, targets forced to (0,1) and (1,0).
    pub fn distances(&self) -> &[(u32, u32)] {
        &self.distances
    }

    pub fn head(&self) -> u32 {
        self.head
    }

    pub fn tail(&self) -> u32 {
        self.tail
    }

    pub fn relation(&self) -> RelationId {
        self.relation
    }

    pub fn hops(&self) -> u32 {
        self.hops
    }

    pub fn target(&self) -> Triplet {
        Triplet::new(
            self.nodes[self.head as usize],
            self.relation,
            self.nodes[self.tail as usize],
        )
    }

    /// Edges as triplets over original entity ids.
    pub fn global_edges(&self) -> Vec<Triplet> {
        self.edges
            .iter()
            .map(|e| {
                Triplet::new(
                    self.nodes[e.src as usize],
                    e.relation,
                    self.nodes[e.dst as usize],
                )
            })
            .collect()
    }

    /// Shortest directed head -> tail path inside the subgraph, as local indices.
    pub fn shortest_target_path(&self) -> Option<Vec<u32>> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.src as usize].push(e.dst);
        }
        let mut parent = vec![u32::MAX; n];
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.head]);
        seen[self.head as usize] = true;
        while let Some(u) = queue.pop_front() {
            if u == self.tail {
                let mut path = vec![u];
                let mut cur = u;
                while cur != self.head {
                    cur = parent[cur as usize];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for &v in &adj[u as usize] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    parent[v as usize] = u;
                    queue.push_back(v);
                }
            }
        }
        None
    }

    fn compute_distances(&self) -> Vec<(u32, u32)> {
        let n = self.nodes.len();
        let mut fwd = vec![Vec::new(); n];
        let mut bwd = vec![Vec::new(); n];
        for e in &self.edges {
            fwd[e.src as usize].push(e.dst);
            bwd[e.dst as usize].push(e.src);
        }
        let from_head = local_bfs(&fwd, self.head);
        let to_tail = local_bfs(&bwd, self.tail);
        let clamp = |d: Option<u32>| d.map_or(self.hops, |d| d.min(self.hops));
        let mut dist: Vec<(u32, u32)> = from_head
            .into_iter()
            .zip(to_tail)
            .map(|(s, t)| (clamp(s), clamp(t)))
            .collect();
        dist[self.head as usize] = (0, 1);
        dist[self.tail as usize] = (1, 0);
        dist
    }

    /// The subgraph induced on `keep` (local indices, any order).
    fn induce(&self, keep: &[u32]) -> Self {
        let mut keep = keep.to_vec();
        keep.sort_by_key(|&i| self.nodes[i as usize]);
        keep.dedup();
        let mut remap = vec![u32::MAX; self.nodes.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old as usize] = new as u32;
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| remap[e.src as usize] != u32::MAX && remap[e.dst as usize] != u32::MAX)
            .map(|e| LocalEdge {
                src: remap[e.src as usize],
                relation: e.relation,
                dst: remap[e.dst as usize],
            })
            .collect();
        let nodes = keep.iter().map(|&i| self.nodes[i as usize]).collect();
        Self::from_parts(
            nodes,
            edges,
            remap[self.head as usize],
            remap[self.tail as usize],
            self.relation,
            self.hops,
        )
        .expect("induced subgraph keeps both targets")
    }

    pub fn to_dump(&self) -> SubgraphDump {
        SubgraphDump {
            nodes: self.nodes.clone(),
            distances: self.distances.clone(),
            edges: self.global_edges(),
            target: self.target(),
            hops: self.hops,
        }
    }
}

/// JSON-friendly view of a subgraph in original ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphDump {
    pub nodes: Vec<EntityId>,
    pub distances: Vec<(u32, u32)>,
    pub edges: Vec<Triplet>,
    pub target: Triplet,
    pub hops: u32,
}

fn local_bfs(adj: &[Vec<u32>], seed: u32) -> Vec<Option<u32>> {
    let mut dist = vec![None; adj.len()];
    dist[seed as usize] = Some(0);
    let mut queue = VecDeque::from([seed]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u as usize].unwrap();
        for &v in &adj[u as usize] {
            if dist[v as usize].is_none() {
                dist[v as usize] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Breadth-first search along directed edges up to `hops`, skipping `exclude`.
/// The seed is included at distance 0.
fn bfs(
    g: &KnowledgeGraph,
    seed: EntityId,
    hops: u32,
    direction: Direction,
    exclude: Option<&Triplet>,
) -> HashMap<EntityId, u32> {
    let mut dist = HashMap::from([(seed, 0u32)]);
    let mut queue = VecDeque::from([(seed, 0u32)]);
    while let Some((u, d)) = queue.pop_front() {
        if d == hops {
            continue;
        }
        let (adj, is_excluded): (_, &dyn Fn(RelationId, EntityId) -> bool) = match direction {
            Direction::Outgoing => (g.out_edges(u), &|r, v| {
                exclude.is_some_and(|t| t.head == u && t.relation == r && t.tail == v)
            }),
            Direction::Incoming => (g.in_edges(u), &|r, v| {
                exclude.is_some_and(|t| t.head == v && t.relation == r && t.tail == u)
            }),
        };
        for &(r, v) in adj {
            if is_excluded(r, v) {
                continue;
            }
            if let std::collections::hash_map::Entry::Vacant(slot) = dist.entry(v) {
                slot.insert(d + 1);
                queue.push_back((v, d + 1));
            }
        }
    }
    dist
}

/// Minimal hop counts from `seed` along `direction`, up to `hops`. The seed
/// itself is not in the result.
pub fn directed_neighbors(
    g: &KnowledgeGraph,
    seed: EntityId,
    hops: u32,
    direction: Direction,
) -> HashMap<EntityId, u32> {
    let mut dist = bfs(g, seed, hops, direction, None);
    dist.remove(&seed);
    dist
}

fn check_entity(g: &KnowledgeGraph, e: EntityId) -> Result<()> {
    if g.contains_entity(e) {
        Ok(())
    } else {
        Err(Error::IdOutOfRange {
            what: "entity",
            id: e,
            len: g.n_entities(),
        })
    }
}

/// Extracts the enclosing subgraph of `target` without pruning.
///
/// Returns `Ok(None)` when no subgraph exists: in the default mode that means
/// no directed head -> tail path of at most `hops + 1` edges survives removal
/// of the target edge; in [`DirectionMode::PaperLiteral`] it means the induced
/// subgraph has no edges. Self-loop targets never have a subgraph since the
/// two target labels would collide.
pub fn extract_enclosing_subgraph(
    g: &KnowledgeGraph,
    target: &Triplet,
    hops: u32,
    directions: DirectionMode,
) -> Result<Option<EnclosingSubgraph>> {
    check_entity(g, target.head)?;
    check_entity(g, target.tail)?;
    if hops == 0 {
        return Err(Error::InvalidArgument("hops must be at least 1".into()));
    }
    if target.head == target.tail {
        return Ok(None);
    }

    let mut members: Vec<EntityId> = match directions {
        DirectionMode::PathConsistent => {
            let from_head = bfs(g, target.head, hops, Direction::Outgoing, Some(target));
            let to_tail = bfs(g, target.tail, hops, Direction::Incoming, Some(target));
            let mut members: Vec<EntityId> = from_head
                .iter()
                .filter_map(|(&x, &ds)| {
                    let dt = *to_tail.get(&x)?;
                    (ds + dt <= hops + 1).then_some(x)
                })
                .collect();
            if members.is_empty() {
                return Ok(None);
            }
            members.extend([target.head, target.tail]);
            members
        }
        DirectionMode::PaperLiteral => {
            let upstream = directed_neighbors(g, target.head, hops, Direction::Incoming);
            let downstream = directed_neighbors(g, target.tail, hops, Direction::Outgoing);
            let mut members: Vec<EntityId> = upstream
                .keys()
                .filter(|x| downstream.contains_key(x))
                .copied()
                .collect();
            members.extend([target.head, target.tail]);
            members
        }
    };
    members.sort_unstable();
    members.dedup();

    let index: HashMap<EntityId, u32> = members
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, i as u32))
        .collect();
    let mut edges = Vec::new();
    for (src, &u) in members.iter().enumerate() {
        for &(r, v) in g.out_edges(u) {
            if u == target.head && r == target.relation && v == target.tail {
                continue;
            }
            if let Some(&dst) = index.get(&v) {
                edges.push(LocalEdge {
                    src: src as u32,
                    relation: r,
                    dst,
                });
            }
        }
    }
    if edges.is_empty() {
        return Ok(None);
    }
    let head = index[&target.head];
    let tail = index[&target.tail];
    let sg = EnclosingSubgraph::from_parts(members, edges, head, tail, target.relation, hops)?;
    if directions == DirectionMode::PathConsistent {
        debug_assert!(sg.shortest_target_path().is_some());
    }
    Ok(Some(sg))
}

/// Extraction followed by [`prune_subgraph`].
pub fn extract_pruned(
    g: &KnowledgeGraph,
    target: &Triplet,
    opts: &ExtractOptions,
) -> Result<Option<EnclosingSubgraph>> {
    Ok(
        extract_enclosing_subgraph(g, target, opts.hops, opts.directions)?
            .map(|sg| prune_subgraph(&sg, opts.max_nodes)),
    )
}

/// Cheap existence test for a default-mode subgraph: a head -> tail path of at
/// most `hops + 1` edges avoiding the target edge.
pub fn has_enclosing_path(g: &KnowledgeGraph, target: &Triplet, hops: u32) -> Result<bool> {
    check_entity(g, target.head)?;
    check_entity(g, target.tail)?;
    if target.head == target.tail {
        return Ok(false);
    }
    let reach = hops + 1;
    let fwd_depth = reach.div_ceil(2);
    let from_head = bfs(g, target.head, fwd_depth, Direction::Outgoing, Some(target));
    let to_tail = bfs(
        g,
        target.tail,
        reach - fwd_depth,
        Direction::Incoming,
        Some(target),
    );
    Ok(from_head
        .iter()
        .any(|(x, &ds)| to_tail.get(x).is_some_and(|&dt| ds + dt <= reach)))
}

/// Whether `target` would yield a non-empty subgraph under `opts`.
pub fn is_extractable(g: &KnowledgeGraph, target: &Triplet, opts: &ExtractOptions) -> Result<bool> {
    match opts.directions {
        DirectionMode::PathConsistent => has_enclosing_path(g, target, opts.hops),
        DirectionMode::PaperLiteral => {
            Ok(extract_enclosing_subgraph(g, target, opts.hops, opts.directions)?.is_some())
        }
    }
}

/// Double-radius labels: `one_hot(d_s) ++ one_hot(d_t)`, each over `0..=hops`.
pub fn label_nodes(sg: &EnclosingSubgraph) -> Vec<Vec<f64>> {
    let width = sg.hops as usize + 1;
    sg.distances
        .iter()
        .map(|&(ds, dt)| {
            let mut label = vec![0.0; 2 * width];
            label[ds as usize] = 1.0;
            label[width + dt as usize] = 1.0;
            label
        })
        .collect()
}

/// Caps the node count at `max_nodes`, keeping the targets and the nodes
/// closest to them, then restores one shortest head -> tail path if the cut
/// severed all of them. The result may exceed `max_nodes` by that path.
pub fn prune_subgraph(sg: &EnclosingSubgraph, max_nodes: usize) -> EnclosingSubgraph {
    let max_nodes = max_nodes.max(2);
    if sg.num_nodes() <= max_nodes {
        return sg.clone();
    }
    let mut rest: Vec<u32> = (0..sg.num_nodes() as u32)
        .filter(|&i| i != sg.head && i != sg.tail)
        .collect();
    rest.sort_by_key(|&i| {
        let (ds, dt) = sg.distances[i as usize];
        (ds + dt, ds, sg.nodes[i as usize])
    });
    let mut keep: Vec<u32> = vec![sg.head, sg.tail];
    keep.extend(rest.into_iter().take(max_nodes - 2));

    let had_path = sg.shortest_target_path();
    let pruned = sg.induce(&keep);
    match had_path {
        Some(path) if pruned.shortest_target_path().is_none() => {
            let kept: HashSet<u32> = keep.iter().copied().collect();
            keep.extend(path.into_iter().filter(|i| !kept.contains(i)));
            sg.induce(&keep)
        }
        _ => pruned,
    }
}

/// Memoised [`extract_pruned`] over one fixed graph. Extraction is
/// deterministic, so cached and fresh results are identical.
pub struct SubgraphCache<'g> {
    graph: &'g KnowledgeGraph,
    opts: ExtractOptions,
    capacity: usize,
    entries: Mutex<HashMap<Triplet, Arc<Option<EnclosingSubgraph>>>>,
}

impl<'g> SubgraphCache<'g> {
    pub fn new(graph: &'g KnowledgeGraph, opts: ExtractOptions, capacity: usize) -> Self {
        Self {
            graph,
            opts,
            capacity,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn graph(&self) -> &'g KnowledgeGraph {
        self.graph
    }

    pub fn options(&self) -> &ExtractOptions {
        &self.opts
    }

    pub fn get(&self, target: &Triplet) -> Result<Arc<Option<EnclosingSubgraph>>> {
        if let Some(hit) = self.entries.lock().unwrap().get(target) {
            return Ok(Arc::clone(hit));
        }
        let sg = Arc::new(extract_pruned(self.graph, target, &self.opts)?);
        let mut entries = self.entries.lock().unwrap();
        if entries.len() < self.capacity {
            entries.insert(*target, Arc::clone(&sg));
        }
        Ok(sg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(edges: &[(u32, u32, u32)], n: usize, r: usize) -> KnowledgeGraph {
        let ts: Vec<Triplet> = edges
            .iter()
            .map(|&(h, r, t)| Triplet::new(h, r, t))
            .collect();
        KnowledgeGraph::build(&ts, n, r).unwrap()
    }

    #[test]
    fn neighbors_on_a_chain() {
        let g = graph(&[(0, 0, 1), (1, 0, 2)], 3, 1);
        let out = directed_neighbors(&g, 0, 2, Direction::Outgoing);
        assert_eq!(out, HashMap::from([(1, 1), (2, 2)]));
        let inc = directed_neighbors(&g, 2, 2, Direction::Incoming);
        assert_eq!(inc, HashMap::from([(1, 1), (0, 2)]));
        let g = graph(&[(0, 0, 1)], 3, 1);
        assert!(directed_neighbors(&g, 2, 3, Direction::Outgoing).is_empty());
    }

    #[test]
    fn extraction_drops_target_edge_and_off_path_nodes() {
        // a=0, b=1, c=2, d=3 ; r1=0, r2=1, r3=2
        let g = graph(&[(0, 0, 1), (1, 1, 2), (0, 2, 2), (3, 0, 0)], 4, 3);
        let sg = extract_enclosing_subgraph(
            &g,
            &Triplet::new(0, 2, 2),
            1,
            DirectionMode::PathConsistent,
        )
        .unwrap()
        .unwrap();
        assert_eq!(sg.nodes(), &[0, 1, 2]);
        let mut edges = sg.global_edges();
        edges.sort();
        assert_eq!(edges, vec![Triplet::new(0, 0, 1), Triplet::new(1, 1, 2)]);
        assert_eq!(sg.distances(), &[(0, 1), (1, 1), (1, 0)]);
    }

    #[test]
    fn disconnected_target_is_empty() {
        let g = graph(&[(0, 0, 1)], 3, 10);
        let t = Triplet::new(0, 9, 2);
        assert!(
            extract_enclosing_subgraph(&g, &t, 3, DirectionMode::PathConsistent)
                .unwrap()
                .is_none()
        );
        assert!(!has_enclosing_path(&g, &t, 3).unwrap());
    }

    #[test]
    fn only_target_edge_is_empty() {
        let g = graph(&[(0, 0, 1), (0, 0, 1)], 2, 1);
        let t = Triplet::new(0, 0, 1);
        assert!(
            extract_enclosing_subgraph(&g, &t, 2, DirectionMode::PathConsistent)
                .unwrap()
                .is_none()
        );
        assert!(!has_enclosing_path(&g, &t, 2).unwrap());
    }

    #[test]
    fn unknown_entity_is_an_error() {
        let g = graph(&[(0, 0, 1)], 2, 1);
        assert!(extract_enclosing_subgraph(
            &g,
            &Triplet::new(0, 0, 7),
            2,
            DirectionMode::PathConsistent
        )
        .is_err());
    }

    #[test]
    fn literal_mode_selects_upstream_and_downstream() {
        // 3 -> 0 (head), 1 (tail) -> 3, plus 0 -> 1 as a non-target relation.
        let g = graph(&[(3, 0, 0), (1, 0, 3), (0, 1, 1)], 4, 3);
        let sg =
            extract_enclosing_subgraph(&g, &Triplet::new(0, 2, 1), 2, DirectionMode::PaperLiteral)
                .unwrap()
                .unwrap();
        assert_eq!(sg.nodes(), &[0, 1, 3]);
        assert_eq!(sg.edges().len(), 3);
    }

    #[test]
    fn labels_are_two_hot() {
        let sg = EnclosingSubgraph::from_parts(
            vec![10, 11, 12, 13],
            vec![
                LocalEdge {
                    src: 0,
                    relation: 0,
                    dst: 1,
                },
                LocalEdge {
                    src: 1,
                    relation: 0,
                    dst: 2,
                },
                LocalEdge {
                    src: 2,
                    relation: 0,
                    dst: 3,
                },
            ],
            0,
            3,
            0,
            3,
        )
        .unwrap();
        let labels = label_nodes(&sg);
        assert_eq!(labels[0], vec![1., 0., 0., 0., 0., 1., 0., 0.]);
        assert_eq!(labels[3], vec![0., 1., 0., 0., 1., 0., 0., 0.]);
        // node 12: d_s = 2, d_t = 1
        assert_eq!(labels[2], vec![0., 0., 1., 0., 0., 1., 0., 0.]);
        for l in &labels {
            assert_eq!(l.len(), 8);
            assert_eq!(l.iter().filter(|&&x| x == 1.0).count(), 2);
        }
    }

    #[test]
    fn prune_is_identity_when_small() {
        let g = graph(&[(0, 0, 1), (1, 1, 2), (0, 2, 2)], 3, 3);
        let sg = extract_enclosing_subgraph(
            &g,
            &Triplet::new(0, 2, 2),
            1,
            DirectionMode::PathConsistent,
        )
        .unwrap()
        .unwrap();
        assert_eq!(prune_subgraph(&sg, 10), sg);
    }

    #[test]
    fn prune_restores_a_severed_path() {
        // Ten parallel head -> a_i -> b_i -> tail paths. Greedy ranking keeps
        // the a_i (d_s = 1) first and cuts every path.
        let head = 0;
        let tail = 1;
        let mut edges = Vec::new();
        for i in 0..10 {
            let a = 2 + 2 * i;
            let b = a + 1;
            edges.extend([(head, 0, a), (a, 1, b), (b, 2, tail)]);
        }
        let g = graph(&edges, 22, 4);
        let t = Triplet::new(head, 3, tail);
        let sg = extract_enclosing_subgraph(&g, &t, 2, DirectionMode::PathConsistent)
            .unwrap()
            .unwrap();
        assert_eq!(sg.num_nodes(), 22);
        let pruned = prune_subgraph(&sg, 5);
        assert!(pruned.shortest_target_path().is_some());
        assert_eq!(pruned.num_nodes(), 6);
        assert_eq!(pruned.target(), t);
    }
}
