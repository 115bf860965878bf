//! Weighted undirected graphs over opaque integer node ids.
//!
//! Used twice in the pipeline: once for the image match graph, and once at
//! cluster level (the lost-edge graph during expansion and the MSD-weighted
//! merge graph). All operations are deterministic; ties are broken by the
//! `(smaller id, larger id)` pair of an edge.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use petgraph::unionfind::UnionFind;
use thiserror::Error;

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("edge ({a}, {b}) has invalid weight {weight}")]
    InvalidWeight { a: NodeId, b: NodeId, weight: f64 },
    #[error("graph is disconnected into {} components: {components:?}", components.len())]
    Disconnected { components: Vec<Vec<NodeId>> },
    #[error("cannot split {nodes} nodes into {parts} parts")]
    PartCount { nodes: usize, parts: usize },
    #[error("node {0} is not in the tree")]
    UnknownNode(NodeId),
    #[error("edge list does not form a tree: {0}")]
    NotATree(String),
}

/// An undirected edge, stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub weight: f64,
    pub payload: Option<u64>,
}

impl Edge {
    pub fn new(a: NodeId, b: NodeId, weight: f64) -> Self {
        Self::with_payload(a, b, weight, None)
    }

    pub fn with_payload(a: NodeId, b: NodeId, weight: f64, payload: Option<u64>) -> Self {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Self { a, b, weight, payload }
    }

    pub fn key(&self) -> (NodeId, NodeId) {
        (self.a, self.b)
    }

    pub fn other(&self, n: NodeId) -> NodeId {
        if n == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedGraph {
    nodes: BTreeSet<NodeId>,
    edges: Vec<Edge>,
    index: BTreeMap<(NodeId, NodeId), usize>,
}

impl WeightedGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from `(a, b, weight, payload)` tuples. Duplicate pairs
    /// keep the larger weight together with its payload.
    pub fn from_edges<I>(edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (NodeId, NodeId, f64, Option<u64>)>,
    {
        let mut g = Self::new();
        for (a, b, w, p) in edges {
            g.add_edge(Edge::with_payload(a, b, w, p))?;
        }
        Ok(g)
    }

    pub fn add_node(&mut self, n: NodeId) {
        self.nodes.insert(n);
    }

    pub fn add_edge(&mut self, e: Edge) -> Result<(), GraphError> {
        if e.a == e.b {
            return Err(GraphError::SelfLoop(e.a));
        }
        if !e.weight.is_finite() || e.weight < 0.0 {
            return Err(GraphError::InvalidWeight { a: e.a, b: e.b, weight: e.weight });
        }
        self.nodes.insert(e.a);
        self.nodes.insert(e.b);
        match self.index.get(&e.key()) {
            Some(&i) => {
                if e.weight > self.edges[i].weight {
                    self.edges[i] = e;
                }
            }
            None => {
                self.index.insert(e.key(), self.edges.len());
                self.edges.push(e);
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<&Edge> {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.index.get(&key).map(|&i| &self.edges[i])
    }

    pub fn adjacency(&self) -> BTreeMap<NodeId, Vec<(NodeId, f64)>> {
        let mut adj: BTreeMap<NodeId, Vec<(NodeId, f64)>> = self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for e in &self.edges {
            adj.get_mut(&e.a).unwrap().push((e.b, e.weight));
            adj.get_mut(&e.b).unwrap().push((e.a, e.weight));
        }
        adj
    }

    /// Subgraph induced by `keep`. Nodes of `keep` absent from the graph are added as isolated nodes.
    pub fn induced(&self, keep: &BTreeSet<NodeId>) -> Self {
        let mut g = Self::new();
        for &n in keep {
            g.add_node(n);
        }
        for e in &self.edges {
            if keep.contains(&e.a) && keep.contains(&e.b) {
                g.index.insert(e.key(), g.edges.len());
                g.edges.push(*e);
            }
        }
        g
    }
}

/// Maximal connected node sets, ordered by their smallest member.
pub fn connected_components(g: &WeightedGraph) -> Vec<BTreeSet<NodeId>> {
    let adj = g.adjacency();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in g.nodes() {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &(m, _) in &adj[&n] {
                if seen.insert(m) {
                    comp.insert(m);
                    queue.push_back(m);
                }
            }
        }
        out.push(comp);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Minimize,
    Maximize,
}

/// A spanning tree. `edges.len() == nodes.len() - 1` and connected.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: BTreeSet<NodeId>,
    edges: Vec<Edge>,
}

impl Tree {
    /// Validates that `edges` forms a tree over `nodes`.
    pub fn new(nodes: BTreeSet<NodeId>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::NotATree("no nodes".into()));
        }
        if edges.len() + 1 != nodes.len() {
            return Err(GraphError::NotATree(format!("{} edges for {} nodes", edges.len(), nodes.len())));
        }
        let mut g = WeightedGraph::new();
        for &n in &nodes {
            g.add_node(n);
        }
        for e in &edges {
            if !nodes.contains(&e.a) || !nodes.contains(&e.b) {
                return Err(GraphError::NotATree(format!("edge ({}, {}) leaves node set", e.a, e.b)));
            }
            g.add_edge(*e).map_err(|err| GraphError::NotATree(err.to_string()))?;
        }
        if connected_components(&g).len() != 1 {
            return Err(GraphError::NotATree("not connected".into()));
        }
        Ok(Self { nodes, edges })
    }

    pub fn singleton(n: NodeId) -> Self {
        Self { nodes: BTreeSet::from([n]), edges: Vec::new() }
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    pub fn neighbors(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for e in &self.edges {
            adj.get_mut(&e.a).unwrap().push(e.b);
            adj.get_mut(&e.b).unwrap().push(e.a);
        }
        adj
    }

    /// Parent of every node when the tree hangs from `root`, with its hop depth.
    /// The root maps to `(None, 0)`.
    pub fn rooted(&self, root: NodeId) -> Result<BTreeMap<NodeId, (Option<NodeId>, usize)>, GraphError> {
        if !self.nodes.contains(&root) {
            return Err(GraphError::UnknownNode(root));
        }
        let adj = self.neighbors();
        let mut out = BTreeMap::from([(root, (None, 0))]);
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            let depth = out[&n].1;
            for &m in &adj[&n] {
                if let std::collections::btree_map::Entry::Vacant(e) = out.entry(m) {
                    e.insert((Some(n), depth + 1));
                    queue.push_back(m);
                }
            }
        }
        Ok(out)
    }
}

/// Kruskal over edges sorted by weight (ascending or descending), ties by node pair.
pub fn spanning_tree(g: &WeightedGraph, objective: Objective) -> Result<Tree, GraphError> {
    let comps = connected_components(g);
    if comps.len() != 1 {
        return Err(GraphError::Disconnected {
            components: comps.into_iter().map(|c| c.into_iter().collect()).collect(),
        });
    }
    let nodes = g.nodes().clone();
    let dense: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();

    let mut order: Vec<&Edge> = g.edges().iter().collect();
    order.sort_by(|x, y| {
        let by_weight = match objective {
            Objective::Minimize => x.weight.total_cmp(&y.weight),
            Objective::Maximize => y.weight.total_cmp(&x.weight),
        };
        by_weight.then_with(|| x.key().cmp(&y.key()))
    });

    let mut sets = UnionFind::<usize>::new(nodes.len());
    let mut edges = Vec::with_capacity(nodes.len().saturating_sub(1));
    for e in order {
        if sets.union(dense[&e.a], dense[&e.b]) {
            edges.push(*e);
            if edges.len() + 1 == nodes.len() {
                break;
            }
        }
    }
    Ok(Tree { nodes, edges })
}

/// One spanning tree per connected component, in component order.
pub fn spanning_forest(g: &WeightedGraph, objective: Objective) -> Vec<Tree> {
    connected_components(g)
        .iter()
        .map(|c| spanning_tree(&g.induced(c), objective).expect("component is connected"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Peeling {
    /// The one or two minimum-height-tree roots.
    pub centers: Vec<NodeId>,
    /// Leaves removed at each round, outermost first.
    pub layers: Vec<BTreeSet<NodeId>>,
}

/// Strips all leaves round by round until at most two nodes remain.
pub fn peel_to_center(t: &Tree) -> Peeling {
    let adj = t.neighbors();
    let mut degree: BTreeMap<NodeId, usize> = adj.iter().map(|(&n, v)| (n, v.len())).collect();
    let mut remaining: BTreeSet<NodeId> = t.nodes().clone();
    let mut layers = Vec::new();
    let mut leaves: BTreeSet<NodeId> = remaining.iter().copied().filter(|n| degree[n] <= 1).collect();
    while remaining.len() > 2 {
        let mut next = BTreeSet::new();
        for &leaf in &leaves {
            remaining.remove(&leaf);
            for &m in &adj[&leaf] {
                if remaining.contains(&m) {
                    let d = degree.get_mut(&m).unwrap();
                    *d -= 1;
                    if *d == 1 {
                        next.insert(m);
                    }
                }
            }
        }
        layers.push(leaves);
        leaves = next;
    }
    Peeling { centers: remaining.into_iter().collect(), layers }
}

/// Edges on the longest path from `root` to a leaf.
pub fn tree_height(t: &Tree, root: NodeId) -> Result<usize, GraphError> {
    Ok(t.rooted(root)?.values().map(|&(_, d)| d).max().unwrap_or(0))
}

/// Inclusive bounds on the size of each part produced by [`balanced_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartBounds {
    pub min: usize,
    pub max: usize,
}

impl PartBounds {
    pub const IMBALANCE: f64 = 0.2;

    /// `[floor(n/k)·0.8, ceil(n/k)·1.2]`, rounded inward, with min ≥ 1.
    pub fn for_split(n: usize, k: usize) -> Self {
        let lo = ((n / k) as f64 * (1.0 - Self::IMBALANCE)).ceil() as usize;
        let hi = (n.div_ceil(k) as f64 * (1.0 + Self::IMBALANCE)).floor() as usize;
        Self { min: lo.max(1), max: hi.max(n.div_ceil(k)) }
    }

    /// Caps the upper bound, never below the even split `ceil(n/k)`.
    pub fn capped(self, n: usize, k: usize, cap: usize) -> Self {
        Self { min: self.min.min(n / k).max(1), max: self.max.min(cap).max(n.div_ceil(k)) }
    }
}

/// Sum over parts of `cut(P) / vol(P)`, where vol is the weighted degree sum.
/// Parts with zero volume contribute nothing.
pub fn normalized_cut(g: &WeightedGraph, parts: &[BTreeSet<NodeId>]) -> f64 {
    let mut owner = BTreeMap::new();
    for (i, p) in parts.iter().enumerate() {
        for &n in p {
            owner.insert(n, i);
        }
    }
    let mut cut = vec![0.0; parts.len()];
    let mut vol = vec![0.0; parts.len()];
    for e in g.edges() {
        let (pa, pb) = (owner[&e.a], owner[&e.b]);
        vol[pa] += e.weight;
        vol[pb] += e.weight;
        if pa != pb {
            cut[pa] += e.weight;
            cut[pb] += e.weight;
        }
    }
    cut.iter().zip(&vol).map(|(&c, &v)| if v > 0.0 { c / v } else { 0.0 }).sum()
}

/// Splits the nodes into exactly `k` disjoint, non-empty parts with sizes in
/// [`PartBounds::for_split`], heuristically minimizing the normalized cut.
pub fn balanced_partition(g: &WeightedGraph, k: usize) -> Result<Vec<BTreeSet<NodeId>>, GraphError> {
    let n = g.node_count();
    if k == 0 || k > n {
        return Err(GraphError::PartCount { nodes: n, parts: k });
    }
    balanced_partition_within(g, k, PartBounds::for_split(n, k))
}

/// [`balanced_partition`] with explicit per-part size bounds.
pub fn balanced_partition_within(
    g: &WeightedGraph,
    k: usize,
    bounds: PartBounds,
) -> Result<Vec<BTreeSet<NodeId>>, GraphError> {
    let n = g.node_count();
    if k == 0 || k > n || k * bounds.min > n || k * bounds.max < n {
        return Err(GraphError::PartCount { nodes: n, parts: k });
    }
    let mut parts = Vec::with_capacity(k);
    split_recursive(g, k, bounds, &mut parts);
    parts.sort_by_key(|p| *p.iter().next().unwrap());
    Ok(parts)
}

/// Below this many nodes a bisection is found by exhaustive search.
const EXHAUSTIVE_LIMIT: usize = 12;

fn split_recursive(g: &WeightedGraph, k: usize, bounds: PartBounds, out: &mut Vec<BTreeSet<NodeId>>) {
    if k == 1 {
        out.push(g.nodes().clone());
        return;
    }
    let n = g.node_count();
    let k_left = k / 2;
    let k_right = k - k_left;
    let lo = (k_left * bounds.min).max(n.saturating_sub(k_right * bounds.max));
    let hi = (k_left * bounds.max).min(n - k_right * bounds.min);
    let target = ((n * k_left) as f64 / k as f64).round() as usize;
    let target = target.clamp(lo, hi);

    let local = LocalGraph::new(g);
    let side = if n < EXHAUSTIVE_LIMIT {
        local.exhaustive_bisection(lo, hi)
    } else {
        local.heuristic_bisection(lo, hi, target)
    };
    let (left, right): (Vec<_>, Vec<_>) = (0..n).partition(|&i| side[i]);
    let left: BTreeSet<NodeId> = left.into_iter().map(|i| local.ids[i]).collect();
    let right: BTreeSet<NodeId> = right.into_iter().map(|i| local.ids[i]).collect();
    split_recursive(&g.induced(&left), k_left, bounds, out);
    split_recursive(&g.induced(&right), k_right, bounds, out);
}

/// Dense-index view of a graph for the bisection routines. `side[i] == true` means "left".
struct LocalGraph {
    ids: Vec<NodeId>,
    adj: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
}

#[derive(Clone, Copy)]
struct CutState {
    cut: f64,
    vol: [f64; 2],
    size: [usize; 2],
}

impl CutState {
    fn score(&self) -> f64 {
        let part = |s: usize| if self.vol[s] > 0.0 { self.cut / self.vol[s] } else { 0.0 };
        part(0) + part(1)
    }
}

impl LocalGraph {
    fn new(g: &WeightedGraph) -> Self {
        let ids: Vec<NodeId> = g.nodes().iter().copied().collect();
        let dense: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut adj = vec![Vec::new(); ids.len()];
        let mut degree = vec![0.0; ids.len()];
        for e in g.edges() {
            let (a, b) = (dense[&e.a], dense[&e.b]);
            adj[a].push((b, e.weight));
            adj[b].push((a, e.weight));
            degree[a] += e.weight;
            degree[b] += e.weight;
        }
        Self { ids, adj, degree }
    }

    fn state(&self, side: &[bool]) -> CutState {
        let mut st = CutState { cut: 0.0, vol: [0.0; 2], size: [0; 2] };
        for (i, &left) in side.iter().enumerate() {
            let s = usize::from(!left);
            st.vol[s] += self.degree[i];
            st.size[s] += 1;
            for &(j, w) in &self.adj[i] {
                if i < j && side[j] != left {
                    st.cut += w;
                }
            }
        }
        st
    }

    /// Minimum normalized cut over all left sets with size in `[lo, hi]`.
    /// Ties resolve to the numerically smallest membership mask.
    fn exhaustive_bisection(&self, lo: usize, hi: usize) -> Vec<bool> {
        let n = self.ids.len();
        let mut best: Option<(f64, u32)> = None;
        for mask in 0u32..(1 << n) {
            let size = mask.count_ones() as usize;
            if size < lo || size > hi {
                continue;
            }
            let side: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let score = self.state(&side).score();
            if best.is_none_or(|(s, _)| score < s) {
                best = Some((score, mask));
            }
        }
        let mask = best.expect("feasible size range").1;
        (0..n).map(|i| mask >> i & 1 == 1).collect()
    }

    /// Greedy region growing from a few seeds followed by FM-style refinement.
    fn heuristic_bisection(&self, lo: usize, hi: usize, target: usize) -> Vec<bool> {
        let mut best: Option<(f64, Vec<bool>)> = None;
        for seed in self.seeds() {
            let mut side = self.grow_region(seed, target);
            self.refine(&mut side, lo, hi);
            let score = self.state(&side).score();
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((score, side));
            }
        }
        best.unwrap().1
    }

    /// First node, then repeatedly the node farthest (in hops) from the previous seed.
    fn seeds(&self) -> Vec<usize> {
        let mut seeds = vec![0];
        for _ in 0..3 {
            let far = self.farthest_from(*seeds.last().unwrap());
            if seeds.contains(&far) {
                break;
            }
            seeds.push(far);
        }
        seeds
    }

    fn farthest_from(&self, start: usize) -> usize {
        let mut dist = vec![usize::MAX; self.ids.len()];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut last = start;
        while let Some(i) = queue.pop_front() {
            last = i;
            for &(j, _) in &self.adj[i] {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        last
    }

    /// Grows the left region from `seed` by always absorbing the frontier node
    /// most strongly tied to it; jumps to the lowest unvisited index when the
    /// frontier runs dry (disconnected input).
    fn grow_region(&self, seed: usize, target: usize) -> Vec<bool> {
        let n = self.ids.len();
        let mut side = vec![false; n];
        let mut tie = vec![0.0f64; n];
        // Lazy max-heap on (tie, lower index); stale entries are skipped on pop.
        let mut frontier = BinaryHeap::new();
        let mut taken = 0;
        let mut next = Some(seed);
        while taken < target {
            let i = match next.take() {
                Some(i) => i,
                None => loop {
                    match frontier.pop() {
                        Some(Tie(t, i)) if !side[i] && t.to_bits() == tie[i].to_bits() => break i,
                        Some(_) => continue,
                        None => break (0..n).find(|&i| !side[i]).unwrap(),
                    }
                },
            };
            side[i] = true;
            taken += 1;
            for &(j, w) in &self.adj[i] {
                if !side[j] {
                    tie[j] += w;
                    frontier.push(Tie(tie[j], j));
                }
            }
        }
        side
    }

    /// Fiduccia–Mattheyses passes: move single nodes (each at most once per
    /// pass) by best resulting score within the size bounds, keep the best
    /// prefix of the move sequence.
    fn refine(&self, side: &mut [bool], lo: usize, hi: usize) {
        const MAX_PASSES: usize = 8;
        const STALL_LIMIT: usize = 50;
        let n = side.len();
        // Weight from each node into the left side.
        let mut to_left: Vec<f64> =
            self.adj.iter().map(|row| row.iter().filter(|&&(j, _)| side[j]).map(|&(_, w)| w).sum()).collect();
        let mut st = self.state(side);
        for _ in 0..MAX_PASSES {
            let start_score = st.score();
            let mut locked = vec![false; n];
            let mut moves = Vec::new();
            let mut best_score = start_score;
            let mut best_len = 0;
            let mut stall = 0;
            loop {
                let mut pick: Option<(f64, usize, CutState)> = None;
                for i in 0..n {
                    if locked[i] {
                        continue;
                    }
                    let left_size = if side[i] { st.size[0] - 1 } else { st.size[0] + 1 };
                    if left_size < lo || left_size > hi {
                        continue;
                    }
                    let cand = self.moved(&st, side[i], i, to_left[i]);
                    let score = cand.score();
                    if pick.as_ref().is_none_or(|(s, _, _)| score < *s) {
                        pick = Some((score, i, cand));
                    }
                }
                let Some((score, i, cand)) = pick else { break };
                locked[i] = true;
                let now_left = !side[i];
                side[i] = now_left;
                for &(j, w) in &self.adj[i] {
                    to_left[j] += if now_left { w } else { -w };
                }
                st = cand;
                moves.push(i);
                if score < best_score - 1e-15 {
                    best_score = score;
                    best_len = moves.len();
                    stall = 0;
                } else {
                    stall += 1;
                    if stall >= STALL_LIMIT {
                        break;
                    }
                }
            }
            for &i in moves[best_len..].iter().rev() {
                let now_left = !side[i];
                side[i] = now_left;
                for &(j, w) in &self.adj[i] {
                    to_left[j] += if now_left { w } else { -w };
                }
            }
            st = self.state(side);
            if best_len == 0 {
                break;
            }
        }
    }

    fn moved(&self, st: &CutState, is_left: bool, i: usize, to_left: f64) -> CutState {
        let to_right = self.degree[i] - to_left;
        let d = self.degree[i];
        let mut next = *st;
        if is_left {
            next.cut += to_left - to_right;
            next.vol[0] -= d;
            next.vol[1] += d;
            next.size[0] -= 1;
            next.size[1] += 1;
        } else {
            next.cut += to_right - to_left;
            next.vol[1] -= d;
            next.vol[0] += d;
            next.size[1] -= 1;
            next.size[0] += 1;
        }
        next
    }
}

/// Frontier entry: larger tie first, then smaller index.
#[derive(PartialEq)]
struct Tie(f64, usize);

impl Eq for Tie {}

impl Ord for Tie {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Tie {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
