//! Size-bounded, overlapping image clusters.
//!
//! The match graph is first cut into `K` balanced, disjoint clusters. Match
//! edges severed by the cut ("lost edges") are then replayed along a maximum
//! spanning tree of the cluster graph, copying endpoint images across so that
//! neighbouring clusters share cameras. A seeded random phase tops up clusters
//! whose completeness ratio is still below target.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{self, Edge, NodeId, Objective, PartBounds, WeightedGraph};

pub type ImageId = NodeId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusteringError {
    #[error("invalid clustering parameter: {0}")]
    InvalidParams(String),
    #[error("match graph has no images")]
    EmptyGraph,
    #[error("cluster index {0} out of range")]
    NoSuchCluster(usize),
    #[error("image {0} is assigned to more than one cluster")]
    NotDisjoint(ImageId),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringParams {
    /// Upper bound on images per cluster after the cut.
    pub max_cluster_size: usize,
    /// Target completeness ratio, in (0, 1].
    pub completeness_ratio: f64,
    /// Lost edges replayed per maximum-spanning-tree cluster pair.
    pub max_overlap: usize,
    /// Expansion may grow a cluster to `max_cluster_size * (1 + size_slack)`.
    pub size_slack: f64,
    pub seed: u64,
    /// Random-phase budget; `None` means `10 * K`.
    pub max_random_rounds: Option<usize>,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            max_cluster_size: 100,
            completeness_ratio: 0.7,
            max_overlap: 30,
            size_slack: 0.3,
            seed: 0,
            max_random_rounds: None,
        }
    }
}

impl ClusteringParams {
    pub fn validate(&self) -> Result<(), ClusteringError> {
        let bad = |m: &str| Err(ClusteringError::InvalidParams(m.into()));
        if self.max_cluster_size < 2 {
            return bad("max cluster size must be at least 2");
        }
        if !(self.completeness_ratio > 0.0 && self.completeness_ratio <= 1.0) {
            return bad("completeness ratio must lie in (0, 1]");
        }
        if self.max_overlap < 1 {
            return bad("max overlap must be at least 1");
        }
        if !(self.size_slack >= 0.0 && self.size_slack.is_finite()) {
            return bad("size slack must be finite and non-negative");
        }
        if self.max_random_rounds == Some(0) {
            return bad("random round budget must be positive");
        }
        Ok(())
    }

    /// Hard ceiling on cluster size, `floor(S_max * (1 + slack))`.
    pub fn size_cap(&self) -> usize {
        (self.max_cluster_size as f64 * (1.0 + self.size_slack)).floor() as usize
    }

    /// `max(1, floor(n / S_max))`, raised only as far as needed for an even
    /// split to fit under [`size_cap`](Self::size_cap).
    pub fn cluster_count(&self, n: usize) -> usize {
        let mut k = (n / self.max_cluster_size).max(1);
        while n.div_ceil(k) > self.size_cap() {
            k += 1;
        }
        k
    }

    fn random_budget(&self, k: usize) -> usize {
        self.max_random_rounds.unwrap_or(10 * k)
    }
}

/// Ordered image clusters. Cluster ids are positions in the list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClusterSet {
    pub clusters: Vec<BTreeSet<ImageId>>,
}

impl ClusterSet {
    pub fn new(clusters: Vec<BTreeSet<ImageId>>) -> Self {
        Self { clusters }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn images(&self) -> BTreeSet<ImageId> {
        self.clusters.iter().flatten().copied().collect()
    }

    /// For each image, the clusters that contain it.
    pub fn provenance(&self) -> BTreeMap<ImageId, BTreeSet<usize>> {
        let mut out: BTreeMap<ImageId, BTreeSet<usize>> = BTreeMap::new();
        for (k, c) in self.clusters.iter().enumerate() {
            for &img in c {
                out.entry(img).or_default().insert(k);
            }
        }
        out
    }

    fn owners(&self) -> Result<BTreeMap<ImageId, usize>, ClusteringError> {
        let mut owner = BTreeMap::new();
        for (k, c) in self.clusters.iter().enumerate() {
            for &img in c {
                if owner.insert(img, k).is_some() {
                    return Err(ClusteringError::NotDisjoint(img));
                }
            }
        }
        Ok(owner)
    }

    fn membership_counts(&self) -> BTreeMap<ImageId, usize> {
        let mut counts = BTreeMap::new();
        for &img in self.clusters.iter().flatten() {
            *counts.entry(img).or_insert(0) += 1;
        }
        counts
    }

    fn completeness_with(&self, counts: &BTreeMap<ImageId, usize>, i: usize) -> f64 {
        let c = &self.clusters[i];
        if c.is_empty() {
            return 0.0;
        }
        let shared: usize = c.iter().map(|img| counts[img] - 1).sum();
        shared as f64 / c.len() as f64
    }
}

/// `sum_{j != i} |C_i ∩ C_j| / |C_i|`.
pub fn completeness(cs: &ClusterSet, i: usize) -> Result<f64, ClusteringError> {
    if i >= cs.len() {
        return Err(ClusteringError::NoSuchCluster(i));
    }
    Ok(cs.completeness_with(&cs.membership_counts(), i))
}

/// A match edge cut by the partition; `a` lies in the lower cluster of its pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LostEdge {
    pub a: ImageId,
    pub b: ImageId,
    pub weight: f64,
}

/// Lost edges keyed by cluster pair `(k1, k2)` with `k1 < k2`, each list by
/// descending weight.
pub type LostEdgeMap = BTreeMap<(usize, usize), Vec<LostEdge>>;

#[derive(Debug, Clone, PartialEq)]
pub struct CutResult {
    pub clusters: ClusterSet,
    /// Clusters above the size cap (empty unless the bounds could not be met).
    pub oversized: Vec<usize>,
}

pub fn cut_images(g: &WeightedGraph, params: &ClusteringParams) -> Result<CutResult, ClusteringError> {
    params.validate()?;
    let n = g.node_count();
    if n == 0 {
        return Err(ClusteringError::EmptyGraph);
    }
    let k = params.cluster_count(n);
    let parts = if k == 1 {
        vec![g.nodes().clone()]
    } else {
        let bounds = PartBounds::for_split(n, k).capped(n, k, params.size_cap());
        graph::balanced_partition_within(g, k, bounds)?
    };
    let cap = params.size_cap();
    let oversized = parts.iter().enumerate().filter(|(_, p)| p.len() > cap).map(|(i, _)| i).collect();
    Ok(CutResult { clusters: ClusterSet::new(parts), oversized })
}

pub fn collect_lost_edges(g: &WeightedGraph, cs: &ClusterSet) -> Result<LostEdgeMap, ClusteringError> {
    let owner = cs.owners()?;
    let mut lost = LostEdgeMap::new();
    for e in g.edges() {
        let (ka, kb) = (owner[&e.a], owner[&e.b]);
        if ka == kb {
            continue;
        }
        let edge = if ka < kb {
            LostEdge { a: e.a, b: e.b, weight: e.weight }
        } else {
            LostEdge { a: e.b, b: e.a, weight: e.weight }
        };
        lost.entry((ka.min(kb), ka.max(kb))).or_default().push(edge);
    }
    for list in lost.values_mut() {
        list.sort_by(|x, y| {
            y.weight.total_cmp(&x.weight).then_with(|| (x.a.min(x.b), x.a.max(x.b)).cmp(&(y.a.min(y.b), y.a.max(y.b))))
        });
    }
    Ok(lost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub clusters: ClusterSet,
    /// Cluster pairs of the maximum spanning forest of the cluster graph.
    pub tree_pairs: Vec<(usize, usize)>,
    /// Clusters still below the completeness target.
    pub unsatisfied: Vec<usize>,
    pub random_rounds: usize,
    /// True when the random phase stopped on its round budget.
    pub budget_exhausted: bool,
}

/// Copies `b` into cluster `k1` and `a` into cluster `k2`, each unless it would
/// push that cluster past `cap`. Returns whether anything was added.
/// Clusters with per-image owners, so completeness updates in O(owners).
struct Overlaps {
    clusters: Vec<BTreeSet<ImageId>>,
    owners: BTreeMap<ImageId, Vec<usize>>,
    /// `Σ_{img ∈ C_i} (owners(img) − 1)`.
    shared: Vec<usize>,
    cap: usize,
}

impl Overlaps {
    fn new(clusters: Vec<BTreeSet<ImageId>>, cap: usize) -> Self {
        let mut owners: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
        for (i, c) in clusters.iter().enumerate() {
            for &img in c {
                owners.entry(img).or_default().push(i);
            }
        }
        let shared = clusters.iter().map(|c| c.iter().map(|img| owners[img].len() - 1).sum()).collect();
        Self { clusters, owners, shared, cap }
    }

    fn completeness(&self, i: usize) -> f64 {
        let n = self.clusters[i].len();
        if n == 0 {
            return 0.0;
        }
        self.shared[i] as f64 / n as f64
    }

    fn can_insert(&self, k: usize, img: ImageId) -> bool {
        !self.clusters[k].contains(&img) && self.clusters[k].len() < self.cap
    }

    fn insert(&mut self, k: usize, img: ImageId) {
        let owners = self.owners.entry(img).or_default();
        for &o in owners.iter() {
            self.shared[o] += 1;
        }
        self.shared[k] += owners.len();
        owners.push(k);
        self.clusters[k].insert(img);
    }

    /// Adds each endpoint of `e` to the other side's cluster where room allows.
    fn insert_edge(&mut self, k1: usize, k2: usize, e: &LostEdge) {
        for (k, img) in [(k1, e.b), (k2, e.a)] {
            if self.can_insert(k, img) {
                self.insert(k, img);
            }
        }
    }

    fn would_insert(&self, k1: usize, k2: usize, e: &LostEdge) -> bool {
        self.can_insert(k1, e.b) || self.can_insert(k2, e.a)
    }
}

pub fn expand_clusters(
    cs: &ClusterSet,
    lost: &LostEdgeMap,
    params: &ClusteringParams,
) -> Result<Expansion, ClusteringError> {
    params.validate()?;
    let k = cs.len();
    let mut state = Overlaps::new(cs.clusters.clone(), params.size_cap());

    // Cluster graph: one node per cluster, weight = number of lost edges.
    let mut cluster_graph = WeightedGraph::new();
    for i in 0..k {
        cluster_graph.add_node(i as NodeId);
    }
    for (&(k1, k2), list) in lost {
        cluster_graph.add_edge(Edge::new(k1 as NodeId, k2 as NodeId, list.len() as f64))?;
    }
    let forest = graph::spanning_forest(&cluster_graph, Objective::Maximize);
    let tree_pairs: Vec<(usize, usize)> =
        forest.iter().flat_map(|t| t.edges().iter().map(|e| (e.a as usize, e.b as usize))).collect();

    // applied[p][idx]: lost edge idx of the p-th pair (in map order) was used.
    let pairs: Vec<((usize, usize), &Vec<LostEdge>)> = lost.iter().map(|(&p, l)| (p, l)).collect();
    let mut applied: Vec<Vec<bool>> = pairs.iter().map(|(_, l)| vec![false; l.len()]).collect();
    let position: BTreeMap<(usize, usize), usize> = pairs.iter().enumerate().map(|(i, (p, _))| (*p, i)).collect();
    for &(k1, k2) in &tree_pairs {
        let p = position[&(k1, k2)];
        for (idx, e) in pairs[p].1.iter().take(params.max_overlap).enumerate() {
            state.insert_edge(k1, k2, e);
            applied[p][idx] = true;
        }
    }

    let unsatisfied_now = |s: &Overlaps| -> BTreeSet<usize> {
        (0..k).filter(|&i| s.completeness(i) < params.completeness_ratio).collect()
    };
    // Unused lost edges that would still add an image, per pair. They depend
    // only on the pair's two clusters, so an insertion refreshes few lists.
    let open = |s: &Overlaps, applied: &[bool], p: usize| -> Vec<usize> {
        let ((k1, k2), list) = pairs[p];
        (0..list.len()).filter(|&idx| !applied[idx] && s.would_insert(k1, k2, &list[idx])).collect()
    };
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (p, &((k1, k2), _)) in pairs.iter().enumerate() {
        touching[k1].push(p);
        touching[k2].push(p);
    }
    let mut candidates: Vec<Vec<usize>> = (0..pairs.len()).map(|p| open(&state, &applied[p], p)).collect();

    let budget = params.random_budget(k);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut rounds = 0;
    let mut unsatisfied = unsatisfied_now(&state);
    while !unsatisfied.is_empty() && rounds < budget {
        let eligible: Vec<usize> = (0..pairs.len())
            .filter(|&p| {
                let (k1, k2) = pairs[p].0;
                unsatisfied.contains(&k1) || unsatisfied.contains(&k2)
            })
            .collect();
        let total: usize = eligible.iter().map(|&p| candidates[p].len()).sum();
        if total == 0 {
            break;
        }
        // Uniform over the eligible candidates in (pair, index) order.
        let mut r = rng.random_range(0..total);
        let mut pick = None;
        for &p in &eligible {
            if r < candidates[p].len() {
                pick = Some((p, candidates[p][r]));
                break;
            }
            r -= candidates[p].len();
        }
        let (p, idx) = pick.expect("r < total");
        let ((k1, k2), list) = pairs[p];
        state.insert_edge(k1, k2, &list[idx]);
        applied[p][idx] = true;
        let mut stale: Vec<usize> = touching[k1].iter().chain(&touching[k2]).copied().collect();
        stale.sort_unstable();
        stale.dedup();
        for q in stale {
            candidates[q] = open(&state, &applied[q], q);
        }
        rounds += 1;
        unsatisfied = unsatisfied_now(&state);
    }
    let budget_exhausted = !unsatisfied.is_empty() && rounds >= budget;

    Ok(Expansion {
        clusters: ClusterSet::new(state.clusters),
        tree_pairs,
        unsatisfied: unsatisfied.into_iter().collect(),
        random_rounds: rounds,
        budget_exhausted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub cluster_count: usize,
    pub oversized: Vec<usize>,
    pub unsatisfied: Vec<usize>,
    pub random_rounds: usize,
    pub budget_exhausted: bool,
    pub tree_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringOutcome {
    pub clusters: ClusterSet,
    pub report: ClusteringReport,
}

/// Cut, then (for more than one cluster) collect lost edges and expand.
pub fn cluster_images(g: &WeightedGraph, params: &ClusteringParams) -> Result<ClusteringOutcome, ClusteringError> {
    let cut = cut_images(g, params)?;
    if cut.clusters.len() == 1 {
        return Ok(ClusteringOutcome {
            clusters: cut.clusters,
            report: ClusteringReport {
                cluster_count: 1,
                oversized: cut.oversized,
                unsatisfied: Vec::new(),
                random_rounds: 0,
                budget_exhausted: false,
                tree_pairs: Vec::new(),
            },
        });
    }
    let lost = collect_lost_edges(g, &cut.clusters)?;
    let exp = expand_clusters(&cut.clusters, &lost, params)?;
    Ok(ClusteringOutcome {
        report: ClusteringReport {
            cluster_count: exp.clusters.len(),
            oversized: cut.oversized,
            unsatisfied: exp.unsatisfied,
            random_rounds: exp.random_rounds,
            budget_exhausted: exp.budget_exhausted,
            tree_pairs: exp.tree_pairs,
        },
        clusters: exp.clusters,
    })
}
