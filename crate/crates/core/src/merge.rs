//! Merging local reconstructions into one frame.
//!
//! Clusters sharing at least three cameras are linked by a RANSAC similarity
//! in each direction. The edge weight is the symmetric residual (MSD) of the
//! two transforms on the shared camera centers. Only the ordering of weights
//! matters: a minimum spanning tree over them keeps the most reliable `N − 1`
//! transforms. Leaf peeling finds the tree's center, which becomes the anchor
//! frame, and every cluster is moved into it by composing transforms along its
//! unique tree path.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::clustering::ImageId;
use crate::graph::{self, Edge, NodeId, Objective, Tree, WeightedGraph};
use crate::model::{ModelError, Point, Reconstruction};
use crate::parallel;
use crate::sim3::{self, AlignError, CorrespondenceSet, RansacParams, Similarity};

pub type ClusterId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error("no reconstructions to merge")]
    Empty,
    #[error("cluster id {0} used by more than one reconstruction")]
    DuplicateCluster(ClusterId),
    #[error("tree edge ({0}, {1}) has no transform")]
    MissingEdge(ClusterId, ClusterId),
    #[error("anchor {0} is not in the tree")]
    AnchorNotInTree(ClusterId),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeParams {
    pub ransac: RansacParams,
    /// Edges whose directed error exceeds this fraction of the target
    /// cluster's camera diameter are dropped.
    pub msd_reject: f64,
    /// Shared cameras needed before a pair is considered.
    pub min_common: usize,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self { ransac: RansacParams::default(), msd_reject: 0.05, min_common: 3 }
    }
}

/// Link between two clusters, `k1 < k2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeEdge {
    pub k1: ClusterId,
    pub k2: ClusterId,
    /// Maps frame `k1` into frame `k2`.
    pub forward: Similarity,
    /// Maps frame `k2` into frame `k1`, estimated independently.
    pub backward: Similarity,
    /// Shared cameras that are inliers in both directions.
    pub inliers: Vec<ImageId>,
    pub common: usize,
    pub mse_forward: f64,
    pub mse_backward: f64,
    /// `msd(mse_forward, mse_backward)`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairRejection {
    TooFewCommon(usize),
    Alignment(AlignError),
    FewSharedInliers(usize),
    LargeResidual { msd: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedPair {
    pub k1: ClusterId,
    pub k2: ClusterId,
    pub common: usize,
    pub reason: PairRejection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeGraph {
    /// Camera count per cluster.
    pub sizes: BTreeMap<ClusterId, usize>,
    pub edges: Vec<MergeEdge>,
    /// Pairs with at least one shared camera that produced no edge.
    pub rejected: Vec<RejectedPair>,
}

impl MergeGraph {
    pub fn edge(&self, a: ClusterId, b: ClusterId) -> Option<&MergeEdge> {
        let (k1, k2) = if a < b { (a, b) } else { (b, a) };
        self.edges.iter().find(|e| e.k1 == k1 && e.k2 == k2)
    }

    /// Weighted cluster graph; the payload of each edge indexes `edges`.
    pub fn weighted(&self) -> WeightedGraph {
        let mut g = WeightedGraph::new();
        for &k in self.sizes.keys() {
            g.add_node(k);
        }
        for (i, e) in self.edges.iter().enumerate() {
            g.add_edge(Edge::with_payload(e.k1, e.k2, e.weight, Some(i as u64)))
                .expect("merge edge weights are finite and non-negative");
        }
        g
    }
}

/// Per-pair RANSAC seed, independent of evaluation order.
fn pair_seed(base: u64, k1: ClusterId, k2: ClusterId, backward: bool) -> u64 {
    let mut x = base ^ ((k1 as u64) << 33) ^ ((k2 as u64) << 1) ^ backward as u64;
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn cluster_ids(recons: &[Reconstruction]) -> Result<Vec<ClusterId>, MergeError> {
    let ids: Vec<ClusterId> = recons.iter().enumerate().map(|(i, r)| r.cluster_id.unwrap_or(i as ClusterId)).collect();
    let mut seen = BTreeSet::new();
    for &id in &ids {
        if !seen.insert(id) {
            return Err(MergeError::DuplicateCluster(id));
        }
    }
    Ok(ids)
}

fn link_pair(
    (k1, a): (ClusterId, &Reconstruction),
    (k2, b): (ClusterId, &Reconstruction),
    params: &MergeParams,
) -> Result<MergeEdge, RejectedPair> {
    let corr = CorrespondenceSet::between(a, b);
    let common = corr.len();
    let reject = |reason| RejectedPair { k1, k2, common, reason };
    if common < params.min_common.max(3) {
        return Err(reject(PairRejection::TooFewCommon(common)));
    }
    let rev = corr.reversed();
    let fwd_params = params.ransac.with_seed(pair_seed(params.ransac.seed, k1, k2, false));
    let bwd_params = params.ransac.with_seed(pair_seed(params.ransac.seed, k1, k2, true));
    let fwd = sim3::estimate_similarity_scaled(&corr, &fwd_params, b.diameter())
        .map_err(|e| reject(PairRejection::Alignment(e)))?;
    let bwd = sim3::estimate_similarity_scaled(&rev, &bwd_params, a.diameter())
        .map_err(|e| reject(PairRejection::Alignment(e)))?;

    let back_inliers: BTreeSet<ImageId> = bwd.inliers.iter().copied().collect();
    let inliers: Vec<ImageId> = fwd.inliers.iter().copied().filter(|i| back_inliers.contains(i)).collect();
    if inliers.len() < 3 {
        return Err(reject(PairRejection::FewSharedInliers(inliers.len())));
    }

    let mse_forward = sim3::mse(&fwd.transform, &corr.center_pairs());
    let mse_backward = sim3::mse(&bwd.transform, &rev.center_pairs());
    let weight = sim3::msd(mse_forward, mse_backward);
    if mse_forward > params.msd_reject * b.diameter() || mse_backward > params.msd_reject * a.diameter() {
        return Err(reject(PairRejection::LargeResidual { msd: weight }));
    }
    Ok(MergeEdge {
        k1,
        k2,
        forward: fwd.transform,
        backward: bwd.transform,
        inliers,
        common,
        mse_forward,
        mse_backward,
        weight,
    })
}

pub fn build_merge_graph(recons: &[Reconstruction], params: &MergeParams) -> Result<MergeGraph, MergeError> {
    if recons.is_empty() {
        return Err(MergeError::Empty);
    }
    let ids = cluster_ids(recons)?;
    let mut order: Vec<usize> = (0..recons.len()).collect();
    order.sort_by_key(|&i| ids[i]);

    let image_sets: Vec<BTreeSet<ImageId>> = recons.iter().map(Reconstruction::image_ids).collect();
    let mut pairs = Vec::new();
    for (x, &i) in order.iter().enumerate() {
        for &j in &order[x + 1..] {
            if !image_sets[i].is_disjoint(&image_sets[j]) {
                pairs.push((i, j));
            }
        }
    }
    let results = parallel::map_bounded(&pairs, parallel::available_workers(), |&(i, j)| {
        link_pair((ids[i], &recons[i]), (ids[j], &recons[j]), params)
    });

    let mut edges = Vec::new();
    let mut rejected = Vec::new();
    for r in results {
        match r {
            Ok(e) => edges.push(e),
            Err(r) => rejected.push(r),
        }
    }
    let sizes = order.iter().map(|&i| (ids[i], recons[i].len())).collect();
    Ok(MergeGraph { sizes, edges, rejected })
}

/// Minimum spanning tree of each connected component of the merge graph.
pub fn select_minst(mg: &MergeGraph) -> Vec<Tree> {
    graph::spanning_forest(&mg.weighted(), Objective::Minimize)
}

/// Tree center by leaf peeling; of two centers, the larger cluster wins
/// (smaller id on a tie).
pub fn find_anchor(t: &Tree, sizes: &BTreeMap<ClusterId, usize>) -> ClusterId {
    let centers = graph::peel_to_center(t).centers;
    let size = |k: &ClusterId| sizes.get(k).copied().unwrap_or(0);
    *centers.iter().max_by(|a, b| size(a).cmp(&size(b)).then(b.cmp(a))).expect("a tree has at least one center")
}

/// Transform from each cluster of `t` into the anchor frame, composed along
/// the tree path. The anchor maps to the identity.
pub fn compose_to_anchor(
    t: &Tree,
    anchor: ClusterId,
    mg: &MergeGraph,
) -> Result<BTreeMap<ClusterId, Similarity>, MergeError> {
    let rooted = t.rooted(anchor).map_err(|_| MergeError::AnchorNotInTree(anchor))?;
    let mut by_depth: Vec<(&NodeId, &(Option<NodeId>, usize))> = rooted.iter().collect();
    by_depth.sort_by_key(|(k, (_, d))| (*d, **k));

    let mut out: BTreeMap<ClusterId, Similarity> = BTreeMap::new();
    for (&k, &(parent, _)) in by_depth {
        let to_anchor = match parent {
            None => Similarity::identity(),
            Some(p) => {
                let e = mg.edge(k, p).ok_or(MergeError::MissingEdge(k.min(p), k.max(p)))?;
                let step = if e.k1 == k { e.forward } else { e.forward.inverse() };
                out[&p].after(&step)
            }
        };
        out.insert(k, to_anchor);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub clusters: Vec<ClusterId>,
    pub tree: Tree,
    pub anchor: ClusterId,
    pub to_anchor: BTreeMap<ClusterId, Similarity>,
    /// Leaf layers removed while searching for the anchor.
    pub layers: Vec<BTreeSet<ClusterId>>,
    /// Tree hops from each cluster to the anchor.
    pub hops: BTreeMap<ClusterId, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub reconstruction: Reconstruction,
    pub plan: MergePlan,
    /// Cluster each surviving camera was taken from.
    pub camera_source: BTreeMap<ImageId, ClusterId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    /// One model per connected component, largest first.
    pub models: Vec<MergedModel>,
    pub graph: MergeGraph,
}

/// Points of a merged model carry `(cluster id << 32) | local id` when more
/// than one cluster contributes, so ids stay unique.
pub fn tagged_point_id(cluster: ClusterId, local: u64) -> u64 {
    ((cluster as u64) << 32) | (local & 0xffff_ffff)
}

pub fn merge_all(recons: &[Reconstruction], params: &MergeParams) -> Result<MergeOutcome, MergeError> {
    let mg = build_merge_graph(recons, params)?;
    let ids = cluster_ids(recons)?;
    let by_id: BTreeMap<ClusterId, &Reconstruction> = ids.iter().copied().zip(recons).collect();

    let mut models = Vec::new();
    for tree in select_minst(&mg) {
        let anchor = find_anchor(&tree, &mg.sizes);
        let to_anchor = compose_to_anchor(&tree, anchor, &mg)?;
        let hops: BTreeMap<ClusterId, usize> =
            tree.rooted(anchor).expect("anchor in tree").into_iter().map(|(k, (_, d))| (k, d)).collect();
        let layers = graph::peel_to_center(&tree).layers;
        let clusters: Vec<ClusterId> = tree.nodes().iter().copied().collect();

        // Camera copy nearest the anchor wins; then the larger cluster; then the smaller id.
        let mut priority = clusters.clone();
        priority.sort_by_key(|k| (hops[k], std::cmp::Reverse(mg.sizes[k]), *k));
        let mut cameras = BTreeMap::new();
        let mut camera_source = BTreeMap::new();
        let mut points = Vec::new();
        let single = clusters.len() == 1;
        for &k in &priority {
            let moved = sim3::apply_similarity(&to_anchor[&k], by_id[&k]);
            for c in moved.cameras() {
                if let std::collections::btree_map::Entry::Vacant(e) = cameras.entry(c.image_id) {
                    e.insert(*c);
                    camera_source.insert(c.image_id, k);
                }
            }
            points.extend(
                moved
                    .points
                    .into_iter()
                    .map(|p| Point { id: if single { p.id } else { tagged_point_id(k, p.id) }, ..p }),
            );
        }
        points.sort_by_key(|p| p.id);
        let cluster_id = if single { by_id[&anchor].cluster_id } else { None };
        let reconstruction = Reconstruction::new(cluster_id, cameras.into_values().collect(), points)?;
        models.push(MergedModel {
            reconstruction,
            plan: MergePlan { clusters, tree, anchor, to_anchor, layers, hops },
            camera_source,
        });
    }
    models.sort_by_key(|m| (std::cmp::Reverse(m.reconstruction.len()), m.plan.clusters[0]));
    Ok(MergeOutcome { models, graph: mg })
}
