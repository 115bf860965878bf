use std::collections::{BTreeMap, BTreeSet, VecDeque};

use dnc_sfm::clustering::{self, ClusteringParams};
use dnc_sfm::formats;
use dnc_sfm::graph::{self, Edge, Objective, PartBounds, Tree, WeightedGraph};
use dnc_sfm::merge::{self, MergeParams};
use dnc_sfm::model::{CameraPose, Point, Reconstruction};
use dnc_sfm::scene::{self, Layout, NoiseModel};
use dnc_sfm::sim3::{self, Similarity};
use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use proptest::prelude::*;

fn rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate", |v| Vector4::from(*v).norm() > 0.1)
        .prop_map(|v| UnitQuaternion::from_quaternion(Quaternion::from(Vector4::from(v))))
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

fn similarity(scale: std::ops::Range<f64>) -> impl Strategy<Value = Similarity> {
    (scale, rotation(), vec3(50.0)).prop_map(|(ls, r, t)| Similarity::new(10f64.powf(ls), r, t))
}

/// Connected graph: a random spanning tree plus extra edges, integer weights.
fn connected_graph(max_nodes: u32) -> impl Strategy<Value = WeightedGraph> {
    (2..=max_nodes)
        .prop_flat_map(|n| {
            let tree = (1..n).map(|v| (0..v, 1..=6u32)).collect::<Vec<_>>();
            let extra = prop::collection::vec((0..n, 0..n, 1..=6u32), 0..(2 * n as usize));
            (tree, extra)
        })
        .prop_map(|(tree, extra)| {
            let mut g = WeightedGraph::new();
            for (v, (u, w)) in tree.into_iter().enumerate() {
                g.add_edge(Edge::new(u, v as u32 + 1, w as f64)).unwrap();
            }
            for (a, b, w) in extra {
                if a != b && g.edge(a, b).is_none() {
                    g.add_edge(Edge::new(a, b, w as f64)).unwrap();
                }
            }
            g
        })
}

fn brute_force_extremes(g: &WeightedGraph) -> (f64, f64) {
    let edges = g.edges();
    let k = g.node_count() - 1;
    let nodes: Vec<u32> = g.nodes().iter().copied().collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let m = edges.len();
    // Every k-subset of edges by bitmask; graphs here have few edges.
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let chosen: Vec<&Edge> = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| &edges[i]).collect();
        let mut comp: BTreeMap<u32, u32> = nodes.iter().map(|&n| (n, n)).collect();
        let mut ok = true;
        for e in &chosen {
            let (ca, cb) = (comp[&e.a], comp[&e.b]);
            if ca == cb {
                ok = false;
                break;
            }
            for v in comp.values_mut() {
                if *v == cb {
                    *v = ca;
                }
            }
        }
        if ok {
            let w: f64 = chosen.iter().map(|e| e.weight).sum();
            lo = lo.min(w);
            hi = hi.max(w);
        }
    }
    (lo, hi)
}

fn random_tree(n: u32) -> impl Strategy<Value = Tree> {
    (1..n.max(2)).map(|v| 0..v).collect::<Vec<_>>().prop_map(move |parents| {
        if n == 1 {
            return Tree::singleton(0);
        }
        let edges = parents.into_iter().enumerate().map(|(v, p)| Edge::new(p, v as u32 + 1, 1.0)).collect();
        Tree::new((0..n).collect(), edges).unwrap()
    })
}

fn height(t: &Tree, root: u32) -> usize {
    let adj = t.neighbors();
    let mut seen = BTreeMap::from([(root, 0usize)]);
    let mut q = VecDeque::from([root]);
    while let Some(v) = q.pop_front() {
        for &w in adj.get(&v).into_iter().flatten() {
            if !seen.contains_key(&w) {
                seen.insert(w, seen[&v] + 1);
                q.push_back(w);
            }
        }
    }
    seen.into_values().max().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spanning_tree_matches_enumeration(g in connected_graph(7).prop_filter("enumerable", |g| g.edge_count() <= 16)) {
        let (lo, hi) = brute_force_extremes(&g);
        prop_assert_eq!(graph::spanning_tree(&g, Objective::Minimize).unwrap().total_weight(), lo);
        prop_assert_eq!(graph::spanning_tree(&g, Objective::Maximize).unwrap().total_weight(), hi);
    }

    #[test]
    fn anchor_has_minimum_height(
        (t, sizes) in (1u32..=12).prop_flat_map(|n| (random_tree(n), prop::collection::vec(1usize..200, n as usize)))
    ) {
        let sizes: BTreeMap<u32, usize> = sizes.into_iter().enumerate().map(|(k, s)| (k as u32, s)).collect();
        let anchor = merge::find_anchor(&t, &sizes);
        let best = t.nodes().iter().map(|&r| height(&t, r)).min().unwrap();
        prop_assert_eq!(height(&t, anchor), best);
        prop_assert_eq!(graph::tree_height(&t, anchor).unwrap(), best);
    }

    #[test]
    fn partition_is_exact_cover(g in connected_graph(40), k in 1usize..6) {
        let n = g.node_count();
        prop_assume!(k <= n);
        let parts = graph::balanced_partition(&g, k).unwrap();
        let b = PartBounds::for_split(n, k);
        prop_assert_eq!(parts.len(), k);
        let mut seen = BTreeSet::new();
        for p in &parts {
            prop_assert!(!p.is_empty() && p.len() >= b.min && p.len() <= b.max);
            for &v in p {
                prop_assert!(seen.insert(v), "node {} in two parts", v);
            }
        }
        prop_assert_eq!(&seen, g.nodes());
    }

    #[test]
    fn clustering_invariants(g in connected_graph(60), s_max in 5usize..25, seed in any::<u64>()) {
        let params = ClusteringParams { max_cluster_size: s_max, seed, ..ClusteringParams::default() };
        let out = clustering::cluster_images(&g, &params).unwrap();
        let cs = &out.clusters;
        prop_assert_eq!(&cs.images(), g.nodes());
        for i in 0..cs.len() {
            prop_assert!(cs.clusters[i].len() <= params.size_cap());
            let ci = &cs.clusters[i];
            let shared: usize = (0..cs.len()).filter(|&j| j != i).map(|j| ci.intersection(&cs.clusters[j]).count()).sum();
            let eta = clustering::completeness(cs, i).unwrap();
            prop_assert_eq!(eta, shared as f64 / ci.len() as f64);
            if cs.len() > 1 && eta < params.completeness_ratio {
                prop_assert!(out.report.unsatisfied.contains(&i));
            }
        }
        prop_assert_eq!(&clustering::cluster_images(&g, &params).unwrap(), &out);

        // Expansion never removes images from the cut.
        let cut = clustering::cut_images(&g, &params).unwrap();
        if cut.clusters.len() > 1 {
            for (c, e) in cut.clusters.clusters.iter().zip(&cs.clusters) {
                prop_assert!(c.is_subset(e));
            }
            // Replaying the tree phase on its own output adds nothing: every
            // top-O_max insertion is already present or size-blocked. A tiny
            // completeness target keeps the random phase idle.
            let lost = clustering::collect_lost_edges(&g, &cut.clusters).unwrap();
            if (0..cs.len()).all(|i| clustering::completeness(cs, i).unwrap() > 0.0) {
                let replay = ClusteringParams { completeness_ratio: 1e-12, ..params.clone() };
                let again = clustering::expand_clusters(cs, &lost, &replay).unwrap();
                prop_assert_eq!(&again.clusters, cs);
            }
        }
    }

    #[test]
    fn similarity_inverse_and_composition(a in similarity(-1.0..1.0), b in similarity(-1.0..1.0), x in vec3(20.0)) {
        let y = a.inverse().transform_point(&a.transform_point(&x));
        prop_assert!((y - x).norm() <= 1e-9 * (1.0 + x.norm()));
        let ab = a.after(&b).transform_point(&x);
        let step = a.transform_point(&b.transform_point(&x));
        prop_assert!((ab - step).norm() <= 1e-9 * (1.0 + step.norm()));
    }

    #[test]
    fn transform_pose_moves_viewing_direction(t in similarity(-1.0..1.0), r in rotation(), c in vec3(10.0)) {
        let pose = CameraPose::new(0, r, c);
        let moved = t.transform_pose(&pose);
        prop_assert!((moved.center - t.transform_point(&c)).norm() <= 1e-9 * (1.0 + moved.center.norm()));
        prop_assert!((moved.viewing_direction() - t.rotation * pose.viewing_direction()).norm() <= 1e-12);
    }

    #[test]
    fn noiseless_recovery_wide_scale(t in similarity(-1.0..1.0), seed in any::<u64>(), n in 10usize..20) {
        let s = scene::generate_scene(Layout::Orbit, n, 0, seed).unwrap();
        let pairs: Vec<_> = s.cameras.iter().map(|c| (*c, t.transform_pose(c))).collect();
        let corr = sim3::CorrespondenceSet::new(pairs).unwrap();
        let est = sim3::estimate_similarity(&corr, &Default::default()).unwrap().transform;
        prop_assert!((est.scale - t.scale).abs() / t.scale <= 1e-9);
        prop_assert!(est.rotation.angle_to(&t.rotation) <= 1e-9);
    }

    #[test]
    fn evaluation_ignores_global_similarity(t in similarity(-1.0..1.0), seed in 0u64..1000) {
        let s = scene::generate_scene(Layout::Grid, 30, 0, seed).unwrap();
        let mut cams = s.cameras.clone();
        cams[3].center += Vector3::new(0.3, -0.2, 0.1);
        let rec = Reconstruction::new(None, cams, vec![]).unwrap();
        let a = scene::evaluate_against_gt(&rec, &s).unwrap();
        let b = scene::evaluate_against_gt(&sim3::apply_similarity(&t, &rec), &s).unwrap();
        prop_assert!((a.center_rmse - b.center_rmse).abs() < 1e-9);
        prop_assert!((a.mean_rotation_error_deg - b.mean_rotation_error_deg).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_json_round_trip(poses in prop::collection::vec((rotation(), vec3(100.0)), 1..20), pts in prop::collection::vec(vec3(100.0), 0..10)) {
        let cams = poses.iter().enumerate().map(|(i, (r, c))| CameraPose::new(i as u32 * 3, *r, *c)).collect();
        let points = pts.iter().enumerate().map(|(i, x)| Point { id: i as u64, position: *x, observations: vec![0] }).collect();
        let rec = Reconstruction::new(Some(4), cams, points).unwrap();
        let text = formats::write_reconstruction(&rec);
        let back = formats::parse_reconstruction(&text).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(formats::write_reconstruction(&back), text);
    }
}

/// Re-gauging every cluster by one common similarity changes the merged
/// model by exactly that similarity.
#[test]
fn merge_is_gauge_equivariant() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(24));
    runner
        .run(&(similarity(-1.0..1.0), 0u64..500), |(g, seed)| {
            let s = scene::generate_scene(Layout::Orbit, 60, 20, seed).unwrap();
            let clusters: Vec<BTreeSet<u32>> =
                vec![(0..25).collect(), (20..45).collect(), (40..60).chain(0..5).collect()];
            let recs: Vec<Reconstruction> = clusters
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    scene::solve_cluster_synthetic(&s, c, k as u32, &NoiseModel::default(), seed + k as u64)
                        .unwrap()
                        .reconstruction
                })
                .collect();
            let moved: Vec<Reconstruction> = recs.iter().map(|r| sim3::apply_similarity(&g, r)).collect();
            let a = merge::merge_all(&recs, &MergeParams::default()).unwrap();
            let b = merge::merge_all(&moved, &MergeParams::default()).unwrap();
            prop_assert_eq!(a.models.len(), 1);
            prop_assert_eq!(b.models.len(), 1);
            let (ma, mb) = (&a.models[0].reconstruction, &b.models[0].reconstruction);
            prop_assert_eq!(ma.image_ids(), mb.image_ids());
            let d = ma.diameter();
            let src: Vec<_> = ma.cameras().iter().map(|c| c.center).collect();
            let dst: Vec<_> = mb.cameras().iter().map(|c| c.center).collect();
            let fit = sim3::umeyama(&src, &dst).unwrap();
            let sq: f64 = src.iter().zip(&dst).map(|(x, y)| (fit.transform_point(x) - y).norm_squared()).sum();
            let rmse = (sq / src.len() as f64).sqrt() / (d * fit.scale);
            prop_assert!(rmse < 1e-9, "rmse {}", rmse);
            Ok(())
        })
        .unwrap();
}
