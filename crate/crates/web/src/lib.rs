//! Browser demo: each operation returns a JSON string the page draws on a canvas.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use dnc_sfm::clustering::{self, ClusteringParams};
use dnc_sfm::merge::{self, MergeParams};
use dnc_sfm::model::{rotation_angle_deg, CameraPose, Reconstruction};
use dnc_sfm::pipeline::cluster_seed;
use dnc_sfm::scene::{self, GroundTruthScene, Layout, NoiseModel};
use dnc_sfm::sim3::{self, CorrespondenceSet, RansacParams, Similarity};

const MAX_CAMERAS: usize = 600;
const POINTS: usize = 300;
const COVISIBILITY: f64 = 0.1;
const WEIGHT_SCALE: f64 = 100.0;

fn xyz(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn build_scene(layout: &str, cameras: usize, seed: u64) -> Result<GroundTruthScene, String> {
    let layout: Layout = layout.parse().map_err(|e: scene::SceneError| e.to_string())?;
    if cameras > MAX_CAMERAS {
        return Err(format!("at most {MAX_CAMERAS} cameras in the demo"));
    }
    scene::generate_scene(layout, cameras, POINTS, seed).map_err(|e| e.to_string())
}

fn params(max_cluster_size: usize, completeness: f64, seed: u64) -> ClusteringParams {
    ClusteringParams { max_cluster_size, completeness_ratio: completeness, seed, ..Default::default() }
}

#[derive(Serialize)]
struct ClusterView {
    centers: Vec<[f64; 3]>,
    edges: Vec<(u32, u32)>,
    clusters: Vec<Vec<u32>>,
    completeness: Vec<f64>,
    unsatisfied: Vec<usize>,
    size_cap: usize,
}

/// Generates a scene, derives its match graph and clusters it.
pub fn cluster_scene(
    layout: &str,
    cameras: usize,
    max_cluster_size: usize,
    completeness: f64,
    seed: u64,
) -> Result<String, String> {
    let s = build_scene(layout, cameras, seed)?;
    let g = scene::derive_match_graph(&s, COVISIBILITY, WEIGHT_SCALE);
    let params = params(max_cluster_size, completeness, seed);
    let out = clustering::cluster_images(&g, &params).map_err(|e| e.to_string())?;
    let cs = &out.clusters;
    let view = ClusterView {
        centers: s.cameras.iter().map(|c| xyz(&c.center)).collect(),
        edges: g.edges().iter().map(|e| e.key()).collect(),
        clusters: cs.clusters.iter().map(|c| c.iter().copied().collect()).collect(),
        completeness: (0..cs.len()).map(|i| clustering::completeness(cs, i).unwrap_or(0.0)).collect(),
        unsatisfied: out.report.unsatisfied.clone(),
        size_cap: params.size_cap(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MergeView {
    truth: Vec<[f64; 3]>,
    /// Merged centers aligned onto the ground truth for display.
    merged: Vec<(u32, [f64; 3])>,
    source: Vec<(u32, u32)>,
    anchor: u32,
    tree: Vec<(u32, u32)>,
    hops: Vec<(u32, usize)>,
    corrupted: Vec<u32>,
    center_rmse: f64,
    mean_rotation_error_deg: f64,
    models: usize,
}

/// Clusters a scene, solves every cluster with gauge-randomised noisy
/// poses, merges them and aligns the result onto the ground truth.
#[allow(clippy::too_many_arguments)]
pub fn merge_scene(
    layout: &str,
    cameras: usize,
    max_cluster_size: usize,
    sigma_center: f64,
    outlier_fraction: f64,
    ransac_threshold: f64,
    seed: u64,
) -> Result<String, String> {
    let s = build_scene(layout, cameras, seed)?;
    let g = scene::derive_match_graph(&s, COVISIBILITY, WEIGHT_SCALE);
    let out = clustering::cluster_images(&g, &params(max_cluster_size, 0.5, seed)).map_err(|e| e.to_string())?;
    let noise = NoiseModel { sigma_center, sigma_rot_deg: sigma_center * 20.0, outlier_fraction, ..Default::default() };
    noise.validate().map_err(|e| e.to_string())?;
    let mut solved = Vec::new();
    let mut corrupted = Vec::new();
    for (k, c) in out.clusters.clusters.iter().enumerate() {
        let k = k as u32;
        let sol = scene::solve_cluster_synthetic(&s, c, k, &noise, cluster_seed(seed, k)).map_err(|e| e.to_string())?;
        corrupted.extend(sol.corrupted);
        solved.push(sol.reconstruction);
    }
    let mut params = MergeParams::default();
    params.ransac.threshold = ransac_threshold;
    params.ransac.seed = seed;
    let merged = merge::merge_all(&solved, &params).map_err(|e| e.to_string())?;
    let model = &merged.models[0];
    let rec = &model.reconstruction;
    let metrics = scene::evaluate_against_gt(rec, &s).map_err(|e| e.to_string())?;
    let align = display_alignment(rec, &s)?;
    corrupted.sort_unstable();
    corrupted.dedup();
    let view = MergeView {
        truth: s.cameras.iter().map(|c| xyz(&c.center)).collect(),
        merged: rec.cameras().iter().map(|c| (c.image_id, xyz(&align.transform_point(&c.center)))).collect(),
        source: model.camera_source.iter().map(|(&i, &k)| (i, k)).collect(),
        anchor: model.plan.anchor,
        tree: model.plan.tree.edges().iter().map(|e| (e.a, e.b)).collect(),
        hops: model.plan.hops.iter().map(|(&k, &h)| (k, h)).collect(),
        corrupted,
        center_rmse: metrics.center_rmse,
        mean_rotation_error_deg: metrics.mean_rotation_error_deg,
        models: merged.models.len(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

fn display_alignment(rec: &Reconstruction, s: &GroundTruthScene) -> Result<Similarity, String> {
    let (src, dst): (Vec<_>, Vec<_>) =
        rec.cameras().iter().filter_map(|c| s.camera(c.image_id).map(|g| (c.center, g.center))).unzip();
    sim3::umeyama(&src, &dst).ok_or_else(|| "cannot align the merged model".to_string())
}

#[derive(Serialize)]
struct RansacView {
    source: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    /// Source centers mapped by the estimate.
    mapped: Vec<[f64; 3]>,
    outlier: Vec<bool>,
    inlier: Vec<bool>,
    true_scale: f64,
    scale: f64,
    rotation_error_deg: f64,
    translation_error: f64,
    refined: bool,
}

/// Fits a similarity to `n` camera correspondences of which a fraction
/// are replaced by random poses.
pub fn ransac_fit(n: usize, outlier_fraction: f64, noise: f64, threshold: f64, seed: u64) -> Result<String, String> {
    if !(3..=2000).contains(&n) {
        return Err("use between 3 and 2000 correspondences".into());
    }
    if !(0.0..1.0).contains(&outlier_fraction) || noise.is_nan() || noise < 0.0 {
        return Err("outlier fraction must be in [0, 1) and noise non-negative".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    let truth =
        Similarity::new(scale, scene::random_rotation(&mut rng), Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)));
    let jitter = Normal::new(0.0, noise).map_err(|e| e.to_string())?;
    let bad = (outlier_fraction * n as f64).floor() as usize;
    let mut pairs = Vec::with_capacity(n);
    let mut outlier = vec![false; n];
    for i in 0..n {
        let src = CameraPose::new(
            i as u32,
            scene::random_rotation(&mut rng),
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        );
        let mut dst = truth.transform_pose(&src);
        dst.center += Vector3::from_fn(|_, _| jitter.sample(&mut rng)) * scale;
        pairs.push((src, dst));
    }
    let target_origin = truth.transform_point(&Vector3::zeros());
    for i in rand::seq::index::sample(&mut rng, n, bad) {
        outlier[i] = true;
        let c = target_origin + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * scale;
        pairs[i].1 = CameraPose::new(i as u32, scene::random_rotation(&mut rng), c);
    }
    let corr = CorrespondenceSet::new(pairs.clone()).map_err(|e| e.to_string())?;
    let params = RansacParams { threshold, seed, ..Default::default() };
    let est = sim3::estimate_similarity(&corr, &params).map_err(|e| e.to_string())?;
    let t = &est.transform;
    let view = RansacView {
        source: pairs.iter().map(|p| xyz(&p.0.center)).collect(),
        target: pairs.iter().map(|p| xyz(&p.1.center)).collect(),
        mapped: pairs.iter().map(|p| xyz(&t.transform_point(&p.0.center))).collect(),
        inlier: (0..n as u32).map(|i| est.inliers.contains(&i)).collect(),
        outlier,
        true_scale: scale,
        scale: t.scale,
        rotation_error_deg: rotation_angle_deg(&t.rotation, &truth.rotation),
        translation_error: (t.translation - truth.translation).norm(),
        refined: est.refined,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = clusterScene)]
pub fn cluster_scene_js(
    layout: &str,
    cameras: usize,
    max_cluster_size: usize,
    completeness: f64,
    seed: u32,
) -> Result<String, JsValue> {
    cluster_scene(layout, cameras, max_cluster_size, completeness, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = mergeScene)]
pub fn merge_scene_js(
    layout: &str,
    cameras: usize,
    max_cluster_size: usize,
    sigma_center: f64,
    outlier_fraction: f64,
    ransac_threshold: f64,
    seed: u32,
) -> Result<String, JsValue> {
    merge_scene(layout, cameras, max_cluster_size, sigma_center, outlier_fraction, ransac_threshold, seed as u64)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = ransacFit)]
pub fn ransac_fit_js(
    n: usize,
    outlier_fraction: f64,
    noise: f64,
    threshold: f64,
    seed: u32,
) -> Result<String, JsValue> {
    ransac_fit(n, outlier_fraction, noise, threshold, seed as u64).map_err(|e| JsValue::from_str(&e))
}
