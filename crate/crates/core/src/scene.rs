//! Synthetic ground truth.
//!
//! Generates seeded camera layouts, derives a match graph from a simple
//! covisibility model, stands in for a local SfM solver (one random gauge per
//! cluster plus pose noise and optional gross outliers), and scores a merged
//! model against the ground truth after a best-fit global similarity.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use nalgebra::{Unit, UnitQuaternion, Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ImageId;
use crate::graph::{Edge, WeightedGraph};
use crate::model::{self, diameter, CameraPose, Point, Reconstruction};
use crate::sim3::{self, Similarity};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("unknown layout '{0}' (expected orbit, grid or street)")]
    InvalidLayout(String),
    #[error("a scene needs at least 2 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("image {0} is not in the scene")]
    UnknownImage(ImageId),
    #[error("cluster has no images")]
    EmptyCluster,
    #[error("only {0} cameras in common with ground truth, need 3")]
    TooFewCommon(usize),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Ring of cameras looking at the origin.
    Orbit,
    /// Aerial lawn-mower rows looking straight down.
    Grid,
    /// A line of cameras facing a facade.
    Street,
}

impl FromStr for Layout {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orbit" => Ok(Layout::Orbit),
            "grid" => Ok(Layout::Grid),
            "street" => Ok(Layout::Street),
            other => Err(SceneError::InvalidLayout(other.to_string())),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Orbit => "orbit",
            Layout::Grid => "grid",
            Layout::Street => "street",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub layout: Layout,
    pub seed: u64,
    /// Sorted by image id, ids `0..n`.
    pub cameras: Vec<CameraPose>,
    pub points: Vec<Point>,
    pub diameter: f64,
}

const ORBIT_RADIUS: f64 = 10.0;
const GRID_ALTITUDE: f64 = 3.0;
const STREET_DEPTH: f64 = 8.0;
const HALF_FOV_DEG: f64 = 35.0;

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let v = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(v))
}

fn small_rotation(rng: &mut ChaCha8Rng, sigma_deg: f64) -> UnitQuaternion<f64> {
    if sigma_deg == 0.0 {
        return UnitQuaternion::identity();
    }
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle: f64 = Normal::new(0.0, sigma_deg.to_radians()).unwrap().sample(rng);
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle)
}

fn sees(cam: &CameraPose, x: &Vector3<f64>) -> bool {
    let ray = x - cam.center;
    let n = ray.norm();
    n > 0.0 && cam.viewing_direction().dot(&ray) / n >= HALF_FOV_DEG.to_radians().cos()
}

pub fn generate_scene(
    layout: Layout,
    n_cameras: usize,
    n_points: usize,
    seed: u64,
) -> Result<GroundTruthScene, SceneError> {
    if n_cameras < 2 {
        return Err(SceneError::TooFewCameras(n_cameras));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_cameras;
    let mut cameras = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n_points);
    match layout {
        Layout::Orbit => {
            for i in 0..n {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                let c = Vector3::new(ORBIT_RADIUS * a.cos(), ORBIT_RADIUS * a.sin(), 0.0);
                cameras.push(CameraPose::looking_at(i as ImageId, c, Vector3::zeros(), Vector3::z()));
            }
            for _ in 0..n_points {
                let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                let r = 0.3 * ORBIT_RADIUS * rng.random::<f64>().cbrt();
                points.push(Vector3::from(dir) * r);
            }
        }
        Layout::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(cols);
            for i in 0..n {
                let (r, k) = (i / cols, i % cols);
                let col = if r % 2 == 0 { k } else { cols - 1 - k };
                let c = Vector3::new(col as f64, r as f64, GRID_ALTITUDE)
                    + Vector3::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.1..0.1),
                    );
                let look = CameraPose::looking_at(i as ImageId, c, c - Vector3::z() * GRID_ALTITUDE, Vector3::y());
                let jitter = small_rotation(&mut rng, 2.0);
                cameras.push(CameraPose { rotation: jitter * look.rotation, ..look });
            }
            for _ in 0..n_points {
                points.push(Vector3::new(
                    rng.random_range(-2.0..cols as f64 + 1.0),
                    rng.random_range(-2.0..rows as f64 + 1.0),
                    rng.random_range(0.0..0.5),
                ));
            }
        }
        Layout::Street => {
            for i in 0..n {
                let c = Vector3::new(i as f64, rng.random_range(-0.15..0.15), 1.5 + rng.random_range(-0.1..0.1));
                let look = CameraPose::looking_at(i as ImageId, c, c + Vector3::y() * STREET_DEPTH, Vector3::z());
                let jitter = small_rotation(&mut rng, 2.0);
                cameras.push(CameraPose { rotation: jitter * look.rotation, ..look });
            }
            for _ in 0..n_points {
                points.push(Vector3::new(
                    rng.random_range(-3.0..n as f64 + 2.0),
                    STREET_DEPTH + rng.random_range(-0.5..0.5),
                    rng.random_range(0.0..6.0),
                ));
            }
        }
    }
    let points = points
        .into_iter()
        .enumerate()
        .map(|(i, x)| Point {
            id: i as u64,
            position: x,
            observations: cameras.iter().filter(|c| sees(c, &x)).map(|c| c.image_id).collect(),
        })
        .collect();
    let diameter = diameter(cameras.iter().map(|c| c.center));
    Ok(GroundTruthScene { layout, seed, cameras, points, diameter })
}

impl GroundTruthScene {
    pub fn camera(&self, id: ImageId) -> Option<&CameraPose> {
        self.cameras.binary_search_by_key(&id, |c| c.image_id).ok().map(|i| &self.cameras[i])
    }

    pub fn as_reconstruction(&self) -> Reconstruction {
        Reconstruction::new(None, self.cameras.clone(), self.points.clone()).expect("scene cameras are unique")
    }

    /// Rebuilds scene metadata around cameras and points read from disk.
    pub fn from_reconstruction(rec: &Reconstruction, layout: Layout, seed: u64) -> Self {
        Self { layout, seed, cameras: rec.cameras().to_vec(), points: rec.points.clone(), diameter: rec.diameter() }
    }
}

/// Maximum viewing-direction difference for two cameras to match.
const MAX_VIEW_ANGLE_DEG: f64 = 60.0;

/// Links cameras closer than `covisibility · diameter` whose viewing directions
/// differ by less than 60°, weighted `floor(weight_scale · (1 − d/d_max)) + 1`.
pub fn derive_match_graph(scene: &GroundTruthScene, covisibility: f64, weight_scale: f64) -> WeightedGraph {
    let d_max = covisibility * scene.diameter;
    let cos_limit = MAX_VIEW_ANGLE_DEG.to_radians().cos();
    let dirs: Vec<Vector3<f64>> = scene.cameras.iter().map(CameraPose::viewing_direction).collect();
    let mut g = WeightedGraph::new();
    for c in &scene.cameras {
        g.add_node(c.image_id);
    }
    if d_max.is_nan() || d_max <= 0.0 {
        return g;
    }
    // Bucket centers into cubes of side d_max; linked pairs sit in adjacent cubes.
    let cell = |c: &Vector3<f64>| -> [i64; 3] { [0, 1, 2].map(|a| (c[a] / d_max).floor() as i64) };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, c) in scene.cameras.iter().enumerate() {
        buckets.entry(cell(&c.center)).or_default().push(i);
    }
    for (i, a) in scene.cameras.iter().enumerate() {
        let [x, y, z] = cell(&a.center);
        let mut near: Vec<usize> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = buckets.get(&[x + dx, y + dy, z + dz]) {
                        near.extend(b.iter().copied().filter(|&j| j > i));
                    }
                }
            }
        }
        near.sort_unstable();
        for j in near {
            let b = &scene.cameras[j];
            let d = (a.center - b.center).norm();
            if d >= d_max || dirs[i].dot(&dirs[j]) <= cos_limit {
                continue;
            }
            let w = (weight_scale * (1.0 - d / d_max)).floor() + 1.0;
            g.add_edge(Edge::new(a.image_id, b.image_id, w)).expect("valid match edge");
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Center noise standard deviation per axis, as a fraction of the scene diameter.
    pub sigma_center: f64,
    /// Rotation noise standard deviation in degrees.
    pub sigma_rot_deg: f64,
    /// Fraction of each cluster replaced with random poses.
    pub outlier_fraction: f64,
    /// Gauge scale is drawn log-uniformly from `[1/gauge_scale_range, gauge_scale_range]`.
    pub gauge_scale_range: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma_center: 0.0, sigma_rot_deg: 0.0, outlier_fraction: 0.0, gauge_scale_range: 2.0 }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidNoise(m.into()));
        if !(self.sigma_center.is_finite() && self.sigma_center >= 0.0) {
            return bad("sigma_center must be finite and non-negative");
        }
        if !(self.sigma_rot_deg.is_finite() && self.sigma_rot_deg >= 0.0) {
            return bad("sigma_rot must be finite and non-negative");
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 0.5)");
        }
        if !(self.gauge_scale_range.is_finite() && self.gauge_scale_range >= 1.0) {
            return bad("gauge scale range must be at least 1");
        }
        Ok(())
    }
}

/// Output of the synthetic solver, with the ground truth needed to check it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSolve {
    pub reconstruction: Reconstruction,
    /// Maps ground-truth coordinates into this cluster's frame.
    pub gauge: Similarity,
    /// Cameras replaced by random poses.
    pub corrupted: Vec<ImageId>,
}

/// Stands in for a local SfM run on one cluster.
pub fn solve_cluster_synthetic(
    scene: &GroundTruthScene,
    cluster: &BTreeSet<ImageId>,
    cluster_id: u32,
    noise: &NoiseModel,
    seed: u64,
) -> Result<SyntheticSolve, SceneError> {
    noise.validate()?;
    if cluster.is_empty() {
        return Err(SceneError::EmptyCluster);
    }
    let truth: Vec<CameraPose> = cluster
        .iter()
        .map(|&id| scene.camera(id).copied().ok_or(SceneError::UnknownImage(id)))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = scene.diameter;

    let log_range = noise.gauge_scale_range.ln();
    let scale = if log_range > 0.0 { rng.random_range(-log_range..=log_range).exp() } else { 1.0 };
    let half = 0.5 * d;
    let gauge = Similarity::new(
        scale,
        random_rotation(&mut rng),
        Vector3::new(rng.random_range(-half..=half), rng.random_range(-half..=half), rng.random_range(-half..=half)),
    );

    // Noise is drawn in ground-truth units, so after the gauge it scales with the cluster.
    let center_noise = Normal::new(0.0, noise.sigma_center * d).unwrap();
    let mut cams: Vec<CameraPose> = truth
        .iter()
        .map(|c| {
            let jitter = Vector3::from_fn(|_, _| center_noise.sample(&mut rng));
            let dr = small_rotation(&mut rng, noise.sigma_rot_deg);
            CameraPose { image_id: c.image_id, rotation: dr * c.rotation, center: c.center + jitter }
        })
        .collect();

    let n_bad = (noise.outlier_fraction * cams.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..cams.len()).collect();
    order.shuffle(&mut rng);
    let (lo, hi) =
        truth.iter().fold((truth[0].center, truth[0].center), |(lo, hi), c| (lo.inf(&c.center), hi.sup(&c.center)));
    let mut corrupted = Vec::with_capacity(n_bad);
    for &k in &order[..n_bad] {
        let center = Vector3::from_fn(|i, _| if hi[i] > lo[i] { rng.random_range(lo[i]..hi[i]) } else { lo[i] });
        cams[k] = CameraPose { image_id: cams[k].image_id, rotation: random_rotation(&mut rng), center };
        corrupted.push(cams[k].image_id);
    }
    corrupted.sort_unstable();

    let mut points = Vec::new();
    for p in &scene.points {
        let obs: Vec<ImageId> = p.observations.iter().copied().filter(|id| cluster.contains(id)).collect();
        if obs.is_empty() {
            continue;
        }
        let jitter = Vector3::from_fn(|_, _| center_noise.sample(&mut rng));
        points.push(Point { id: p.id, position: gauge.transform_point(&(p.position + jitter)), observations: obs });
    }

    let cams = cams.iter().map(|c| gauge.transform_pose(c)).collect();
    let reconstruction = Reconstruction::new(Some(cluster_id), cams, points).expect("cluster ids are unique");
    Ok(SyntheticSolve { reconstruction, gauge, corrupted })
}

/// Optional busy time `micros_per_image_sq · m²` for a cluster of `m` images,
/// modelling a local solver whose cost grows superlinearly.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub micros_per_image_sq: f64,
}

impl CostModel {
    pub fn delay(&self, m: usize) -> Duration {
        Duration::from_secs_f64(self.micros_per_image_sq * (m * m) as f64 * 1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Center RMSE after alignment, as a fraction of the scene diameter.
    pub center_rmse: f64,
    pub mean_rotation_error_deg: f64,
    pub max_rotation_error_deg: f64,
    pub recovered: usize,
    pub recovered_fraction: f64,
}

/// Aligns `merged` onto the ground truth with one least-squares similarity
/// and reports residual errors.
pub fn evaluate_against_gt(merged: &Reconstruction, scene: &GroundTruthScene) -> Result<Metrics, SceneError> {
    evaluate_cameras(merged, scene, |_| true)
}

/// As [`evaluate_against_gt`] but restricted to cameras accepted by `keep`.
pub fn evaluate_cameras(
    merged: &Reconstruction,
    scene: &GroundTruthScene,
    keep: impl Fn(ImageId) -> bool,
) -> Result<Metrics, SceneError> {
    let mut pairs = Vec::new();
    for c in merged.cameras().iter().filter(|c| keep(c.image_id)) {
        let gt = scene.camera(c.image_id).ok_or(SceneError::UnknownImage(c.image_id))?;
        pairs.push((c, gt));
    }
    if pairs.len() < 3 {
        return Err(SceneError::TooFewCommon(pairs.len()));
    }
    let src: Vec<_> = pairs.iter().map(|(c, _)| c.center).collect();
    let dst: Vec<_> = pairs.iter().map(|(_, g)| g.center).collect();
    let align = sim3::umeyama(&src, &dst).ok_or(SceneError::TooFewCommon(pairs.len()))?;
    let mut sq = 0.0;
    let mut rot_sum = 0.0;
    let mut rot_max: f64 = 0.0;
    for (c, gt) in &pairs {
        let moved = align.transform_pose(c);
        sq += (moved.center - gt.center).norm_squared();
        let e = model::rotation_angle_deg(&moved.rotation, &gt.rotation);
        rot_sum += e;
        rot_max = rot_max.max(e);
    }
    let n = pairs.len() as f64;
    Ok(Metrics {
        center_rmse: (sq / n).sqrt() / scene.diameter,
        mean_rotation_error_deg: rot_sum / n,
        max_rotation_error_deg: rot_max,
        recovered: pairs.len(),
        recovered_fraction: n / scene.cameras.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orbit_is_on_a_circle() {
        let s = generate_scene(Layout::Orbit, 4, 10, 1).unwrap();
        assert_eq!(s.cameras.len(), 4);
        for c in &s.cameras {
            assert!((c.center.norm() - ORBIT_RADIUS).abs() < 1e-12);
        }
        assert!("spiral".parse::<Layout>().is_err());
        assert_eq!(generate_scene(Layout::Orbit, 1, 0, 0), Err(SceneError::TooFewCameras(1)));
    }

    #[test]
    fn scenes_are_deterministic() {
        for layout in [Layout::Orbit, Layout::Grid, Layout::Street] {
            assert_eq!(generate_scene(layout, 30, 50, 7).unwrap(), generate_scene(layout, 30, 50, 7).unwrap());
        }
    }

    #[test]
    fn grid_rotations_are_proper() {
        let s = generate_scene(Layout::Grid, 100, 10, 2).unwrap();
        assert_eq!(s.cameras.len(), 100);
        for c in &s.cameras {
            let m = c.rotation.to_rotation_matrix();
            assert!((m.matrix().determinant() - 1.0).abs() < 1e-12);
            assert!((m.matrix() * m.matrix().transpose() - nalgebra::Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn match_graph_locality() {
        let s = generate_scene(Layout::Orbit, 36, 0, 0).unwrap();
        let g = derive_match_graph(&s, 0.1, 100.0);
        assert!(g.edge(0, 1).is_some_and(|e| e.weight > 0.0));
        assert!(g.edge(0, 18).is_none());

        // Along a street, weight falls as cameras get farther apart.
        let s = generate_scene(Layout::Street, 40, 0, 3).unwrap();
        let g = derive_match_graph(&s, 0.2, 100.0);
        let d_max = 0.2 * s.diameter;
        let mut last = f64::INFINITY;
        for j in 1..8 {
            if let Some(e) = g.edge(0, j) {
                let d = (s.cameras[0].center - s.cameras[j as usize].center).norm();
                assert_eq!(e.weight, (100.0 * (1.0 - d / d_max)).floor() + 1.0);
                assert!(e.weight <= last);
                last = e.weight;
            }
        }
    }

    #[test]
    fn noiseless_solve_is_exact_gauge() {
        let s = generate_scene(Layout::Orbit, 20, 50, 0).unwrap();
        let cluster: BTreeSet<ImageId> = (0..10).collect();
        let out = solve_cluster_synthetic(&s, &cluster, 0, &NoiseModel::default(), 11).unwrap();
        assert!(out.corrupted.is_empty());
        for c in out.reconstruction.cameras() {
            let expect = out.gauge.transform_pose(s.camera(c.image_id).unwrap());
            assert!((c.center - expect.center).norm() < 1e-9);
            assert!(c.rotation.angle_to(&expect.rotation) < 1e-9);
        }
        assert!(!out.reconstruction.points.is_empty());
    }

    #[test]
    fn outlier_count_is_floored() {
        let s = generate_scene(Layout::Orbit, 20, 0, 0).unwrap();
        let cluster: BTreeSet<ImageId> = (0..10).collect();
        let noise = NoiseModel { outlier_fraction: 0.2, ..Default::default() };
        assert_eq!(solve_cluster_synthetic(&s, &cluster, 0, &noise, 1).unwrap().corrupted.len(), 2);
        let noise = NoiseModel { outlier_fraction: 0.25, ..Default::default() };
        assert_eq!(solve_cluster_synthetic(&s, &(0..7).collect(), 0, &noise, 1).unwrap().corrupted.len(), 1);
        assert_eq!(solve_cluster_synthetic(&s, &BTreeSet::from([99]), 0, &noise, 1), Err(SceneError::UnknownImage(99)));
    }

    #[test]
    fn shared_cameras_recover_gauge_ratio() {
        let s = generate_scene(Layout::Orbit, 40, 0, 5).unwrap();
        let a = solve_cluster_synthetic(&s, &(0..20).collect(), 0, &NoiseModel::default(), 1).unwrap();
        let b = solve_cluster_synthetic(&s, &(12..32).collect(), 1, &NoiseModel::default(), 2).unwrap();
        let corr = sim3::CorrespondenceSet::between(&a.reconstruction, &b.reconstruction);
        let est = sim3::estimate_similarity(&corr, &sim3::RansacParams::default()).unwrap();
        let expect = b.gauge.after(&a.gauge.inverse());
        assert!((est.transform.scale - expect.scale).abs() / expect.scale < 1e-9);
        assert!(est.transform.rotation.angle_to(&expect.rotation) < 1e-9);
        assert!((est.transform.translation - expect.translation).norm() / s.diameter < 1e-9);
    }

    #[test]
    fn evaluation_examples() {
        let s = generate_scene(Layout::Grid, 100, 0, 4).unwrap();
        let gt = s.as_reconstruction();
        let m = evaluate_against_gt(&gt, &s).unwrap();
        assert!(m.center_rmse < 1e-12 && m.mean_rotation_error_deg < 1e-6);
        assert_eq!(m.recovered_fraction, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Similarity::new(3.3, random_rotation(&mut rng), Vector3::new(5.0, -1.0, 2.0));
        let m2 = evaluate_against_gt(&sim3::apply_similarity(&t, &gt), &s).unwrap();
        assert!(m2.center_rmse < 1e-9 && m2.max_rotation_error_deg < 1e-6);

        // One of 100 centers displaced by 0.1·diameter: the direct formula with
        // identity alignment gives sqrt(0.1² / 100) = 0.01; the least-squares
        // alignment can only lower it slightly.
        let mut cams = gt.cameras().to_vec();
        cams[37].center += Vector3::new(0.0, 0.0, 0.1 * s.diameter);
        let m3 = evaluate_against_gt(&Reconstruction::new(None, cams, vec![]).unwrap(), &s).unwrap();
        assert!(m3.center_rmse <= 0.01 + 1e-12 && m3.center_rmse > 0.0098, "{}", m3.center_rmse);

        let few = Reconstruction::new(None, gt.cameras()[..2].to_vec(), vec![]).unwrap();
        assert_eq!(evaluate_against_gt(&few, &s), Err(SceneError::TooFewCommon(2)));
    }
}
