//! Similarity transforms between local reconstructions.
//!
//! Two reconstructions that share cameras differ by one similarity
//! `X₂ = s·R·X₁ + t`. Minimal hypotheses come from two shared cameras (scale
//! from the ratio of their center distances, rotation and translation from the
//! first camera's pose), RANSAC picks the hypothesis with the largest consensus
//! on camera centers, and a closed-form least-squares fit over the consensus
//! set refines it.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ImageId;
use crate::model::{diameter, CameraPose, Reconstruction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("need at least {need} correspondences, have {have}")]
    Insufficient { have: usize, need: usize },
    #[error("coincident camera centers for image pairs {0:?}")]
    Degenerate(Vec<(ImageId, ImageId)>),
    #[error("no consensus: best hypothesis has {best} inliers")]
    NoConsensus { best: usize },
    #[error("correspondence pairs image {0} with image {1}")]
    IdMismatch(ImageId, ImageId),
    #[error("image {0} appears twice in the correspondences")]
    DuplicateImage(ImageId),
}

/// `X₂ = scale · rotation · X₁ + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Similarity {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity {
    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "similarity scale must be positive and finite, got {scale}");
        Self { scale, rotation, translation }
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * first.scale,
            rotation: self.rotation * first.rotation,
            translation: self.scale * (self.rotation * first.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Similarity {
        let inv_rot = self.rotation.inverse();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: inv_rot,
            translation: -(inv_rot * self.translation) / self.scale,
        }
    }

    /// Re-expresses a camera in the target frame.
    pub fn transform_pose(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            image_id: pose.image_id,
            rotation: pose.rotation * self.rotation.inverse(),
            center: self.transform_point(&pose.center),
        }
    }
}

/// Moves every camera and point of `rec` into the target frame of `t`.
pub fn apply_similarity(t: &Similarity, rec: &Reconstruction) -> Reconstruction {
    let mut out = rec.map_cameras(|c| t.transform_pose(c));
    for p in &mut out.points {
        p.position = t.transform_point(&p.position);
    }
    out
}

/// The same cameras seen in two frames, sorted by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pairs: Vec<(CameraPose, CameraPose)>,
}

impl CorrespondenceSet {
    pub fn new(mut pairs: Vec<(CameraPose, CameraPose)>) -> Result<Self, AlignError> {
        if let Some((a, b)) = pairs.iter().find(|(a, b)| a.image_id != b.image_id) {
            return Err(AlignError::IdMismatch(a.image_id, b.image_id));
        }
        pairs.sort_by_key(|(a, _)| a.image_id);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0.image_id == w[1].0.image_id) {
            return Err(AlignError::DuplicateImage(w[0].0.image_id));
        }
        Ok(Self { pairs })
    }

    /// Cameras present in both reconstructions.
    pub fn between(from: &Reconstruction, to: &Reconstruction) -> Self {
        let pairs = from.cameras().iter().filter_map(|a| to.camera(a.image_id).map(|b| (*a, *b))).collect();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(CameraPose, CameraPose)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.pairs.iter().map(|(a, _)| a.image_id).collect()
    }

    pub fn center_pairs(&self) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        self.pairs.iter().map(|(a, b)| (a.center, b.center)).collect()
    }

    pub fn reversed(&self) -> Self {
        Self { pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect() }
    }

    fn frame2_diameter(&self) -> f64 {
        diameter(self.pairs.iter().map(|(_, b)| b.center))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over all camera pairs of `|C₁ᵢ − C₁ⱼ| / |C₂ᵢ − C₂ⱼ|`, the frame-1 to
/// frame-2 distance ratio. A similarity mapping frame 1 into frame 2 has scale
/// equal to the reciprocal.
pub fn relative_scale(corr: &CorrespondenceSet) -> Result<f64, AlignError> {
    let n = corr.len();
    if n < 2 {
        return Err(AlignError::Insufficient { have: n, need: 2 });
    }
    let eps = 1e-12 * corr.frame2_diameter();
    let p = corr.pairs();
    let mut ratios = Vec::with_capacity(n * (n - 1) / 2);
    let mut degenerate = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d2 = (p[i].1.center - p[j].1.center).norm();
            if d2 <= eps {
                degenerate.push((p[i].0.image_id, p[j].0.image_id));
                continue;
            }
            ratios.push((p[i].0.center - p[j].0.center).norm() / d2);
        }
    }
    if !degenerate.is_empty() {
        return Err(AlignError::Degenerate(degenerate));
    }
    Ok(median(&mut ratios))
}

/// Rotation and translation that carry one camera exactly from frame 1 to
/// frame 2 at scale `s`: `R₁₂ = R₂ᵀ·R₁` (world-to-camera storage) and
/// `t₁₂ = C₂ − s·R₁₂·C₁`.
pub fn relative_euclidean(from: &CameraPose, to: &CameraPose, s: f64) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let r12 = to.rotation.inverse() * from.rotation;
    let t12 = to.center - s * (r12 * from.center);
    (r12, t12)
}

/// Closed-form least-squares similarity `dst ≈ s·R·src + t` (Umeyama).
/// `None` for fewer than two points or a zero-spread source.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Similarity> {
    let n = src.len();
    if n < 2 || n != dst.len() {
        return None;
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (ds, dd) = (s - mu_s, d - mu_d);
        cov += dd * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;
    if var_s <= f64::EPSILON * mu_s.norm_squared().max(1e-300) {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * sign[(i, i)]).sum();
    let scale = trace / var_s;
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_d - scale * (rotation * mu_s);
    Some(Similarity { scale, rotation, translation })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier threshold as a fraction of the frame-2 center bounding diameter.
    pub threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { threshold: 0.01, max_iterations: 1000, confidence: 0.999, min_inliers: 3, seed: 0 }
    }
}

impl RansacParams {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityEstimate {
    pub transform: Similarity,
    pub inliers: Vec<ImageId>,
    /// False when the least-squares refit was rejected and the best minimal
    /// hypothesis was kept.
    pub refined: bool,
}

/// Hypothesis from correspondences `i` (rotation/translation) and `j` (scale).
fn minimal_hypothesis(p: &[(CameraPose, CameraPose)], i: usize, j: usize) -> Option<Similarity> {
    let d1 = (p[i].0.center - p[j].0.center).norm();
    let d2 = (p[i].1.center - p[j].1.center).norm();
    if d1 <= f64::MIN_POSITIVE || d2 <= f64::MIN_POSITIVE {
        return None;
    }
    let s = d2 / d1;
    if !(s.is_finite() && s > 0.0) {
        return None;
    }
    let (rotation, translation) = relative_euclidean(&p[i].0, &p[i].1, s);
    Some(Similarity { scale: s, rotation, translation })
}

/// Indices within `tol` and the summed residual over them.
fn consensus(t: &Similarity, p: &[(CameraPose, CameraPose)], tol: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut cost = 0.0;
    for (k, (a, b)) in p.iter().enumerate() {
        let r = (t.transform_point(&a.center) - b.center).norm();
        if r <= tol {
            inliers.push(k);
            cost += r;
        }
    }
    (inliers, cost)
}

/// Chordal L2 mean: the rotation nearest (Frobenius) to the summed matrices.
pub fn mean_rotation(rotations: &[UnitQuaternion<f64>]) -> Option<UnitQuaternion<f64>> {
    if rotations.is_empty() {
        return None;
    }
    let sum: Matrix3<f64> = rotations.iter().map(|q| q.to_rotation_matrix().into_inner()).sum();
    let svd = sum.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    Some(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(u * sign * v_t)))
}

/// Per-camera rotation minimizing the summed angle to all others.
fn medoid_rotation(rotations: &[UnitQuaternion<f64>]) -> Option<UnitQuaternion<f64>> {
    let cost = |r: &UnitQuaternion<f64>| rotations.iter().map(|o| r.angle_to(o)).sum::<f64>();
    rotations.iter().min_by(|a, b| cost(a).total_cmp(&cost(b))).copied()
}

/// Cameras whose relative rotation strays further than this from the medoid
/// are left out of the refit.
const REFIT_ROTATION_TOLERANCE_DEG: f64 = 5.0;

/// Least-squares refit over the inliers. Rotation is the chordal mean of the
/// per-camera relative rotations near their medoid (centers alone are
/// ill-conditioned on short, nearly collinear overlaps); scale and
/// translation then fit the same cameras' centers.
fn try_refit(p: &[(CameraPose, CameraPose)], inliers: &[usize]) -> Option<Similarity> {
    let per_camera: Vec<_> = inliers.iter().map(|&k| relative_euclidean(&p[k].0, &p[k].1, 1.0).0).collect();
    let medoid = medoid_rotation(&per_camera)?;
    let tol = REFIT_ROTATION_TOLERANCE_DEG.to_radians();
    let keep: Vec<usize> = (0..inliers.len()).filter(|&i| per_camera[i].angle_to(&medoid) <= tol).collect();
    if keep.len() < 2 {
        return None;
    }
    let rotation = mean_rotation(&keep.iter().map(|&i| per_camera[i]).collect::<Vec<_>>())?;
    let used: Vec<usize> = keep.iter().map(|&i| inliers[i]).collect();
    let inv_n = 1.0 / used.len() as f64;
    let mu_s = used.iter().map(|&k| p[k].0.center).sum::<Vector3<f64>>() * inv_n;
    let mu_d = used.iter().map(|&k| p[k].1.center).sum::<Vector3<f64>>() * inv_n;
    let (mut num, mut den) = (0.0, 0.0);
    for &k in &used {
        let x = rotation * (p[k].0.center - mu_s);
        num += (p[k].1.center - mu_d).dot(&x);
        den += x.norm_squared();
    }
    let scale = num / den;
    if !(scale.is_finite() && scale > 0.0) {
        return None;
    }
    Some(Similarity { scale, rotation, translation: mu_d - scale * (rotation * mu_s) })
}

/// RANSAC similarity from shared cameras; the threshold is relative to the
/// frame-2 diameter of the correspondence set.
pub fn estimate_similarity(corr: &CorrespondenceSet, params: &RansacParams) -> Result<SimilarityEstimate, AlignError> {
    estimate_similarity_scaled(corr, params, corr.frame2_diameter())
}

/// As [`estimate_similarity`] with an explicit reference length for the
/// inlier threshold (e.g. the diameter of the whole frame-2 reconstruction).
pub fn estimate_similarity_scaled(
    corr: &CorrespondenceSet,
    params: &RansacParams,
    reference_length: f64,
) -> Result<SimilarityEstimate, AlignError> {
    let min = params.min_inliers.max(3);
    let n = corr.len();
    if n < min {
        return Err(AlignError::Insufficient { have: n, need: min });
    }
    let p = corr.pairs();
    let tol = params.threshold * reference_length;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut best: Option<(Vec<usize>, f64, Similarity)> = None;
    let mut budget = params.max_iterations.max(1);
    let mut iter = 0;
    while iter < budget {
        iter += 1;
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let Some(h) = minimal_hypothesis(p, i, j) else { continue };
        let (inliers, cost) = consensus(&h, p, tol);
        let better = match &best {
            None => true,
            Some((bi, bc, _)) => inliers.len() > bi.len() || (inliers.len() == bi.len() && cost < *bc),
        };
        if better {
            let w = inliers.len() as f64 / n as f64;
            best = Some((inliers, cost, h));
            let miss = 1.0 - w * w;
            if miss <= 0.0 {
                budget = iter;
            } else {
                let needed = ((1.0 - params.confidence).ln() / miss.ln()).ceil();
                if needed.is_finite() && needed >= 0.0 {
                    budget = budget.min((needed as usize).max(iter));
                }
            }
        }
    }
    let (inliers, _, hypothesis) = best.ok_or(AlignError::NoConsensus { best: 0 })?;
    if inliers.len() < min {
        return Err(AlignError::NoConsensus { best: inliers.len() });
    }

    let mut current = inliers;
    let mut transform = hypothesis;
    let mut refined = false;
    for _ in 0..3 {
        let Some(fit) = try_refit(p, &current) else { break };
        let (next, _) = consensus(&fit, p, tol);
        if next.len() < min {
            break;
        }
        transform = fit;
        refined = true;
        if next == current {
            break;
        }
        current = next;
    }
    if refined {
        current = consensus(&transform, p, tol).0;
    }
    Ok(SimilarityEstimate { transform, inliers: current.iter().map(|&k| p[k].0.image_id).collect(), refined })
}

/// `(1/2n) · sqrt(Σ |T·Xᵢ − X'ᵢ|²)` over point pairs `(Xᵢ, X'ᵢ)`.
pub fn mse(t: &Similarity, pairs: &[(Vector3<f64>, Vector3<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs.iter().map(|(a, b)| (t.transform_point(a) - b).norm_squared()).sum();
    sum.sqrt() / (2.0 * pairs.len() as f64)
}

/// Symmetric residual: the larger of the two directed errors.
pub fn msd(mse_12: f64, mse_21: f64) -> f64 {
    mse_12.max(mse_21)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Unit;
    use rand_distr::{Distribution, UnitSphere};

    fn pose(id: ImageId, rotation: UnitQuaternion<f64>, c: [f64; 3]) -> CameraPose {
        CameraPose::new(id, rotation, Vector3::from(c))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        let axis: [f64; 3] = UnitSphere.sample(rng);
        UnitQuaternion::from_axis_angle(
            &Unit::new_normalize(Vector3::from(axis)),
            rng.random_range(0.0..std::f64::consts::PI),
        )
    }

    fn random_cameras(rng: &mut ChaCha8Rng, n: usize) -> Vec<CameraPose> {
        (0..n as ImageId)
            .map(|i| {
                let c = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
                pose(i, random_rotation(rng), c)
            })
            .collect()
    }

    fn mapped(t: &Similarity, cams: &[CameraPose]) -> CorrespondenceSet {
        CorrespondenceSet::new(cams.iter().map(|c| (*c, t.transform_pose(c))).collect()).unwrap()
    }

    fn rel_err(a: &Similarity, b: &Similarity, diam: f64) -> (f64, f64, f64) {
        (
            (a.scale - b.scale).abs() / b.scale,
            (a.rotation.to_rotation_matrix().matrix() - b.rotation.to_rotation_matrix().matrix()).norm(),
            (a.translation - b.translation).norm() / diam,
        )
    }

    #[test]
    fn compose_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Similarity::new(2.5, random_rotation(&mut rng), Vector3::new(1.0, -2.0, 0.5));
        let u = Similarity::new(0.3, random_rotation(&mut rng), Vector3::new(-4.0, 0.0, 3.0));
        let x = Vector3::new(0.7, 0.1, -1.3);
        assert!((t.after(&t.inverse()).transform_point(&x) - x).norm() < 1e-12);
        assert!((t.inverse().after(&t).transform_point(&x) - x).norm() < 1e-12);
        assert!((t.after(&u).transform_point(&x) - t.transform_point(&u.transform_point(&x))).norm() < 1e-12);
        let id = t.after(&t.inverse());
        assert!((id.scale - 1.0).abs() < 1e-12 && id.rotation.angle() < 1e-9 && id.translation.norm() < 1e-12);
    }

    #[test]
    fn scale_examples() {
        let cams = [
            pose(0, UnitQuaternion::identity(), [0.0, 0.0, 0.0]),
            pose(1, UnitQuaternion::identity(), [1.0, 2.0, 0.0]),
        ];
        let same = CorrespondenceSet::new(cams.iter().map(|c| (*c, *c)).collect()).unwrap();
        assert_eq!(relative_scale(&same).unwrap(), 1.0);

        let half = Similarity::new(0.5, UnitQuaternion::identity(), Vector3::new(3.0, 0.0, 0.0));
        let corr = mapped(&half, &cams);
        assert_eq!(relative_scale(&corr).unwrap(), 2.0);
    }

    #[test]
    fn scale_median_survives_one_corrupted_camera() {
        // Frame 1 centers are exactly twice frame 2 centers, except camera 4.
        let f2 = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let mut pairs: Vec<_> = f2
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let c2: Vector3<f64> = Vector3::from(*c);
                (
                    pose(i as ImageId, UnitQuaternion::identity(), (2.0 * c2).into()),
                    pose(i as ImageId, UnitQuaternion::identity(), *c),
                )
            })
            .collect();
        pairs[4].0.center = Vector3::new(40.0, -7.0, 3.0);
        let corr = CorrespondenceSet::new(pairs).unwrap();
        // Oracle: all C(5,2) ratios by enumeration.
        let p = corr.pairs();
        let mut ratios = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                ratios.push((p[i].0.center - p[j].0.center).norm() / (p[i].1.center - p[j].1.center).norm());
            }
        }
        assert_eq!(ratios.iter().filter(|&&r| (r - 2.0).abs() < 1e-15).count(), 6);
        assert_eq!(relative_scale(&corr).unwrap(), 2.0);
    }

    #[test]
    fn scale_rejects_coincident_centers() {
        let a = pose(0, UnitQuaternion::identity(), [0.0, 0.0, 0.0]);
        let b = pose(1, UnitQuaternion::identity(), [1.0, 0.0, 0.0]);
        let corr = CorrespondenceSet::new(vec![(a, a), (b, CameraPose { center: a.center, ..b })]).unwrap();
        assert!(matches!(relative_scale(&corr), Err(AlignError::Degenerate(p)) if p == vec![(0, 1)]));
        assert!(matches!(
            relative_scale(&CorrespondenceSet::new(vec![(a, a)]).unwrap()),
            Err(AlignError::Insufficient { .. })
        ));
    }

    #[test]
    fn correspondence_validation() {
        let a = pose(0, UnitQuaternion::identity(), [0.0; 3]);
        let b = pose(1, UnitQuaternion::identity(), [0.0; 3]);
        assert_eq!(CorrespondenceSet::new(vec![(a, b)]), Err(AlignError::IdMismatch(0, 1)));
        assert_eq!(CorrespondenceSet::new(vec![(a, a), (a, a)]), Err(AlignError::DuplicateImage(0)));
    }

    #[test]
    fn euclidean_examples() {
        let id = UnitQuaternion::identity();
        let (r, t) = relative_euclidean(&pose(0, id, [1.0, 2.0, 3.0]), &pose(0, id, [1.0, 2.0, 3.0]), 1.0);
        assert!(r.angle() < 1e-15 && t.norm() < 1e-15);

        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let (r, _) = relative_euclidean(&pose(0, id, [0.0; 3]), &pose(0, rz, [0.0; 3]), 1.0);
        // World-to-camera storage: the frame rotation is the inverse camera rotation.
        assert!(r.angle_to(&rz.inverse()) < 1e-15);

        let (r, t) = relative_euclidean(&pose(0, id, [1.0, 0.0, 0.0]), &pose(0, id, [0.0, 1.0, 0.0]), 2.0);
        assert!(r.angle() < 1e-15);
        assert_eq!(t, Vector3::new(-2.0, 1.0, 0.0));
    }

    #[test]
    fn euclidean_result_maps_pose_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cams = random_cameras(&mut rng, 2);
        let (r, t) = relative_euclidean(&cams[0], &cams[1], 1.7);
        let moved = Similarity::new(1.7, r, t).transform_pose(&CameraPose { image_id: 1, ..cams[0] });
        assert!((moved.center - cams[1].center).norm() < 1e-12);
        assert!(moved.rotation.angle_to(&cams[1].rotation) < 1e-9);
    }

    #[test]
    fn recovers_noiseless_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cams = random_cameras(&mut rng, 10);
        let truth = Similarity::new(3.7, random_rotation(&mut rng), Vector3::new(4.0, -1.0, 9.0));
        let est = estimate_similarity(&mapped(&truth, &cams), &RansacParams::default()).unwrap();
        let diam = diameter(cams.iter().map(|c| truth.transform_point(&c.center)));
        let (es, er, et) = rel_err(&est.transform, &truth, diam);
        assert!(es < 1e-9 && er < 1e-9 && et < 1e-9, "{es} {er} {et}");
        assert_eq!(est.inliers.len(), 10);
    }

    #[test]
    fn identity_related_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cams = random_cameras(&mut rng, 6);
        let est = estimate_similarity(&mapped(&Similarity::identity(), &cams), &RansacParams::default()).unwrap();
        let (es, er, et) = rel_err(&est.transform, &Similarity::identity(), 1.0);
        assert!(es < 1e-12 && er < 1e-12 && et < 1e-12);
        assert_eq!(est.inliers, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_too_few_and_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cams = random_cameras(&mut rng, 2);
        let corr = mapped(&Similarity::identity(), &cams);
        assert_eq!(
            estimate_similarity(&corr, &RansacParams::default()),
            Err(AlignError::Insufficient { have: 2, need: 3 })
        );
        // Three cameras with unrelated frames: no hypothesis explains three.
        let a = random_cameras(&mut rng, 3);
        let b = random_cameras(&mut rng, 3);
        let corr = CorrespondenceSet::new(a.into_iter().zip(b).collect()).unwrap();
        assert!(matches!(estimate_similarity(&corr, &RansacParams::default()), Err(AlignError::NoConsensus { .. })));
    }

    #[test]
    fn ransac_ignores_replaced_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cams = random_cameras(&mut rng, 10);
        let truth = Similarity::new(0.6, random_rotation(&mut rng), Vector3::new(1.0, 2.0, 3.0));
        let mut pairs: Vec<_> = cams.iter().map(|c| (*c, truth.transform_pose(c))).collect();
        for k in [2, 5, 8] {
            pairs[k].1.center = Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
        }
        let corr = CorrespondenceSet::new(pairs).unwrap();
        let params = RansacParams::default();
        let est = estimate_similarity(&corr, &params).unwrap();

        // Oracle: sweep every ordered minimal sample, keep the maximum consensus.
        let p = corr.pairs();
        let tol = params.threshold * corr.frame2_diameter();
        let mut best = 0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                if i != j {
                    if let Some(h) = minimal_hypothesis(p, i, j) {
                        best = best.max(consensus(&h, p, tol).0.len());
                    }
                }
            }
        }
        assert_eq!(best, 7);
        assert_eq!(est.inliers, vec![0, 1, 3, 4, 6, 7, 9]);
        let diam = corr.frame2_diameter();
        let (es, er, et) = rel_err(&est.transform, &truth, diam);
        assert!(es < 1e-6 && er < 1e-6 && et < 1e-6);
    }

    #[test]
    fn apply_similarity_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rec = Reconstruction::new(
            Some(0),
            random_cameras(&mut rng, 5),
            vec![crate::model::Point { id: 1, position: Vector3::new(1.0, 1.0, 1.0), observations: vec![0, 1] }],
        )
        .unwrap();
        assert_eq!(apply_similarity(&Similarity::identity(), &rec), rec);

        let t = Similarity::new(1.9, random_rotation(&mut rng), Vector3::new(0.5, 0.0, -2.0));
        let back = apply_similarity(&t.inverse(), &apply_similarity(&t, &rec));
        for (a, b) in back.cameras().iter().zip(rec.cameras()) {
            assert_eq!(a.image_id, b.image_id);
            assert!((a.center - b.center).norm() < 1e-9);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
        }
        assert!((back.points[0].position - rec.points[0].position).norm() < 1e-9);

        let doubled = apply_similarity(&Similarity::new(2.0, UnitQuaternion::identity(), Vector3::zeros()), &rec);
        let (c, d) = (rec.cameras(), doubled.cameras());
        for i in 0..5 {
            for j in i + 1..5 {
                let r = (d[i].center - d[j].center).norm() / (c[i].center - c[j].center).norm();
                assert!((r - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_and_msd_examples() {
        let id = Similarity::identity();
        let z = Vector3::<f64>::zeros();
        assert_eq!(mse(&id, &[(z, z), (Vector3::x(), Vector3::x())]), 0.0);
        // Residual norms 3 and 4: (1/4)·sqrt(25).
        assert_eq!(mse(&id, &[(z, Vector3::new(3.0, 0.0, 0.0)), (z, Vector3::new(0.0, 4.0, 0.0))]), 1.25);
        assert_eq!(mse(&id, &[(z, Vector3::new(0.0, 0.0, 0.8))]), 0.4);
        assert_eq!(msd(1.25, 0.8), 1.25);
        assert_eq!(msd(0.0, 0.0), 0.0);
        assert_eq!(msd(0.3, 0.9), msd(0.9, 0.3));
    }
}
