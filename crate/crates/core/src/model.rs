//! Camera poses and reconstructions shared by every stage.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::clustering::ImageId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("image {0} appears twice in one reconstruction")]
    DuplicateImage(ImageId),
    #[error("reconstruction has no cameras")]
    NoCameras,
}

/// A calibrated camera: `rotation` maps world into camera axes, `center` is
/// the camera position in world coordinates. The translation is `-R·C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub image_id: ImageId,
    pub rotation: UnitQuaternion<f64>,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(image_id: ImageId, rotation: UnitQuaternion<f64>, center: Vector3<f64>) -> Self {
        Self { image_id, rotation, center }
    }

    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    /// Unit viewing direction (camera +z axis) in world coordinates.
    pub fn viewing_direction(&self) -> Vector3<f64> {
        self.rotation.inverse() * Vector3::z()
    }

    /// World-to-camera rotation for a camera at `center` looking at `target`.
    pub fn looking_at(image_id: ImageId, center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - center).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        // Rows of the world-to-camera matrix are the camera axes in world coordinates.
        let m = nalgebra::Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
        Self { image_id, rotation, center }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub id: u64,
    pub position: Vector3<f64>,
    pub observations: Vec<ImageId>,
}

/// Cameras (sorted by image id) and optional points in one coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub cluster_id: Option<u32>,
    cameras: Vec<CameraPose>,
    pub points: Vec<Point>,
}

impl Reconstruction {
    pub fn new(cluster_id: Option<u32>, mut cameras: Vec<CameraPose>, points: Vec<Point>) -> Result<Self, ModelError> {
        if cameras.is_empty() {
            return Err(ModelError::NoCameras);
        }
        cameras.sort_by_key(|c| c.image_id);
        if let Some(w) = cameras.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(ModelError::DuplicateImage(w[0].image_id));
        }
        Ok(Self { cluster_id, cameras, points })
    }

    pub fn cameras(&self) -> &[CameraPose] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, id: ImageId) -> Option<&CameraPose> {
        self.cameras.binary_search_by_key(&id, |c| c.image_id).ok().map(|i| &self.cameras[i])
    }

    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.cameras.iter().map(|c| c.image_id).collect()
    }

    pub fn by_id(&self) -> BTreeMap<ImageId, &CameraPose> {
        self.cameras.iter().map(|c| (c.image_id, c)).collect()
    }

    /// Bounding-box diagonal of the camera centers.
    pub fn diameter(&self) -> f64 {
        diameter(self.cameras.iter().map(|c| c.center))
    }

    pub(crate) fn map_cameras(&self, f: impl Fn(&CameraPose) -> CameraPose) -> Self {
        Self { cluster_id: self.cluster_id, cameras: self.cameras.iter().map(f).collect(), points: self.points.clone() }
    }
}

/// Bounding-box diagonal of a point set; 0 for fewer than two points.
pub fn diameter(points: impl IntoIterator<Item = Vector3<f64>>) -> f64 {
    let mut iter = points.into_iter();
    let Some(first) = iter.next() else { return 0.0 };
    let (lo, hi) = iter.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p)));
    (hi - lo).norm()
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle_deg(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.angle_to(b).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_empty() {
        let c = CameraPose::new(3, UnitQuaternion::identity(), Vector3::zeros());
        assert_eq!(Reconstruction::new(None, vec![c, c], vec![]), Err(ModelError::DuplicateImage(3)));
        assert_eq!(Reconstruction::new(None, vec![], vec![]), Err(ModelError::NoCameras));
    }

    #[test]
    fn looking_at_points_camera_at_target() {
        let c = CameraPose::looking_at(0, Vector3::new(5.0, 0.0, 0.0), Vector3::zeros(), Vector3::z());
        assert!((c.viewing_direction() - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        // The target projects onto the optical axis.
        let p = c.rotation * (Vector3::zeros() - c.center);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!((c.rotation.to_rotation_matrix().matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diameter_is_box_diagonal() {
        let d = diameter([Vector3::zeros(), Vector3::new(3.0, 0.0, 0.0), Vector3::new(0.0, 4.0, 0.0)]);
        assert!((d - 5.0).abs() < 1e-15);
        assert_eq!(diameter([Vector3::new(1.0, 2.0, 3.0)]), 0.0);
    }
}
