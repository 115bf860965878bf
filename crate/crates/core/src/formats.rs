//! On-disk formats.
//!
//! * match graph: UTF-8 text, one `id_a id_b weight` edge per line, `#` comments
//! * clusters: JSON list of `{cluster_id, images}`
//! * reconstruction / scene: JSON `{cluster_id?, cameras: [{image_id, q: [w,x,y,z], C: [x,y,z]}], points: [{id, xyz, obs}]}`

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{ClusterSet, ImageId};
use crate::graph::{Edge, GraphError, WeightedGraph};
use crate::model::{CameraPose, ModelError, Point, Reconstruction};
use crate::scene::{GroundTruthScene, Layout};

/// Allowed deviation of a stored quaternion from unit norm.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("{0}")]
    Json(String),
}

impl FormatError {
    fn field(path: impl Into<String>, message: impl Into<String>) -> Self {
        FormatError::Field { path: path.into(), message: message.into() }
    }
}

pub fn read_to_string(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(|source| FormatError::Io { path: path.to_owned(), source })
}

pub fn write_string(path: &Path, text: &str) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FormatError::Io { path: dir.to_owned(), source })?;
    }
    fs::write(path, text).map_err(|source| FormatError::Io { path: path.to_owned(), source })
}

fn from_json<T: DeserializeOwned>(text: &str) -> Result<T, FormatError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        FormatError::Json(format!("line {} column {} at {}: {}", inner.line(), inner.column(), path, inner))
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

// ---- match graph ----

pub fn parse_match_graph(text: &str) -> Result<WeightedGraph, FormatError> {
    let mut g = WeightedGraph::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| FormatError::Line { line, message };
        let tokens: Vec<&str> = body.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(err(format!("expected 'id_a id_b weight', got {} fields", tokens.len())));
        }
        let id = |t: &str| t.parse::<ImageId>().map_err(|_| err(format!("invalid image id '{t}'")));
        let a = id(tokens[0])?;
        let b = id(tokens[1])?;
        let w: f64 = tokens[2].parse().map_err(|_| err(format!("invalid weight '{}'", tokens[2])))?;
        g.add_edge(Edge::new(a, b, w)).map_err(|e: GraphError| err(e.to_string()))?;
    }
    Ok(g)
}

pub fn write_match_graph(g: &WeightedGraph) -> String {
    let mut out = String::from("# id_a id_b weight\n");
    for e in g.edges() {
        out.push_str(&format!("{} {} {}\n", e.a, e.b, e.weight));
    }
    out
}

pub fn read_match_graph(path: &Path) -> Result<WeightedGraph, FormatError> {
    parse_match_graph(&read_to_string(path)?)
}

// ---- clusters ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterEntry {
    pub cluster_id: u32,
    pub images: BTreeSet<ImageId>,
}

/// Cluster `i` of the set gets id `i`.
pub fn cluster_entries(cs: &ClusterSet) -> Vec<ClusterEntry> {
    cs.clusters.iter().enumerate().map(|(i, c)| ClusterEntry { cluster_id: i as u32, images: c.clone() }).collect()
}

pub fn parse_clusters(text: &str) -> Result<Vec<ClusterEntry>, FormatError> {
    let entries: Vec<ClusterEntry> = from_json(text)?;
    let mut seen = BTreeSet::new();
    for (i, e) in entries.iter().enumerate() {
        if !seen.insert(e.cluster_id) {
            return Err(FormatError::field(
                format!("[{i}].cluster_id"),
                format!("duplicate cluster id {}", e.cluster_id),
            ));
        }
        if e.images.is_empty() {
            return Err(FormatError::field(format!("[{i}].images"), "cluster has no images"));
        }
    }
    Ok(entries)
}

pub fn write_clusters(entries: &[ClusterEntry]) -> String {
    to_json(&entries)
}

pub fn read_clusters(path: &Path) -> Result<Vec<ClusterEntry>, FormatError> {
    parse_clusters(&read_to_string(path)?)
}

// ---- reconstructions and scenes ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    image_id: ImageId,
    q: [f64; 4],
    #[serde(rename = "C")]
    c: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointRecord {
    id: u64,
    xyz: [f64; 3],
    obs: Vec<ImageId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconstructionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<Layout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    cameras: Vec<CameraRecord>,
    #[serde(default)]
    points: Vec<PointRecord>,
}

fn record(rec: &Reconstruction) -> ReconstructionRecord {
    ReconstructionRecord {
        cluster_id: rec.cluster_id,
        layout: None,
        seed: None,
        cameras: rec
            .cameras()
            .iter()
            .map(|c| CameraRecord {
                image_id: c.image_id,
                q: [c.rotation.w, c.rotation.i, c.rotation.j, c.rotation.k],
                c: c.center.into(),
            })
            .collect(),
        points: rec
            .points
            .iter()
            .map(|p| PointRecord { id: p.id, xyz: p.position.into(), obs: p.observations.clone() })
            .collect(),
    }
}

fn finite(path: String, values: &[f64]) -> Result<(), FormatError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FormatError::field(path, "non-finite value"))
    }
}

fn from_record(r: ReconstructionRecord) -> Result<Reconstruction, FormatError> {
    let mut cameras = Vec::with_capacity(r.cameras.len());
    for (i, c) in r.cameras.iter().enumerate() {
        finite(format!("cameras[{i}].q"), &c.q)?;
        finite(format!("cameras[{i}].C"), &c.c)?;
        let q = Quaternion::new(c.q[0], c.q[1], c.q[2], c.q[3]);
        if (q.norm() - 1.0).abs() > QUATERNION_TOLERANCE {
            return Err(FormatError::field(
                format!("cameras[{i}].q"),
                format!("quaternion norm {} is not 1", q.norm()),
            ));
        }
        cameras.push(CameraPose::new(c.image_id, UnitQuaternion::new_unchecked(q), Vector3::from(c.c)));
    }
    let mut points = Vec::with_capacity(r.points.len());
    for (i, p) in r.points.into_iter().enumerate() {
        finite(format!("points[{i}].xyz"), &p.xyz)?;
        points.push(Point { id: p.id, position: Vector3::from(p.xyz), observations: p.obs });
    }
    Reconstruction::new(r.cluster_id, cameras, points).map_err(|e| match e {
        ModelError::DuplicateImage(id) => FormatError::field("cameras", format!("image {id} listed twice")),
        ModelError::NoCameras => FormatError::field("cameras", "no cameras"),
    })
}

pub fn parse_reconstruction(text: &str) -> Result<Reconstruction, FormatError> {
    from_record(from_json(text)?)
}

pub fn write_reconstruction(rec: &Reconstruction) -> String {
    to_json(&record(rec))
}

pub fn read_reconstruction(path: &Path) -> Result<Reconstruction, FormatError> {
    parse_reconstruction(&read_to_string(path)?)
}

pub fn write_scene(scene: &GroundTruthScene) -> String {
    let mut r = record(&scene.as_reconstruction());
    r.layout = Some(scene.layout);
    r.seed = Some(scene.seed);
    to_json(&r)
}

pub fn parse_scene(text: &str) -> Result<GroundTruthScene, FormatError> {
    let r: ReconstructionRecord = from_json(text)?;
    let layout = r.layout.ok_or_else(|| FormatError::field("layout", "missing"))?;
    let seed = r.seed.unwrap_or(0);
    let rec = from_record(r)?;
    if rec.len() < 2 {
        return Err(FormatError::field("cameras", "a scene needs at least 2 cameras"));
    }
    Ok(GroundTruthScene::from_reconstruction(&rec, layout, seed))
}

pub fn read_scene(path: &Path) -> Result<GroundTruthScene, FormatError> {
    parse_scene(&read_to_string(path)?)
}
