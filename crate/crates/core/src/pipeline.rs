//! End-to-end run: cluster, solve each cluster (in parallel), merge, evaluate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, ClusterSet, ClusteringParams, ClusteringReport, ImageId};
use crate::formats::{self, ClusterEntry, FormatError};
use crate::graph::WeightedGraph;
use crate::merge::{self, ClusterId, MergeOutcome, MergeParams, PairRejection};
use crate::model::Reconstruction;
use crate::parallel;
use crate::scene::{self, CostModel, GroundTruthScene, Layout, Metrics, NoiseModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(#[from] FormatError),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// 1 for a failed stage, 2 for bad input or configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { .. } => 1,
            _ => 2,
        }
    }

    fn stage(stage: &'static str, e: impl ToString) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolverKind {
    Synthetic,
    /// Shell command template with `{cluster-file}` and `{output-file}`
    /// (also `{cluster-id}` and `{seed}`).
    External(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub clustering: ClusteringParams,
    pub merge: MergeParams,
    pub noise: NoiseModel,
    pub cost: CostModel,
    pub solver: SolverKind,
    pub jobs: usize,
    pub seed: u64,
    /// Ground-truth scene; enables the synthetic solver and evaluation.
    pub scene: Option<PathBuf>,
    /// Match graph; derived from the scene when absent.
    pub match_graph: Option<PathBuf>,
    /// Scene generated when neither file is given.
    pub layout: Layout,
    pub cameras: usize,
    pub points: usize,
    pub covisibility: f64,
    pub weight_scale: f64,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clustering: ClusteringParams::default(),
            merge: MergeParams::default(),
            noise: NoiseModel::default(),
            cost: CostModel::default(),
            solver: SolverKind::Synthetic,
            jobs: 1,
            seed: 0,
            scene: None,
            match_graph: None,
            layout: Layout::Orbit,
            cameras: 200,
            points: 1000,
            covisibility: 0.1,
            weight_scale: 100.0,
            output: PathBuf::from("run"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value '{value}' for {key}"))
}

impl PipelineConfig {
    /// Sets one option. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "max_cluster_size" => self.clustering.max_cluster_size = parse(k, v)?,
            "completeness" => self.clustering.completeness_ratio = parse(k, v)?,
            "max_overlap" => self.clustering.max_overlap = parse(k, v)?,
            "size_slack" => self.clustering.size_slack = parse(k, v)?,
            "max_random_rounds" => self.clustering.max_random_rounds = Some(parse(k, v)?),
            "ransac_threshold" => self.merge.ransac.threshold = parse(k, v)?,
            "ransac_iters" => self.merge.ransac.max_iterations = parse(k, v)?,
            "ransac_confidence" => self.merge.ransac.confidence = parse(k, v)?,
            "ransac_min_inliers" => self.merge.ransac.min_inliers = parse(k, v)?,
            "msd_reject" => self.merge.msd_reject = parse(k, v)?,
            "min_common" => self.merge.min_common = parse(k, v)?,
            "jobs" => self.jobs = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "solver" => match v {
                "synthetic" => self.solver = SolverKind::Synthetic,
                "external" => {
                    if self.solver == SolverKind::Synthetic {
                        self.solver = SolverKind::External(String::new());
                    }
                }
                _ => return Err(format!("unknown solver '{v}' (expected synthetic or external)")),
            },
            "solver_cmd" => self.solver = SolverKind::External(v.to_string()),
            "sigma_center" => self.noise.sigma_center = parse(k, v)?,
            "sigma_rot" => self.noise.sigma_rot_deg = parse(k, v)?,
            "outlier_fraction" => self.noise.outlier_fraction = parse(k, v)?,
            "gauge_scale_range" => self.noise.gauge_scale_range = parse(k, v)?,
            "solver_cost_us" => self.cost.micros_per_image_sq = parse(k, v)?,
            "scene" => self.scene = Some(PathBuf::from(v)),
            "match_graph" => self.match_graph = Some(PathBuf::from(v)),
            "layout" => self.layout = v.parse().map_err(|e: scene::SceneError| e.to_string())?,
            "cameras" => self.cameras = parse(k, v)?,
            "points" => self.points = parse(k, v)?,
            "covisibility" => self.covisibility = parse(k, v)?,
            "weight_scale" => self.weight_scale = parse(k, v)?,
            "output" => self.output = PathBuf::from(v),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |message: String| PipelineError::ConfigLine { line: i + 1, message };
            let (k, v) = body.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            self.set(k, v).map_err(err)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        cfg.apply_text(&formats::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Copies the master seed into the stage parameters and checks ranges.
    pub fn finalize(&mut self) -> Result<(), PipelineError> {
        self.clustering.seed = self.seed;
        self.merge.ransac.seed = self.seed;
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        self.clustering.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.noise.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let r = &self.merge.ransac;
        if !(r.threshold.is_finite() && r.threshold > 0.0) {
            return bad("ransac threshold must be positive".into());
        }
        if r.max_iterations == 0 || !(r.confidence > 0.0 && r.confidence < 1.0) {
            return bad("ransac needs at least one iteration and confidence in (0, 1)".into());
        }
        if !(self.merge.msd_reject.is_finite() && self.merge.msd_reject > 0.0) {
            return bad("msd reject threshold must be positive".into());
        }
        if !(self.cost.micros_per_image_sq.is_finite() && self.cost.micros_per_image_sq >= 0.0) {
            return bad("solver cost must be non-negative".into());
        }
        match &self.solver {
            SolverKind::External(cmd) if !cmd.contains("{output-file}") => {
                return bad("external solver command must contain {output-file}".into());
            }
            SolverKind::Synthetic if self.scene.is_none() && self.match_graph.is_some() => {
                return bad("the synthetic solver needs a ground-truth scene".into());
            }
            _ => {}
        }
        if self.scene.is_none() && self.match_graph.is_none() {
            if self.cameras < 2 {
                return bad("need at least 2 cameras".into());
            }
            if !(self.covisibility > 0.0 && self.weight_scale > 0.0) {
                return bad("covisibility and weight scale must be positive".into());
            }
        }
        Ok(())
    }
}

/// Seed for one cluster's solve, independent of scheduling.
pub fn cluster_seed(seed: u64, cluster: ClusterId) -> u64 {
    let mut x = seed ^ (cluster as u64).wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveJob {
    pub cluster_id: ClusterId,
    pub images: BTreeSet<ImageId>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum Solver<'a> {
    Synthetic { scene: &'a GroundTruthScene, noise: NoiseModel, cost: CostModel },
    External { template: String, work_dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCluster {
    pub cluster_id: ClusterId,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    /// Sorted by cluster id.
    pub solved: Vec<Reconstruction>,
    /// Cameras the synthetic solver replaced with random poses.
    pub corrupted: BTreeMap<ClusterId, Vec<ImageId>>,
    pub failed: Vec<FailedCluster>,
    pub seconds: BTreeMap<ClusterId, f64>,
}

pub fn cluster_file(dir: &Path, k: ClusterId) -> PathBuf {
    dir.join("clusters").join(format!("cluster_{k}.json"))
}

pub fn recon_file(dir: &Path, k: ClusterId) -> PathBuf {
    dir.join("recon").join(format!("recon_{k}.json"))
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

fn solve_external(job: &SolveJob, template: &str, dir: &Path) -> Result<Reconstruction, String> {
    let input = cluster_file(dir, job.cluster_id);
    let output = recon_file(dir, job.cluster_id);
    let entry = ClusterEntry { cluster_id: job.cluster_id, images: job.images.clone() };
    formats::write_string(&input, &formats::write_clusters(&[entry])).map_err(|e| e.to_string())?;
    if let Some(d) = output.parent() {
        std::fs::create_dir_all(d).map_err(|e| e.to_string())?;
    }
    let _ = std::fs::remove_file(&output);
    let cmd = template
        .replace("{cluster-file}", &shell_quote(&input))
        .replace("{output-file}", &shell_quote(&output))
        .replace("{cluster-id}", &job.cluster_id.to_string())
        .replace("{seed}", &job.seed.to_string());
    let out = Command::new("sh").arg("-c").arg(&cmd).output().map_err(|e| format!("cannot run solver: {e}"))?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(format!("solver exited with {}: {}", out.status, stderr.trim()));
    }
    let mut rec = formats::read_reconstruction(&output).map_err(|e| e.to_string())?;
    if let Some(extra) = rec.cameras().iter().find(|c| !job.images.contains(&c.image_id)) {
        return Err(format!("solver returned image {} outside the cluster", extra.image_id));
    }
    match rec.cluster_id {
        Some(k) if k != job.cluster_id => return Err(format!("solver returned cluster id {k}")),
        _ => rec.cluster_id = Some(job.cluster_id),
    }
    Ok(rec)
}

/// Runs every job on at most `workers` threads. A failing job is reported
/// and left out; results are ordered by cluster id.
pub fn dispatch_local_solves(jobs: &[SolveJob], solver: &Solver, workers: usize) -> Dispatch {
    let mut jobs: Vec<&SolveJob> = jobs.iter().collect();
    jobs.sort_by_key(|j| j.cluster_id);
    let results = parallel::map_bounded(&jobs, workers, |job| {
        let start = Instant::now();
        let r = match solver {
            Solver::Synthetic { scene, noise, cost } => {
                std::thread::sleep(cost.delay(job.images.len()));
                scene::solve_cluster_synthetic(scene, &job.images, job.cluster_id, noise, job.seed)
                    .map(|s| (s.reconstruction, s.corrupted))
                    .map_err(|e| e.to_string())
            }
            Solver::External { template, work_dir } => solve_external(job, template, work_dir).map(|r| (r, vec![])),
        };
        (job.cluster_id, r, start.elapsed().as_secs_f64())
    });
    let mut d = Dispatch { solved: vec![], corrupted: BTreeMap::new(), failed: vec![], seconds: BTreeMap::new() };
    for (k, r, secs) in results {
        d.seconds.insert(k, secs);
        match r {
            Ok((rec, bad)) => {
                d.solved.push(rec);
                d.corrupted.insert(k, bad);
            }
            Err(error) => d.failed.push(FailedCluster { cluster_id: k, error }),
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: ClusterId,
    pub size: usize,
    pub completeness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub cluster_id: ClusterId,
    pub cameras: usize,
    pub points: usize,
    pub corrupted: Vec<ImageId>,
}

/// Output of a standalone solve stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solves: Vec<SolveSummary>,
    pub failed: Vec<FailedCluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub k1: ClusterId,
    pub k2: ClusterId,
    pub common: usize,
    pub inliers: usize,
    pub mse_forward: f64,
    pub mse_backward: f64,
    pub msd: f64,
    pub in_minst: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedSummary {
    pub k1: ClusterId,
    pub k2: ClusterId,
    pub common: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub file: String,
    pub cameras: usize,
    pub points: usize,
    pub clusters: Vec<ClusterId>,
    pub anchor: ClusterId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub cluster_id: Option<ClusterId>,
    pub seconds: f64,
}

/// Summary of a run. Wall times are kept out of the JSON (they go to
/// `timings.csv`) so that `report.json` is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub images: usize,
    pub clustering: ClusteringReport,
    pub clusters: Vec<ClusterSummary>,
    pub solves: Vec<SolveSummary>,
    pub failed: Vec<FailedCluster>,
    pub merge_edges: Vec<EdgeSummary>,
    pub rejected_pairs: Vec<RejectedSummary>,
    pub models: Vec<ModelSummary>,
    /// Images of the match graph missing from every merged model.
    pub unmerged_images: Vec<ImageId>,
    /// Largest merged model against ground truth, when available.
    pub metrics: Option<Metrics>,
    #[serde(skip)]
    pub timings: Vec<TimingRow>,
}

impl RunReport {
    pub fn stage_seconds(&self, stage: &str) -> Option<f64> {
        self.timings.iter().find(|t| t.stage == stage && t.cluster_id.is_none()).map(|t| t.seconds)
    }
}

pub fn write_timings(rows: &[TimingRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

pub fn parse_timings(text: &str) -> Result<Vec<TimingRow>, FormatError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| FormatError::Line { line: i + 2, message: e.to_string() }))
        .collect()
}

fn csv_string<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// CSV tables for clusters, merge edges and (if any) timings.
pub fn render_summaries(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# clusters");
    out.push_str(&csv_string(&report.clusters));
    let _ = writeln!(out, "\n# merge edges");
    out.push_str(&csv_string(&report.merge_edges));
    if !report.failed.is_empty() {
        let _ = writeln!(out, "\n# failed clusters");
        out.push_str(&csv_string(&report.failed));
    }
    if let Some(m) = &report.metrics {
        let _ = writeln!(out, "\n# accuracy");
        out.push_str(&csv_string(std::slice::from_ref(m)));
    }
    if !report.timings.is_empty() {
        let _ = writeln!(out, "\n# timings");
        out.push_str(&write_timings(&report.timings));
    }
    out
}

fn rejection_reason(r: &PairRejection) -> String {
    match r {
        PairRejection::TooFewCommon(n) => format!("{n} common cameras"),
        PairRejection::Alignment(e) => e.to_string(),
        PairRejection::FewSharedInliers(n) => format!("{n} inliers in both directions"),
        PairRejection::LargeResidual { msd } => format!("msd {msd} above threshold"),
    }
}

/// Audit record of each merged model: anchor, tree, layers and transforms.
pub fn merge_plan_json(outcome: &MergeOutcome) -> serde_json::Value {
    let models: Vec<serde_json::Value> = outcome
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p = &m.plan;
            let transforms: Vec<serde_json::Value> = p
                .to_anchor
                .iter()
                .map(|(k, t)| {
                    serde_json::json!({
                        "cluster_id": k,
                        "hops": p.hops[k],
                        "scale": t.scale,
                        "q": [t.rotation.w, t.rotation.i, t.rotation.j, t.rotation.k],
                        "t": [t.translation.x, t.translation.y, t.translation.z],
                    })
                })
                .collect();
            let tree: Vec<serde_json::Value> =
                p.tree.edges().iter().map(|e| serde_json::json!({"k1": e.a, "k2": e.b, "msd": e.weight})).collect();
            serde_json::json!({
                "model": i,
                "anchor": p.anchor,
                "clusters": p.clusters,
                "tree": tree,
                "layers": p.layers,
                "to_anchor": transforms,
            })
        })
        .collect();
    serde_json::json!({ "models": models })
}

fn write(path: PathBuf, text: &str) -> Result<(), PipelineError> {
    formats::write_string(&path, text).map_err(|e| PipelineError::stage("write", e))
}

/// Tables describing a merge, as they appear in the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTables {
    pub models: Vec<ModelSummary>,
    pub edges: Vec<EdgeSummary>,
    pub rejected: Vec<RejectedSummary>,
}

/// Writes `merged_<i>.json` per model and `merge_plan.json` under `out`.
pub fn write_merge_outputs(out: &Path, merged: &MergeOutcome) -> Result<MergeTables, PipelineError> {
    let tree_edges: BTreeSet<(ClusterId, ClusterId)> =
        merged.models.iter().flat_map(|m| m.plan.tree.edges().iter().map(|e| (e.a, e.b))).collect();
    let edges = merged
        .graph
        .edges
        .iter()
        .map(|e| EdgeSummary {
            k1: e.k1,
            k2: e.k2,
            common: e.common,
            inliers: e.inliers.len(),
            mse_forward: e.mse_forward,
            mse_backward: e.mse_backward,
            msd: e.weight,
            in_minst: tree_edges.contains(&(e.k1, e.k2)),
        })
        .collect();
    let rejected = merged
        .graph
        .rejected
        .iter()
        .map(|r| RejectedSummary { k1: r.k1, k2: r.k2, common: r.common, reason: rejection_reason(&r.reason) })
        .collect();
    let mut models = Vec::new();
    for (i, m) in merged.models.iter().enumerate() {
        let file = format!("merged_{i}.json");
        write(out.join(&file), &formats::write_reconstruction(&m.reconstruction))?;
        models.push(ModelSummary {
            file,
            cameras: m.reconstruction.len(),
            points: m.reconstruction.points.len(),
            clusters: m.plan.clusters.clone(),
            anchor: m.plan.anchor,
        });
    }
    write(out.join("merge_plan.json"), &formats::to_json(&merge_plan_json(merged)))?;
    Ok(MergeTables { models, edges, rejected })
}

/// Loads or generates the scene and match graph named by the config.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<(WeightedGraph, Option<GroundTruthScene>, bool), PipelineError> {
    let scene = match &cfg.scene {
        Some(p) => Some(formats::read_scene(p)?),
        None if cfg.match_graph.is_none() => Some(
            scene::generate_scene(cfg.layout, cfg.cameras, cfg.points, cfg.seed)
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        ),
        None => None,
    };
    let generated = cfg.scene.is_none() && cfg.match_graph.is_none();
    let graph = match (&cfg.match_graph, &scene) {
        (Some(p), _) => formats::read_match_graph(p)?,
        (None, Some(s)) => scene::derive_match_graph(s, cfg.covisibility, cfg.weight_scale),
        (None, None) => unreachable!("one input is always present"),
    };
    Ok((graph, scene, generated))
}

/// Runs every stage and writes artifacts under `cfg.output`. Artifacts
/// already written are left in place when a later stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let mut cfg = cfg.clone();
    cfg.finalize()?;
    let out = cfg.output.clone();
    let total = Instant::now();
    let mut timings = Vec::new();
    let mut time = |stage: &str, cluster_id: Option<ClusterId>, seconds: f64| {
        timings.push(TimingRow { stage: stage.to_string(), cluster_id, seconds });
    };

    let t = Instant::now();
    let (graph, scene, generated) = load_inputs(&cfg)?;
    if let Some(s) = scene.as_ref().filter(|_| generated) {
        write(out.join("scene.json"), &formats::write_scene(s))?;
    }
    if cfg.match_graph.is_none() {
        write(out.join("match_graph.txt"), &formats::write_match_graph(&graph))?;
    }
    time("load", None, t.elapsed().as_secs_f64());

    let t = Instant::now();
    let clustered =
        clustering::cluster_images(&graph, &cfg.clustering).map_err(|e| PipelineError::stage("cluster", e))?;
    time("cluster", None, t.elapsed().as_secs_f64());
    let cs: &ClusterSet = &clustered.clusters;
    let entries = formats::cluster_entries(cs);
    write(out.join("clusters.json"), &formats::write_clusters(&entries))?;
    for e in &entries {
        write(cluster_file(&out, e.cluster_id), &formats::write_clusters(std::slice::from_ref(e)))?;
    }
    let clusters = (0..cs.len())
        .map(|i| ClusterSummary {
            cluster_id: i as ClusterId,
            size: cs.clusters[i].len(),
            completeness: clustering::completeness(cs, i).unwrap_or(0.0),
        })
        .collect();

    let t = Instant::now();
    let jobs: Vec<SolveJob> = entries
        .iter()
        .map(|e| SolveJob {
            cluster_id: e.cluster_id,
            images: e.images.clone(),
            seed: cluster_seed(cfg.seed, e.cluster_id),
        })
        .collect();
    let solver = match (&cfg.solver, &scene) {
        (SolverKind::Synthetic, Some(s)) => Solver::Synthetic { scene: s, noise: cfg.noise, cost: cfg.cost },
        (SolverKind::Synthetic, None) => {
            return Err(PipelineError::Config("the synthetic solver needs a scene".into()))
        }
        (SolverKind::External(cmd), _) => Solver::External { template: cmd.clone(), work_dir: out.clone() },
    };
    let dispatch = dispatch_local_solves(&jobs, &solver, cfg.jobs);
    time("solve", None, t.elapsed().as_secs_f64());
    for (&k, &s) in &dispatch.seconds {
        time("solve_cluster", Some(k), s);
    }
    for rec in &dispatch.solved {
        let k = rec.cluster_id.expect("solved reconstructions carry their cluster id");
        write(recon_file(&out, k), &formats::write_reconstruction(rec))?;
    }
    let solves = dispatch
        .solved
        .iter()
        .map(|r| {
            let k = r.cluster_id.expect("cluster id");
            SolveSummary {
                cluster_id: k,
                cameras: r.len(),
                points: r.points.len(),
                corrupted: dispatch.corrupted[&k].clone(),
            }
        })
        .collect();

    let mut report = RunReport {
        images: graph.node_count(),
        clustering: clustered.report.clone(),
        clusters,
        solves,
        failed: dispatch.failed.clone(),
        merge_edges: vec![],
        rejected_pairs: vec![],
        models: vec![],
        unmerged_images: vec![],
        metrics: None,
        timings: vec![],
    };
    let write_report = |r: &RunReport| write(out.join("report.json"), &formats::to_json(r));
    if dispatch.solved.is_empty() {
        write_report(&report)?;
        return Err(PipelineError::stage("solve", "every cluster failed"));
    }

    let t = Instant::now();
    let merged = merge::merge_all(&dispatch.solved, &cfg.merge).map_err(|e| PipelineError::stage("merge", e))?;
    time("merge", None, t.elapsed().as_secs_f64());
    let written = write_merge_outputs(&out, &merged)?;
    report.merge_edges = written.edges;
    report.rejected_pairs = written.rejected;
    report.models = written.models;
    let covered: BTreeSet<ImageId> = merged.models.iter().flat_map(|m| m.reconstruction.image_ids()).collect();
    report.unmerged_images = graph.nodes().difference(&covered).copied().collect();

    if let Some(s) = &scene {
        let t = Instant::now();
        let m = scene::evaluate_against_gt(&merged.models[0].reconstruction, s)
            .map_err(|e| PipelineError::stage("evaluate", e))?;
        report.metrics = Some(m);
        time("evaluate", None, t.elapsed().as_secs_f64());
    }
    write_report(&report)?;
    time("total", None, total.elapsed().as_secs_f64());
    report.timings = timings;
    write(out.join("timings.csv"), &write_timings(&report.timings))?;
    Ok(report)
}

/// Reads `report.json` and, if present, `timings.csv` from a run directory.
pub fn read_run_report(dir: &Path) -> Result<RunReport, FormatError> {
    let text = formats::read_to_string(&dir.join("report.json"))?;
    let mut report: RunReport = serde_json::from_str(&text).map_err(|e| FormatError::Json(e.to_string()))?;
    let timings = dir.join("timings.csv");
    if timings.exists() {
        report.timings = parse_timings(&formats::read_to_string(&timings)?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_and_overrides() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text("# run\nmax-cluster-size = 60\ncompleteness=0.5\n\njobs = 4 # inline\nsolver_cmd = ./s {cluster-file} {output-file}\n")
            .unwrap();
        assert_eq!(cfg.clustering.max_cluster_size, 60);
        assert_eq!(cfg.clustering.completeness_ratio, 0.5);
        assert_eq!(cfg.jobs, 4);
        assert!(matches!(cfg.solver, SolverKind::External(_)));
        cfg.set("solver", "synthetic").unwrap();
        assert_eq!(cfg.solver, SolverKind::Synthetic);

        let e = cfg.apply_text("jobs = 2\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, PipelineError::ConfigLine { line: 2, .. }));
        assert_eq!(e.exit_code(), 2);
        assert!(cfg.apply_text("jobs 2").is_err());
        cfg.set("jobs", "0").unwrap();
        assert!(cfg.finalize().is_err());
    }

    #[test]
    fn external_needs_output_placeholder() {
        let mut cfg = PipelineConfig::default();
        cfg.set("solver_cmd", "true").unwrap();
        assert!(cfg.finalize().is_err());
    }

    #[test]
    fn cluster_seeds_differ() {
        let s: BTreeSet<u64> = (0..100).map(|k| cluster_seed(7, k)).collect();
        assert_eq!(s.len(), 100);
        assert_eq!(cluster_seed(7, 3), cluster_seed(7, 3));
    }

    #[test]
    fn timings_round_trip() {
        let rows = vec![
            TimingRow { stage: "cluster".into(), cluster_id: None, seconds: 0.25 },
            TimingRow { stage: "solve_cluster".into(), cluster_id: Some(3), seconds: 1.5 },
        ];
        assert_eq!(parse_timings(&write_timings(&rows)).unwrap(), rows);
    }

    #[test]
    fn four_clusters_four_jobs() {
        let s = scene::generate_scene(Layout::Orbit, 40, 50, 1).unwrap();
        let jobs: Vec<SolveJob> = (0..4u32)
            .map(|k| SolveJob {
                cluster_id: k,
                images: (k * 10..k * 10 + 12).filter(|&i| i < 40).collect(),
                seed: k as u64,
            })
            .rev()
            .collect();
        let solver = Solver::Synthetic { scene: &s, noise: NoiseModel::default(), cost: CostModel::default() };
        let d = dispatch_local_solves(&jobs, &solver, 4);
        assert!(d.failed.is_empty());
        assert_eq!(d.solved.len(), 4);
        for (k, rec) in d.solved.iter().enumerate() {
            let job = jobs.iter().find(|j| j.cluster_id == k as u32).unwrap();
            assert_eq!(rec.cluster_id, Some(k as u32));
            assert_eq!(rec.image_ids(), job.images);
        }
        let serial = dispatch_local_solves(&jobs, &solver, 1);
        assert_eq!((d.solved, d.corrupted), (serial.solved, serial.corrupted));
    }
}
