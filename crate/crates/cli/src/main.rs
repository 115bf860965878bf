use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dnc_sfm::clustering;
use dnc_sfm::formats;
use dnc_sfm::merge;
use dnc_sfm::model::Reconstruction;
use dnc_sfm::pipeline::{self, PipelineConfig, PipelineError, SolveJob, SolveReport, SolveSummary, Solver, SolverKind};
use dnc_sfm::scene::{self, Layout};

/// Divide-and-conquer structure from motion: cluster a match graph, solve
/// clusters independently, merge them back into one model.
#[derive(Parser, Debug)]
#[command(name = "dnc-sfm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a ground-truth scene and its match graph.
    Simulate {
        #[arg(long, default_value = "orbit")]
        layout: Layout,
        #[arg(long, default_value_t = 200)]
        cameras: usize,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Covisibility radius as a fraction of the scene diameter.
        #[arg(long, default_value_t = 0.1)]
        covisibility: f64,
        #[arg(long, default_value_t = 100.0)]
        weight_scale: f64,
        /// Directory for scene.json and match_graph.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a match graph into overlapping clusters.
    Cluster {
        #[arg(long)]
        graph: PathBuf,
        /// Cluster file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Reconstruct every cluster with the configured solver.
    Solve {
        #[arg(long)]
        clusters: PathBuf,
        /// Ground-truth scene, required by the synthetic solver.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Directory for recon/recon_<k>.json and solve.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Merge cluster reconstructions into global models.
    Merge {
        /// Reconstruction files, or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for merged_<i>.json, merge_plan.json and merge.json.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Compare a reconstruction with the ground truth (JSON to stdout).
    Evaluate {
        #[arg(long)]
        scene: PathBuf,
        reconstruction: PathBuf,
    },
    /// Run all stages end to end.
    Pipeline {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        match_graph: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Print CSV summaries of a pipeline run directory.
    Report { dir: PathBuf },
}

#[derive(Args, Debug)]
struct Overrides {
    /// Flat key = value file; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_cluster_size: Option<String>,
    #[arg(long)]
    completeness: Option<String>,
    #[arg(long)]
    max_overlap: Option<String>,
    #[arg(long)]
    ransac_threshold: Option<String>,
    #[arg(long)]
    ransac_iters: Option<String>,
    #[arg(long)]
    msd_reject: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// synthetic or external.
    #[arg(long)]
    solver: Option<String>,
    /// Command template with {cluster-file} and {output-file}.
    #[arg(long)]
    solver_cmd: Option<String>,
    /// Any other config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        let flags = [
            ("max-cluster-size", &self.max_cluster_size),
            ("completeness", &self.completeness),
            ("max-overlap", &self.max_overlap),
            ("ransac-threshold", &self.ransac_threshold),
            ("ransac-iters", &self.ransac_iters),
            ("msd-reject", &self.msd_reject),
            ("jobs", &self.jobs),
            ("seed", &self.seed),
            ("solver", &self.solver),
            ("solver-cmd", &self.solver_cmd),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(|m| PipelineError::Config(format!("--{key}: {m}")))?;
            }
        }
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| PipelineError::Config(format!("--set {kv}: expected KEY=VALUE")))?;
            cfg.set(k, v).map_err(|m| PipelineError::Config(format!("--set {kv}: {m}")))?;
        }
        Ok(cfg)
    }
}

fn stage(stage: &'static str, e: impl ToString) -> PipelineError {
    PipelineError::Stage { stage, message: e.to_string() }
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    formats::write_string(path, text).map_err(|e| stage("write", e))
}

fn simulate(
    layout: Layout,
    cameras: usize,
    points: usize,
    seed: u64,
    covis: f64,
    scale: f64,
    out: &Path,
) -> Result<(), PipelineError> {
    if !(covis > 0.0 && scale > 0.0) {
        return Err(PipelineError::Config("covisibility and weight scale must be positive".into()));
    }
    let s = scene::generate_scene(layout, cameras, points, seed).map_err(|e| PipelineError::Config(e.to_string()))?;
    let g = scene::derive_match_graph(&s, covis, scale);
    write(&out.join("scene.json"), &formats::write_scene(&s))?;
    write(&out.join("match_graph.txt"), &formats::write_match_graph(&g))?;
    println!("{} cameras, {} points, {} edges", s.cameras.len(), s.points.len(), g.edge_count());
    Ok(())
}

fn cluster(graph: &Path, out: &Path, opts: &Overrides) -> Result<(), PipelineError> {
    let mut cfg = opts.config()?;
    cfg.finalize()?;
    let g = formats::read_match_graph(graph)?;
    let outcome = clustering::cluster_images(&g, &cfg.clustering).map_err(|e| stage("cluster", e))?;
    let cs = &outcome.clusters;
    write(out, &formats::write_clusters(&formats::cluster_entries(cs)))?;
    println!("cluster_id,size,completeness");
    for i in 0..cs.len() {
        println!("{i},{},{}", cs.clusters[i].len(), clustering::completeness(cs, i).unwrap_or(0.0));
    }
    if !outcome.report.unsatisfied.is_empty() {
        eprintln!("warning: completeness target not met for clusters {:?}", outcome.report.unsatisfied);
    }
    Ok(())
}

fn solve(clusters: &Path, scene_path: Option<&Path>, out: &Path, opts: &Overrides) -> Result<(), PipelineError> {
    let mut cfg = opts.config()?;
    if scene_path.is_some() {
        cfg.scene = scene_path.map(Path::to_path_buf);
    }
    cfg.finalize()?;
    let entries = formats::read_clusters(clusters)?;
    let gt = cfg.scene.as_deref().map(formats::read_scene).transpose()?;
    let solver = match (&cfg.solver, &gt) {
        (SolverKind::Synthetic, Some(s)) => Solver::Synthetic { scene: s, noise: cfg.noise, cost: cfg.cost },
        (SolverKind::Synthetic, None) => {
            return Err(PipelineError::Config("the synthetic solver needs --scene".into()))
        }
        (SolverKind::External(cmd), _) => Solver::External { template: cmd.clone(), work_dir: out.to_path_buf() },
    };
    let jobs: Vec<SolveJob> = entries
        .iter()
        .map(|e| SolveJob {
            cluster_id: e.cluster_id,
            images: e.images.clone(),
            seed: pipeline::cluster_seed(cfg.seed, e.cluster_id),
        })
        .collect();
    let d = pipeline::dispatch_local_solves(&jobs, &solver, cfg.jobs);
    let mut solves = Vec::new();
    for rec in &d.solved {
        let k = rec.cluster_id.expect("solved reconstructions carry their cluster id");
        write(&pipeline::recon_file(out, k), &formats::write_reconstruction(rec))?;
        let corrupted = d.corrupted.get(&k).cloned().unwrap_or_default();
        solves.push(SolveSummary { cluster_id: k, cameras: rec.len(), points: rec.points.len(), corrupted });
    }
    let summary = SolveReport { solves, failed: d.failed.clone() };
    write(&out.join("solve.json"), &formats::to_json(&summary))?;
    for f in &d.failed {
        eprintln!("cluster {} failed: {}", f.cluster_id, f.error);
    }
    println!("{} of {} clusters solved", d.solved.len(), entries.len());
    if d.solved.is_empty() {
        return Err(stage("solve", "every cluster failed"));
    }
    Ok(())
}

fn reconstruction_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn merge(inputs: &[PathBuf], out: &Path, opts: &Overrides) -> Result<(), PipelineError> {
    let mut cfg = opts.config()?;
    cfg.finalize()?;
    let mut recons: Vec<Reconstruction> = Vec::new();
    for f in reconstruction_files(inputs)? {
        let rec = formats::read_reconstruction(&f)?;
        if rec.cluster_id.is_none() {
            return Err(PipelineError::Config(format!("{}: reconstruction has no cluster_id", f.display())));
        }
        recons.push(rec);
    }
    if recons.is_empty() {
        return Err(PipelineError::Config("no reconstructions to merge".into()));
    }
    recons.sort_by_key(|r| r.cluster_id);
    let merged = merge::merge_all(&recons, &cfg.merge).map_err(|e| stage("merge", e))?;
    let tables = pipeline::write_merge_outputs(out, &merged)?;
    write(&out.join("merge.json"), &formats::to_json(&tables))?;
    for m in &tables.models {
        println!("{}: {} cameras from clusters {:?}, anchor {}", m.file, m.cameras, m.clusters, m.anchor);
    }
    for r in &tables.rejected {
        eprintln!("pair ({}, {}) rejected: {}", r.k1, r.k2, r.reason);
    }
    Ok(())
}

fn evaluate(scene_path: &Path, recon: &Path) -> Result<(), PipelineError> {
    let gt = formats::read_scene(scene_path)?;
    let rec = formats::read_reconstruction(recon)?;
    let m = scene::evaluate_against_gt(&rec, &gt).map_err(|e| stage("evaluate", e))?;
    print!("{}", formats::to_json(&m));
    Ok(())
}

fn run_pipeline(
    scene: Option<PathBuf>,
    graph: Option<PathBuf>,
    out: Option<PathBuf>,
    opts: &Overrides,
) -> Result<(), PipelineError> {
    let mut cfg = opts.config()?;
    if scene.is_some() {
        cfg.scene = scene;
    }
    if graph.is_some() {
        cfg.match_graph = graph;
    }
    if let Some(o) = out {
        cfg.output = o;
    }
    let report = pipeline::run_pipeline(&cfg)?;
    for f in &report.failed {
        eprintln!("cluster {} failed: {}", f.cluster_id, f.error);
    }
    println!(
        "{} images, {} clusters, {} merged models, {} unmerged images",
        report.images,
        report.clusters.len(),
        report.models.len(),
        report.unmerged_images.len()
    );
    if let Some(m) = &report.metrics {
        println!("center rmse {:.6}, mean rotation error {:.4} deg", m.center_rmse, m.mean_rotation_error_deg);
    }
    println!("artifacts in {}", cfg.output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate { layout, cameras, points, seed, covisibility, weight_scale, out } => {
            simulate(layout, cameras, points, seed, covisibility, weight_scale, &out)
        }
        Command::Cluster { graph, out, opts } => cluster(&graph, &out, &opts),
        Command::Solve { clusters, scene, out, opts } => solve(&clusters, scene.as_deref(), &out, &opts),
        Command::Merge { inputs, out, opts } => merge(&inputs, &out, &opts),
        Command::Evaluate { scene, reconstruction } => evaluate(&scene, &reconstruction),
        Command::Pipeline { scene, match_graph, out, opts } => run_pipeline(scene, match_graph, out, &opts),
        Command::Report { dir } => {
            let report = pipeline::read_run_report(&dir)?;
            print!("{}", pipeline::render_summaries(&report));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
