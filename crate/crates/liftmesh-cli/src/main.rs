//! Command-line front-end: lifting, mesh recovery, evaluation, training,
//! synthetic data, benchmarking and COCO conversion.
//!
//! Machine-readable JSON goes to stdout; all diagnostics go to stderr.
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use clap::{Parser, Subcommand};
use liftmesh::body_model::{desk_model, BodyModel};
use liftmesh::error::Error;
use liftmesh::io::config::Config;
use liftmesh::io::pose_file::{self, PoseRecord};
use liftmesh::io::{atomic_write, obj};
use liftmesh::lifter::lifter_forward;
use liftmesh::metrics;
use liftmesh::pse::{full_pipeline, PipelineParams};
use liftmesh::rng::Rng;
use liftmesh::skeleton::{build_adjacency, map_coco_to_h36m, H36M17};
use liftmesh::tensor::Tensor;
use liftmesh::training::{self, make_synth_dataset, train_loop};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "liftmesh",
    about = "2D-pose-to-human-mesh pipeline: lifting, mesh recovery, metrics, training",
    version
)]
struct Cli {
    /// Config file (key = value); required by `train`, optional elsewhere
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lift a 2D pose stream to 3D joints, shape and camera (JSON lines)
    Lift {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline and write mesh results (plus optional OBJ files)
    Mesh {
        #[arg(long)]
        ckpt: PathBuf,
        /// Body asset; the checkpoint's desk body is generated when omitted
        #[arg(long)]
        body: Option<PathBuf>,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write one OBJ file per pose
        #[arg(long)]
        obj: bool,
    },
    /// Compare predictions against ground truth (MPJPE / PA-MPJPE / MPVE)
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mesh_pred: Option<PathBuf>,
        #[arg(long)]
        mesh_gt: Option<PathBuf>,
    },
    /// Train on synthetic data and write a checkpoint plus a loss CSV
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Override the config mode: lifter-only | pse-only | end-to-end
        #[arg(long)]
        mode: Option<String>,
    },
    /// Emit a synthetic dataset as a pose file
    Synth {
        #[arg(long)]
        n: usize,
        /// Body asset; the config's desk body is generated when omitted
        #[arg(long)]
        body: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the exact parameter count and forward latency
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        /// Forward passes to time (at least 100)
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Omit timing fields for byte-identical output
        #[arg(long)]
        no_timing: bool,
    },
    /// Convert COCO keypoints JSON to the native pose format (h36m17 layout)
    ConvertCoco {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and save the deterministic desk body asset
    MakeBody {
        #[arg(long)]
        out: PathBuf,
        /// Vertex count (default from config)
        #[arg(long)]
        vertices: Option<usize>,
    },
}

enum CliError {
    /// Command-line misuse (exit 1), distinct from data errors (exit 2).
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Usage(_) => 1,
        CliError::Lib(Error::Numerical(_)) | CliError::Lib(Error::Alignment(_)) => 3,
        CliError::Lib(_) => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are successful exits
            let code = if e.use_stderr() { 1 } else { 0 };
            eprint!("{e}");
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Lib(err) => eprintln!("error: {err}"),
            }
            std::process::exit(exit_code(&e));
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

/// Worker cap: LIFTMESH_THREADS, else the machine's parallelism.
fn thread_cap() -> Result<usize, Error> {
    match std::env::var("LIFTMESH_THREADS") {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Config(format!("LIFTMESH_THREADS must be a positive integer, got '{v}'"))
            }),
    }
}

/// Order-preserving parallel map.
fn par_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<Result<R, Error>>
where
    T: Send + Sync,
    R: Send,
    F: Fn(&T) -> Result<R, Error> + Sync,
{
    let n = items.len();
    let threads = threads.clamp(1, n.max(1));
    if threads <= 1 || n <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut results: Vec<Option<Result<R, Error>>> = Vec::with_capacity(n);
    results.resize_with(n, || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results.into_iter().map(|r| r.expect("all slots filled")).collect()
}

fn load_body(params: &PipelineParams, body_path: &Option<PathBuf>) -> Result<BodyModel, Error> {
    match body_path {
        Some(p) => BodyModel::load(p),
        None => desk_model(params.cfg.body_vertices, params.cfg.body_seed),
    }
}

fn read_poses_checked(path: &Path, params: &PipelineParams) -> Result<Vec<PoseRecord>, Error> {
    let records = pose_file::read_pose_file(path, Some(params.cfg.joint_count()))?;
    for r in &records {
        if r.topology != params.cfg.topology.name {
            return Err(Error::Ingestion(format!(
                "pose '{}' uses topology '{}' but the checkpoint expects '{}'",
                r.id, r.topology, params.cfg.topology.name
            )));
        }
    }
    Ok(records)
}

#[derive(Serialize)]
struct LiftLine {
    id: String,
    joints3d: Vec<[f64; 3]>,
    beta: Vec<f64>,
    camera: [f64; 3],
    features: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MeshLine {
    id: String,
    vertices: Vec<[f64; 3]>,
    joints: Vec<[f64; 3]>,
    theta: Vec<f64>,
    beta: Vec<f64>,
    camera: [f64; 3],
    joints3d: Vec<[f64; 3]>,
}

fn rows2(t: &Tensor) -> Vec<[f64; 2]> {
    (0..t.rows()).map(|r| [t.get2(r, 0), t.get2(r, 1)]).collect()
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    pose_file::tensor_to_rows3(t)
}

fn cam3(t: &Tensor) -> [f64; 3] {
    [t.data()[0], t.data()[1], t.data()[2]]
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Lift { ckpt, poses, out } => {
            let params = PipelineParams::load(ckpt)?;
            let records = read_poses_checked(poses, &params)?;
            let adjacency = build_adjacency(&params.cfg.topology)?;
            let mut buf = String::new();
            for rec in &records {
                let pose = rec.to_pose2d()?;
                let o = lifter_forward(&params.lifter, &adjacency, &pose)?;
                let line = LiftLine {
                    id: rec.id.clone(),
                    joints3d: rows3(&o.joints3d),
                    beta: o.beta.data().to_vec(),
                    camera: cam3(&o.camera),
                    features: (0..o.features.rows())
                        .map(|r| o.features.row_slice(r).to_vec())
                        .collect(),
                };
                buf.push_str(&serde_json::to_string(&line).expect("serializable"));
                buf.push('\n');
            }
            match out {
                Some(path) => atomic_write(path, buf.as_bytes())?,
                None => print!("{buf}"),
            }
            eprintln!("lifted {} poses", records.len());
            Ok(())
        }

        Cmd::Mesh { ckpt, body, poses, out_dir, obj: want_obj } => {
            let params = PipelineParams::load(ckpt)?;
            let body = load_body(&params, body)?;
            let records = read_poses_checked(poses, &params)?;
            std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

            let threads = thread_cap()?;
            let outputs = par_map(records, threads, |rec| {
                let pose = rec.to_pose2d()?;
                let res = full_pipeline(&params, &body, &pose)?;
                let line = MeshLine {
                    id: rec.id.clone(),
                    vertices: rows3(&res.vertices),
                    joints: rows3(&res.joints),
                    theta: res.theta.data().to_vec(),
                    beta: res.beta.data().to_vec(),
                    camera: cam3(res.camera.as_ref().expect("pipeline sets camera")),
                    joints3d: rows3(res.joints3d.as_ref().expect("pipeline sets joints3d")),
                };
                let obj_text = if *want_obj {
                    Some(obj::obj_string(&res.vertices, body.faces.as_deref())?)
                } else {
                    None
                };
                Ok((line, obj_text))
            });

            let mut buf = String::new();
            let mut count = 0;
            for out in outputs {
                let (line, obj_text) = out?;
                if let Ok(theta) = liftmesh::body_model::PoseTheta::new(
                    Tensor::new(vec![24, 3], line.theta.clone()).expect("72 values"),
                ) {
                    let big = theta.large_rotation_rows();
                    if !big.is_empty() {
                        eprintln!(
                            "warning: pose '{}' has rotations beyond 2π at joints {big:?}",
                            line.id
                        );
                    }
                }
                if let Some(text) = obj_text {
                    let path = out_dir.join(format!("{}.obj", line.id));
                    atomic_write(&path, text.as_bytes())?;
                }
                buf.push_str(&serde_json::to_string(&line).expect("serializable"));
                buf.push('\n');
                count += 1;
            }
            let path = out_dir.join("meshes.jsonl");
            atomic_write(&path, buf.as_bytes())?;
            println!(
                "{}",
                serde_json::json!({"meshes": count, "path": path.display().to_string()})
            );
            eprintln!("wrote {count} meshes to {}", out_dir.display());
            Ok(())
        }

        Cmd::Eval { pred, gt, mesh_pred, mesh_gt } => {
            let preds = read_joint_sets(pred)?;
            let gts = read_gt_sets(gt)?;
            if preds.len() != gts.len() {
                return Err(Error::Ingestion(format!(
                    "pred has {} samples, gt has {}",
                    preds.len(),
                    gts.len()
                ))
                .into());
            }
            let mesh_pairs = match (mesh_pred, mesh_gt) {
                (None, None) => None,
                (Some(mp), Some(mg)) => Some((read_vertex_sets(mp)?, read_vertex_sets(mg)?)),
                _ => {
                    return Err(CliError::Usage(
                        "--mesh-pred and --mesh-gt must be given together".into(),
                    ))
                }
            };
            let report = metrics::evaluate_batch(
                &preds,
                &gts,
                0,
                mesh_pairs.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice())),
            )?;
            println!("{}", serde_json::to_string(&report).expect("serializable"));
            eprint!("{}", metrics::report_text(&report));
            Ok(())
        }

        Cmd::Train { out, mode } => {
            let mut cfg = match &cli.config {
                Some(_) => load_config(&cli)?,
                None => {
                    return Err(CliError::Usage(
                        "train needs --config (see README for the format)".into(),
                    ))
                }
            };
            if let Some(m) = mode {
                cfg.train.mode = liftmesh::io::config::TrainMode::parse(m)?;
            }
            let body = desk_model(cfg.model.body_vertices, cfg.model.body_seed)?;
            let data = make_synth_dataset(
                cfg.train.synth_samples,
                &body,
                cfg.train.seed,
                cfg.train.noise_sigma,
            )?;
            let params = PipelineParams::init(&cfg.model, &body, &mut Rng::new(cfg.model.seed))?;
            eprintln!(
                "training {} for {} steps on {} samples",
                cfg.train.mode.as_str(),
                cfg.train.steps,
                data.len()
            );
            let out_path = out.clone();
            let outcome = train_loop(&cfg, &body, &data, params, |step, p| {
                let path = out_path.with_extension(format!("step{step}.lmtc"));
                p.save(&path)?;
                eprintln!("checkpoint at step {step}: {}", path.display());
                Ok(())
            })?;
            outcome.params.save(out)?;
            let csv_path = out.with_extension("loss.csv");
            atomic_write(&csv_path, training::curve_csv(&outcome.curve).as_bytes())?;
            let last = outcome.curve.last().expect("at least one step");
            println!(
                "{}",
                serde_json::json!({
                    "steps": outcome.curve.len(),
                    "final_loss": last.loss,
                    "final_mpjpe": last.mpjpe,
                    "checkpoint": out.display().to_string(),
                    "loss_csv": csv_path.display().to_string(),
                })
            );
            Ok(())
        }

        Cmd::Synth { n, body, out } => {
            let cfg = load_config(&cli)?;
            let body = match body {
                Some(p) => BodyModel::load(p)?,
                None => desk_model(cfg.model.body_vertices, cfg.model.body_seed)?,
            };
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let data = make_synth_dataset(*n, &body, seed, cfg.train.noise_sigma)?;
            let records: Vec<PoseRecord> = data
                .iter()
                .enumerate()
                .map(|(i, s)| PoseRecord {
                    id: format!("synth-{i:04}"),
                    topology: H36M17.into(),
                    joints: rows2(&s.pose2d.coords),
                    conf: None,
                    gt3d: Some(rows3(&s.gt_joints3d)),
                    gt_theta: Some(s.gt_theta.flat().data().to_vec()),
                    gt_beta: Some(s.gt_beta.data().to_vec()),
                    gt_cam: Some([s.gt_cam.s, s.gt_cam.t.0, s.gt_cam.t.1]),
                })
                .collect();
            pose_file::write_pose_file(out, &records)?;
            println!(
                "{}",
                serde_json::json!({"samples": n, "seed": seed, "path": out.display().to_string()})
            );
            Ok(())
        }

        Cmd::Bench { ckpt, iters, no_timing } => {
            if *iters < 100 {
                return Err(CliError::Usage(format!(
                    "bench needs at least 100 iterations, got {iters}"
                )));
            }
            let params = PipelineParams::load(ckpt)?;
            let body = desk_model(params.cfg.body_vertices, params.cfg.body_seed)?;
            let data = make_synth_dataset(1, &body, params.cfg.seed, 0.0)?;
            let pose = &data[0].pose2d;

            let count = params.param_count();
            if *no_timing {
                println!("{}", serde_json::json!({"param_count": count, "iters": iters}));
                return Ok(());
            }
            let mut times_ms: Vec<f64> = Vec::with_capacity(*iters);
            for _ in 0..*iters {
                let t0 = std::time::Instant::now();
                let res = full_pipeline(&params, &body, pose)?;
                std::hint::black_box(&res.vertices);
                times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = times_ms[times_ms.len() / 2];
            let p95 = times_ms[((times_ms.len() as f64 * 0.95) as usize).saturating_sub(1)];
            println!(
                "{}",
                serde_json::json!({
                    "param_count": count,
                    "iters": iters,
                    "median_ms": median,
                    "p95_ms": p95,
                })
            );
            Ok(())
        }

        Cmd::ConvertCoco { input, out } => {
            let poses = pose_file::read_coco_keypoints(input)?;
            let records: Vec<PoseRecord> = poses
                .iter()
                .map(|(id, pose)| {
                    let mapped = map_coco_to_h36m(pose)?;
                    Ok(PoseRecord {
                        id: id.clone(),
                        topology: H36M17.into(),
                        joints: rows2(&mapped.coords),
                        conf: mapped.confidence.clone(),
                        gt3d: None,
                        gt_theta: None,
                        gt_beta: None,
                        gt_cam: None,
                    })
                })
                .collect::<Result<_, Error>>()?;
            pose_file::write_pose_file(out, &records)?;
            println!(
                "{}",
                serde_json::json!({"converted": records.len(), "path": out.display().to_string()})
            );
            Ok(())
        }

        Cmd::MakeBody { out, vertices } => {
            let cfg = load_config(&cli)?;
            let v = vertices.unwrap_or(cfg.model.body_vertices);
            let seed = cli.seed.unwrap_or(cfg.model.body_seed);
            let body = desk_model(v, seed)?;
            body.save(out)?;
            println!(
                "{}",
                serde_json::json!({
                    "vertices": body.vertex_count(),
                    "joints": body.joint_count(),
                    "seed": seed,
                    "path": out.display().to_string(),
                })
            );
            Ok(())
        }
    }
}

/// Per-sample J×3 joint sets from JSON lines carrying either a `joints3d`
/// (lift output) or `gt3d` field.
fn read_joint_sets(path: &Path) -> Result<Vec<Tensor>, Error> {
    #[derive(Deserialize)]
    struct Line {
        #[serde(default)]
        joints3d: Option<Vec<[f64; 3]>>,
        #[serde(default)]
        gt3d: Option<Vec<[f64; 3]>>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(line).map_err(|e| {
            Error::Ingestion(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        let rows = rec.joints3d.or(rec.gt3d).ok_or_else(|| {
            Error::Ingestion(format!(
                "{} line {}: needs a joints3d or gt3d field",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(rows_to_tensor(&rows)?);
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("{}: no samples", path.display())));
    }
    Ok(out)
}

/// Ground-truth joint sets: pose records with a required gt3d field.
fn read_gt_sets(path: &Path) -> Result<Vec<Tensor>, Error> {
    let records = pose_file::read_pose_file(path, None)?;
    let mut out = Vec::new();
    for r in &records {
        match r.gt3d_tensor()? {
            Some(t) => out.push(t),
            None => return Err(Error::Ingestion(format!("pose '{}' is missing gt3d", r.id))),
        }
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("{}: no samples", path.display())));
    }
    Ok(out)
}

/// Vertex sets from JSON lines with a `vertices` field (mesh output).
fn read_vertex_sets(path: &Path) -> Result<Vec<Tensor>, Error> {
    #[derive(Deserialize)]
    struct Line {
        vertices: Vec<[f64; 3]>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(line).map_err(|e| {
            Error::Ingestion(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rows_to_tensor(&rec.vertices)?);
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("{}: no samples", path.display())));
    }
    Ok(out)
}

fn rows_to_tensor(rows: &[[f64; 3]]) -> Result<Tensor, Error> {
    let mut data = Vec::with_capacity(rows.len() * 3);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), 3], data)
}
