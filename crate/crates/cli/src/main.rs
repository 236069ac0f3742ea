use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use densecorr::evalmetrics::{fitting_error, fitting_error_reverse, per_vertex_error, semantic_landmark_error, AnnotatedLandmarks, MetricReport};
use densecorr::geometry::{PointCloud, Template, Vec3};
use densecorr::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use densecorr::io::config::read_run_config;
use densecorr::io::dataset::{write_toy_dataset, Dataset, ToyExport};
use densecorr::io::landmarks::{read_landmark_indices, read_landmark_positions};
use densecorr::io::obj::{read_obj, write_obj_mesh};
use densecorr::io::report::{append_record, to_json_line, write_records, MetricRecord};
use densecorr::io::{read_cloud, write_cloud};
use densecorr::losses::{brute_chamfer, chamfer, LossContext, RawTarget};
use densecorr::preprocess::{prepare_scan, LandmarkSet, ScanInput};
use densecorr::spatial::{brute_nearest, brute_ray_cloud, KdIndex, RayIndex, RayQuery};
use densecorr::synthgen::{build_toy_model, sample_dataset, ToyConfig};
use densecorr::training::{infer_correspondence, train_full, EpochRecord};
use densecorr::{gradcheck, Error};

mod exit {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const FORMAT: u8 = 5;
    pub const DATA: u8 = 6;
    pub const CHECK_FAILED: u8 = 7;
}

#[derive(Parser)]
#[command(name = "densecorr", version, about = "Dense correspondence through a learned nonlinear face model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset directory with a manifest.
    Synth(SynthArgs),
    /// Align a raw scan to the template frame, crop and resample it.
    Preprocess(PreprocessArgs),
    /// Train the three-phase schedule on a dataset.
    Train(TrainArgs),
    /// Map preprocessed scans onto the template topology.
    Correspond(CorrespondArgs),
    /// Compute an evaluation metric between two files.
    Eval(EvalArgs),
    /// Time the spatial kernels against brute force.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    subjects: usize,
    #[arg(long, default_value_t = 4)]
    expressions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 642)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    k_id: usize,
    #[arg(long, default_value_t = 4)]
    k_exp: usize,
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
    /// Export every k-th subject as an unlabeled raw scan (0: none).
    #[arg(long, default_value_t = 2)]
    real_every: usize,
    #[arg(long, default_value_t = 0.0)]
    scan_noise: f64,
}

#[derive(clap::Args)]
struct PreprocessArgs {
    /// Raw scan (.obj or .ply).
    #[arg(long)]
    scan: PathBuf,
    /// Landmark positions on the scan (`id x y z`).
    #[arg(long)]
    landmarks: PathBuf,
    /// Dataset directory or template .obj.
    #[arg(long)]
    template: PathBuf,
    /// Template landmark indices, when `--template` is an .obj file.
    #[arg(long)]
    template_landmarks: Option<PathBuf>,
    /// Output for the sampled encoder input.
    #[arg(long)]
    out: PathBuf,
    /// Optional output for the full aligned and cropped cloud.
    #[arg(long)]
    raw_out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct CorrespondArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or template .obj.
    #[arg(long)]
    template: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    scans: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    PerVertex,
    Fitting,
    Landmark,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Test shape (per-vertex, fitting) or estimated mesh (landmark).
    #[arg(long)]
    a: PathBuf,
    /// Estimated shape (per-vertex, fitting) or annotation file (landmark).
    #[arg(long)]
    b: PathBuf,
    /// Dataset directory or template .obj (landmark metric).
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    template_landmarks: Option<PathBuf>,
    /// Report file; one JSON record is appended per run.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mm_per_unit: Option<f64>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 29_495)]
    points: usize,
    /// Size used for the brute-force comparisons.
    #[arg(long, default_value_t = 4096)]
    brute_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } => (exit::IO, "io"),
            Error::Config(_) => (exit::CONFIG, "config"),
            Error::Parse { .. } | Error::Unsupported { .. } | Error::Checkpoint(_) => (exit::FORMAT, "format"),
            _ => (exit::DATA, "data"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn emit(line: serde_json::Value) {
    println!("{line}");
}

fn load_template(path: &Path, landmarks: Option<&Path>) -> Result<Template, Error> {
    if path.is_dir() || path.extension().is_some_and(|e| e == "json") {
        return Dataset::load(path)?.template();
    }
    let mesh = read_obj(path)?.into_mesh()?;
    let lmk = match landmarks {
        Some(p) => read_landmark_indices(p)?,
        None => Vec::new(),
    };
    Template::new(mesh, lmk, Vec::new())
}

fn synth(a: SynthArgs) -> CliResult {
    let toy = build_toy_model(&ToyConfig {
        seed: a.seed,
        n: a.n,
        k_id: a.k_id,
        k_exp: a.k_exp,
        gamma: a.gamma,
    })?;
    let samples = sample_dataset(&toy, a.subjects, a.expressions, a.seed)?;
    let export = ToyExport {
        real_every: a.real_every,
        scan_noise: a.scan_noise,
        seed: a.seed,
    };
    let ds = write_toy_dataset(&a.out, &toy, &samples, &export)?;
    let real = ds.manifest.bundles.iter().filter(|b| b.provenance == densecorr::io::dataset::SourceKind::Real).count();
    emit(json!({
        "command": "synth",
        "bundles": ds.manifest.bundles.len(),
        "real": real,
        "manifest": ds.root.join(densecorr::io::dataset::MANIFEST_FILE),
    }));
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> CliResult {
    let template = load_template(&a.template, a.template_landmarks.as_deref())?;
    let tl = LandmarkSet::new(
        template
            .landmarks()
            .iter()
            .map(|(id, i)| (id.clone(), template.mesh().vertices()[*i]))
            .collect(),
    )?;
    let obj_mesh = match a.scan.extension().and_then(|e| e.to_str()) {
        Some("obj") => {
            let data = read_obj(&a.scan)?;
            (!data.faces.is_empty()).then(|| data.into_mesh()).transpose()?
        }
        _ => None,
    };
    let cloud = match &obj_mesh {
        Some(m) => PointCloud::from_points(m.vertices().to_vec())?,
        None => read_cloud(&a.scan)?,
    };
    let landmarks = read_landmark_positions(&a.landmarks)?;
    let scan = ScanInput {
        cloud: &cloud,
        mesh: obj_mesh.as_ref(),
        landmarks: &landmarks,
    };
    let n = a.n.unwrap_or(template.vertex_count());
    let prepared = prepare_scan(&scan, template.mesh(), &tl, n, a.seed)?;
    write_cloud(&a.out, &prepared.cloud)?;
    if let Some(raw) = &a.raw_out {
        write_cloud(raw, &prepared.raw)?;
    }
    emit(json!({
        "command": "preprocess",
        "points": prepared.cloud.len(),
        "raw_points": prepared.raw.len(),
        "scale": prepared.alignment.scale,
        "landmark_rms": prepared.landmark_rms,
    }));
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut config = match &a.config {
        Some(p) => read_run_config(p)?,
        None => densecorr::training::RunConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let ds = Dataset::load(&a.data)?;
    ds.validate()?;
    let template = ds.template()?;
    if config.model.vertex_count != template.vertex_count() {
        return Err(Error::Config(format!(
            "model.vertex_count = {} but the template has {} vertices",
            config.model.vertex_count,
            template.vertex_count()
        ))
        .into());
    }
    let ctx = LossContext::new(&template, config.loss)?;
    let data = ds.training_set(&ctx, template.vertex_count(), config.seed)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let log_path = a.out.join("log.jsonl");
    let latest = a.out.join("latest.ckpt");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    }
    let seed = config.seed;
    let loss = config.loss;
    let mut observer = |r: &EpochRecord, m: &densecorr::autonet::FaceModel| -> densecorr::Result<()> {
        append_record(&log_path, r)?;
        save_checkpoint(&latest, &Checkpoint::new(m.clone(), seed, Some(r.phase), Some(r.global_epoch), loss))
    };
    let (model, log) = train_full(&template, &data, &config, &mut observer)?;
    for e in &log.events {
        append_record(&log_path, e)?;
    }
    let last = log.epochs.last();
    let final_path = a.out.join("final.ckpt");
    save_checkpoint(
        &final_path,
        &Checkpoint::new(model, seed, last.map(|r| r.phase), last.map(|r| r.global_epoch), loss),
    )?;
    emit(json!({
        "command": "train",
        "epochs": log.epochs.len(),
        "final_loss": last.map(|r| r.mean_loss),
        "counterpart_switches": log.switch_count(),
        "checkpoint": final_path,
    }));
    Ok(())
}

fn correspond(a: CorrespondArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let template = load_template(&a.template, None)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    for scan in &a.scans {
        let cloud = read_cloud(scan)?;
        let start = Instant::now();
        let c = infer_correspondence(&ckpt.model, &cloud, &template)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let stem = scan.file_stem().and_then(|s| s.to_str()).unwrap_or("scan");
        let out = a.out.join(format!("{stem}_corr.obj"));
        write_obj_mesh(&out, &c.mesh)?;
        emit(json!({"command": "correspond", "scan": scan, "out": out, "ms": ms}));
    }
    Ok(())
}

fn read_shape(path: &Path) -> Result<Vec<Vec3>, Error> {
    Ok(read_cloud(path)?.into_parts().0)
}

fn eval(a: EvalArgs) -> CliResult {
    let report: MetricReport = match a.metric {
        Metric::PerVertex => per_vertex_error(&read_shape(&a.a)?, &read_shape(&a.b)?)?,
        Metric::Fitting => fitting_error(&read_shape(&a.a)?, &read_shape(&a.b)?)?,
        Metric::Landmark => {
            let tpath = a.template.as_ref().ok_or_else(|| Error::Config("--template is required for the landmark metric".into()))?;
            let template = load_template(tpath, a.template_landmarks.as_deref())?;
            let ann = AnnotatedLandmarks::new(read_landmark_positions(&a.b)?.entries().to_vec())?;
            semantic_landmark_error(&read_shape(&a.a)?, &template, &ann)?
        }
    };
    let report = match a.mm_per_unit {
        Some(s) => report.to_millimetres(s)?,
        None => report,
    };
    let mut records = vec![MetricRecord::from_report(&report, Some(a.a.display().to_string()), Some(a.b.display().to_string()), false)];
    if let Metric::Fitting = a.metric {
        let mut rev = fitting_error_reverse(&read_shape(&a.a)?, &read_shape(&a.b)?)?;
        if let Some(s) = a.mm_per_unit {
            rev = rev.to_millimetres(s)?;
        }
        records.push(MetricRecord::from_report(&rev, Some(a.a.display().to_string()), Some(a.b.display().to_string()), false));
    }
    for r in &records {
        if let Some(out) = &a.out {
            append_record(out, r)?;
        }
        println!("{}", to_json_line(r)?);
    }
    Ok(())
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn time<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

fn bench(a: BenchArgs) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut records = Vec::new();

    let pred = random_cloud(a.points, &mut rng);
    let raw = random_cloud(a.points, &mut rng);
    let (kd, build_ms) = time(|| KdIndex::build(&raw));
    let kd = kd?;
    let (full, chamfer_ms) = time(|| chamfer(&pred, &kd, 0.001));
    let full = full?;
    records.push(json!({"kernel": "chamfer", "points": a.points, "ms": chamfer_ms, "index_build_ms": build_ms, "value": full.value}));

    let m = a.brute_points.min(a.points);
    let (small_pred, small_raw) = (&pred[..m], &raw[..m]);
    let small_kd = KdIndex::build(small_raw)?;
    let (fast, fast_ms) = time(|| chamfer(small_pred, &small_kd, 0.001));
    let (slow, slow_ms) = time(|| brute_chamfer(small_pred, small_raw, 0.001));
    let (fast, slow) = (fast?, slow?);
    records.push(json!({"kernel": "chamfer_vs_brute", "points": m, "ms": fast_ms, "brute_ms": slow_ms, "equal": fast == slow}));

    let (nn, nn_ms) = time(|| small_pred.iter().map(|q| small_kd.nearest(q)).collect::<Vec<_>>());
    let (bn, bn_ms) = time(|| small_pred.iter().map(|q| brute_nearest(small_raw, q)).collect::<Vec<_>>());
    records.push(json!({"kernel": "nearest", "points": m, "queries": m, "ms": nn_ms, "brute_ms": bn_ms, "equal": nn == bn}));

    let rays = RayIndex::from_points(small_raw)?;
    let query = RayQuery::default();
    let dirs: Vec<Vec3> = random_cloud(m, &mut rng).into_iter().map(|d| d.normalize()).collect();
    let (hits, ray_ms) = time(|| {
        small_pred
            .iter()
            .zip(&dirs)
            .map(|(o, d)| rays.ray_counterpart(o, d, &query))
            .collect::<Result<Vec<_>, _>>()
    });
    let (brute_hits, brute_ray_ms) = time(|| {
        small_pred
            .iter()
            .zip(&dirs)
            .map(|(o, d)| brute_ray_cloud(small_raw, o, d, &query))
            .collect::<Result<Vec<_>, _>>()
    });
    records.push(json!({"kernel": "ray_counterpart", "points": m, "queries": m, "ms": ray_ms, "brute_ms": brute_ray_ms, "equal": hits? == brute_hits?}));

    // a raw target is what training builds per real scan
    let (_, target_ms) = time(|| PointCloud::from_points(raw.clone()).and_then(RawTarget::new));
    records.push(json!({"kernel": "raw_target_build", "points": a.points, "ms": target_ms}));

    for r in &records {
        emit(r.clone());
    }
    if let Some(out) = &a.out {
        write_records(out, &records)?;
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult {
    let report = gradcheck::run(a.seed, a.instances)?;
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(out, text + "\n").map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    emit(json!({
        "command": "gradcheck",
        "instances": report.instances.len(),
        "max_rel_err": report.max_rel_err,
        "tolerance": report.tolerance,
        "worst": report.worst,
        "passed": report.passed(),
    }));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: exit::CHECK_FAILED,
            kind: "check_failed",
            message: format!("max relative error {:.3e} >= {:.0e} ({})", report.max_rel_err, report.tolerance, report.worst),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", json!({"error": "usage", "code": exit::USAGE, "message": first}));
            return ExitCode::from(exit::USAGE);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Correspond(a) => correspond(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": f.kind, "code": f.code, "message": f.message.replace('\n', " ")}));
            ExitCode::from(f.code)
        }
    }
}
