//! Command-line front end. Exit codes: 0 success, 1 threshold/assertion
//! failure, 2 usage or I/O error.

use crate::config::PipelineConfig;
use crate::evalkit::{self, Checkpoints};
use crate::extractors::{self, RecognizerNet, SegmenterNet, EMBED_DIM};
use crate::imgio::{self, Image};
use crate::imitator::{self, ImitatorNet};
use crate::nn::Net;
use crate::renderer::{self, ParamVector, CONTINUOUS_NAMES, DISCRETE_GROUPS, IMG_SIDE};
use crate::search::{self, SearchConfig};
use crate::{ckpt, dataset, gradcheck};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_THRESHOLD: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser)]
#[command(name = "avatarfit", version, about = "Recover renderer parameters for a portrait via a learned imitator")]
struct Cli {
    /// key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker pool size for eval suites (1 keeps runs reproducible).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample parameter vectors and render a training dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the imitator network on a rendered dataset.
    TrainImitator {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines per-epoch report path (default: <out>.report.jsonl).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the identity-embedding recognizer on sampled identities.
    TrainRecognizer {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the face segmenter on a rendered dataset.
    TrainSegmenter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recover parameters for a portrait photo.
    Create(CreateArgs),
    /// Render a parameter file with either backend.
    Render {
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum)]
        backend: Backend,
        #[arg(long)]
        out: PathBuf,
        /// Imitator checkpoint (required for the imitator backend).
        #[arg(long)]
        imitator: Option<PathBuf>,
    },
    /// Quantitative evaluation suites.
    Eval {
        #[command(subcommand)]
        suite: EvalSuite,
    },
    /// Finite-difference checks for every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also run the intentionally broken fixture (must FAIL by name).
        #[arg(long)]
        with_corrupted_fixture: bool,
    },
}

#[derive(Args)]
struct CreateArgs {
    #[arg(long)]
    photo: PathBuf,
    #[arg(long)]
    imitator: PathBuf,
    #[arg(long)]
    f1: PathBuf,
    #[arg(long)]
    f2: PathBuf,
    /// Output params.json; previews and trace.jsonl land beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    lr_scale: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Engine,
    Imitator,
}

#[derive(Subcommand)]
enum EvalSuite {
    /// Parameter recovery against known ground truth.
    Recover {
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        shift: f32,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Three-arm loss ablation over a shared target suite.
    Ablate {
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        shift: f32,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fréchet embedding distances between render/created/shifted sets.
    Frechet {
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        shift: f32,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recovery across photo-shift strengths.
    Robust {
        #[command(flatten)]
        nets: NetPaths,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1.0")]
        strengths: Vec<f32>,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct NetPaths {
    #[arg(long)]
    imitator: PathBuf,
    #[arg(long)]
    f1: PathBuf,
    #[arg(long)]
    f2: PathBuf,
}

/// An error already formatted for the user, carrying its exit code.
struct CmdError {
    code: i32,
    message: String,
}

type CmdResult = Result<i32, CmdError>;

fn usage_err(message: impl Into<String>) -> CmdError {
    CmdError { code: EXIT_USAGE, message: message.into() }
}

fn with_path<E: std::fmt::Display>(path: &Path, e: E) -> CmdError {
    usage_err(format!("{}: {e}", path.display()))
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success; usage errors
            // exit 2 per the contract.
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };

    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        cfg = match PipelineConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_USAGE;
            }
        };
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }

    match dispatch(cli.command, cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, mut cfg: PipelineConfig) -> CmdResult {
    match command {
        Command::GenData { out, n, seed, force } => {
            if let Some(n) = n {
                cfg.dataset_n = n;
            }
            if let Some(s) = seed {
                cfg.dataset_seed = s;
            }
            cmd_gen_data(&out, &cfg, force)
        }
        Command::TrainImitator { data, out, report, epochs, lr, seed } => {
            if let Some(e) = epochs {
                cfg.imitator_epochs = e;
            }
            if let Some(lr) = lr {
                cfg.imitator_lr = lr;
            }
            if let Some(s) = seed {
                cfg.train_seed = s;
            }
            cmd_train_imitator(&data, &out, report.as_deref(), &cfg)
        }
        Command::TrainRecognizer { out, report, identities, views, epochs, lr, seed } => {
            if let Some(k) = identities {
                cfg.identities = k;
            }
            if let Some(v) = views {
                cfg.views_per_identity = v;
            }
            if let Some(e) = epochs {
                cfg.recognizer_epochs = e;
            }
            if let Some(lr) = lr {
                cfg.recognizer_lr = lr;
            }
            if let Some(s) = seed {
                cfg.identity_seed = s;
            }
            cmd_train_recognizer(&out, report.as_deref(), &cfg)
        }
        Command::TrainSegmenter { data, out, report, epochs, lr, seed } => {
            if let Some(e) = epochs {
                cfg.segmenter_epochs = e;
            }
            if let Some(lr) = lr {
                cfg.segmenter_lr = lr;
            }
            if let Some(s) = seed {
                cfg.train_seed = s;
            }
            cmd_train_segmenter(&data, &out, report.as_deref(), &cfg)
        }
        Command::Create(args) => {
            if let Some(a) = args.alpha {
                cfg.alpha = a;
            }
            if let Some(b) = args.beta {
                cfg.beta = b;
            }
            if let Some(i) = args.iters {
                cfg.search_iters = i;
            }
            if let Some(lr) = args.lr {
                cfg.search_lr = lr;
            }
            if let Some(s) = args.lr_scale {
                cfg.lr_scale = s;
            }
            cmd_create(&args, &cfg)
        }
        Command::Render { params, backend, out, imitator } => {
            cmd_render(&params, backend, &out, imitator.as_deref(), &cfg)
        }
        Command::Eval { suite } => cmd_eval(suite, &cfg),
        Command::GradCheck { seed, with_corrupted_fixture } => {
            cmd_grad_check(seed, with_corrupted_fixture)
        }
    }
}

fn cmd_gen_data(out: &Path, cfg: &PipelineConfig, force: bool) -> CmdResult {
    if cfg.dataset_n == 0 {
        return Err(usage_err("n must be positive"));
    }
    if out.is_dir() && !force {
        let occupied = std::fs::read_dir(out).map_err(|e| with_path(out, e))?.next().is_some();
        if occupied {
            return Err(usage_err(format!(
                "{} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    dataset::generate(out, cfg.dataset_n, cfg.dataset_seed).map_err(|e| with_path(out, e))?;
    std::fs::write(out.join("config.txt"), cfg.echo()).map_err(|e| with_path(out, e))?;
    println!(
        "wrote {} samples (seed {}) to {}",
        cfg.dataset_n,
        cfg.dataset_seed,
        out.display()
    );
    Ok(EXIT_OK)
}

fn write_report<S: Serialize>(path: &Path, rows: &[S], cfg: &PipelineConfig) -> Result<(), CmdError> {
    let mut f = std::fs::File::create(path).map_err(|e| with_path(path, e))?;
    let echo = serde_json::json!({ "config": cfg.echo() });
    writeln!(f, "{echo}").map_err(|e| with_path(path, e))?;
    for row in rows {
        let line = serde_json::to_string(row).expect("report row serializes");
        writeln!(f, "{line}").map_err(|e| with_path(path, e))?;
    }
    Ok(())
}

fn default_report(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".report.jsonl");
    PathBuf::from(p)
}

fn cmd_train_imitator(
    data_dir: &Path,
    out: &Path,
    report: Option<&Path>,
    cfg: &PipelineConfig,
) -> CmdResult {
    let data = dataset::read_dataset(data_dir).map_err(|e| with_path(data_dir, e))?;
    let net = ImitatorNet::new(cfg.train_seed);
    let baseline = imitator::mean_image_baseline(&data);
    println!("mean-image baseline val L1 = {baseline:.5}; target {:.5}", 0.3 * baseline);
    let outcome = imitator::train_imitator(&net, &data, &cfg.imitator_train(), |s| {
        println!(
            "epoch {:3}  train L1 {:.5}  val L1 {:.5}  lr {:.4}",
            s.epoch, s.train_l1, s.val_l1, s.lr
        );
    })
    .map_err(|e| usage_err(format!("training failed: {e}")))?;
    net.save(out).map_err(|e| with_path(out, e))?;
    write_report(&report.map(Path::to_path_buf).unwrap_or_else(|| default_report(out)), &outcome.stats, cfg)?;
    println!(
        "best val L1 {:.5} at epoch {} (baseline {:.5})",
        outcome.best_val_l1, outcome.best_epoch, baseline
    );
    if outcome.best_val_l1 <= 0.3 * baseline {
        Ok(EXIT_OK)
    } else {
        eprintln!("val L1 exceeds 0.3 x baseline");
        Ok(EXIT_THRESHOLD)
    }
}

fn cmd_train_recognizer(out: &Path, report: Option<&Path>, cfg: &PipelineConfig) -> CmdResult {
    let views = renderer::sample_identities(cfg.identities, cfg.views_per_identity, cfg.identity_seed);
    let net = RecognizerNet::new(cfg.train_seed, cfg.identities);
    let stats = extractors::train_recognizer(&net, &views, &cfg.recognizer_train(), |s| {
        println!(
            "epoch {:3}  train CE {:.4}  held-out top-1 {:.3}  lr {:.4}",
            s.epoch, s.train_ce, s.held_out_top1, s.lr
        );
    })
    .map_err(|e| usage_err(format!("training failed: {e}")))?;
    net.save(out).map_err(|e| with_path(out, e))?;
    write_report(&report.map(Path::to_path_buf).unwrap_or_else(|| default_report(out)), &stats, cfg)?;
    let top1 = stats.last().map_or(0.0, |s| s.held_out_top1);
    println!("final held-out top-1 = {top1:.3}");
    if top1 >= 0.8 {
        Ok(EXIT_OK)
    } else {
        eprintln!("held-out top-1 below 0.80");
        Ok(EXIT_THRESHOLD)
    }
}

fn cmd_train_segmenter(
    data_dir: &Path,
    out: &Path,
    report: Option<&Path>,
    cfg: &PipelineConfig,
) -> CmdResult {
    let data = dataset::read_dataset(data_dir).map_err(|e| with_path(data_dir, e))?;
    let net = SegmenterNet::new(cfg.train_seed);
    let stats = extractors::train_segmenter(&net, &data, &cfg.segmenter_train(), |s| {
        println!(
            "epoch {:3}  train CE {:.4}  val mIoU {:.3}  lr {:.4}",
            s.epoch, s.train_ce, s.val_mean_iou, s.lr
        );
    })
    .map_err(|e| usage_err(format!("training failed: {e}")))?;
    net.save(out).map_err(|e| with_path(out, e))?;
    write_report(&report.map(Path::to_path_buf).unwrap_or_else(|| default_report(out)), &stats, cfg)?;
    let iou = extractors::class_iou(&net, &data, &data.split.val);
    let miou = extractors::mean_iou(&iou);
    println!("val per-class IoU: {iou:.3?}; mean {miou:.3}");
    let parts_ok = iou[4] >= 0.4 && iou[5] >= 0.4 && iou[6] >= 0.4;
    if miou >= 0.5 && parts_ok {
        Ok(EXIT_OK)
    } else {
        eprintln!("segmenter IoU thresholds not met (mean >= 0.5, eye/nose/mouth >= 0.4)");
        Ok(EXIT_THRESHOLD)
    }
}

fn load_imitator(path: &Path) -> Result<ImitatorNet, CmdError> {
    let net = ImitatorNet::new(0);
    net.load(path).map_err(|e| with_path(path, e))?;
    Ok(net)
}

/// The recognizer's class count is read off the checkpoint head shape.
fn load_recognizer(path: &Path) -> Result<RecognizerNet, CmdError> {
    let entries = ckpt::load(path).map_err(|e| with_path(path, e))?;
    let head = entries
        .iter()
        .find(|e| e.name == "head.weight")
        .ok_or_else(|| with_path(path, "not a recognizer checkpoint (no head.weight)"))?;
    if head.shape.len() != 2 || head.shape[1] != EMBED_DIM {
        return Err(with_path(path, "unexpected head.weight shape"));
    }
    let net = RecognizerNet::new(0, head.shape[0]);
    net.load(path).map_err(|e| with_path(path, e))?;
    Ok(net)
}

fn load_segmenter(path: &Path) -> Result<SegmenterNet, CmdError> {
    let net = SegmenterNet::new(0);
    net.load(path).map_err(|e| with_path(path, e))?;
    Ok(net)
}

fn load_nets(paths: &NetPaths) -> Result<(ImitatorNet, RecognizerNet, SegmenterNet), CmdError> {
    Ok((
        load_imitator(&paths.imitator)?,
        load_recognizer(&paths.f1)?,
        load_segmenter(&paths.f2)?,
    ))
}

/// params.json wrapper that also echoes the effective config.
#[derive(Serialize)]
struct ParamsArtifact {
    #[serde(flatten)]
    params: search::ParamsFile,
    config: String,
}

fn cmd_create(args: &CreateArgs, cfg: &PipelineConfig) -> CmdResult {
    let photo = imgio::read_ppm(&args.photo).map_err(|e| with_path(&args.photo, e))?;
    let target = if photo.width == IMG_SIDE && photo.height == IMG_SIDE {
        photo
    } else {
        imgio::center_crop_resize(&photo, IMG_SIDE)
    };

    let g = load_imitator(&args.imitator)?;
    let f1 = load_recognizer(&args.f1)?;
    let f2 = load_segmenter(&args.f2)?;
    let scfg = cfg.search();

    let result = search::create(&target, &scfg, &g, &f1, &f2)
        .map_err(|e| usage_err(format!("search failed: {e}")))?;

    let artifact =
        ParamsArtifact { params: search::params_file(&result), config: cfg.echo() };
    let json = serde_json::to_string_pretty(&artifact).expect("params serialize");
    std::fs::write(&args.out, json).map_err(|e| with_path(&args.out, e))?;

    let dir = args.out.parent().unwrap_or_else(|| Path::new("."));
    let preview_g = search::generate_smoothed(&g, &result.params, scfg.beta);
    imgio::write_ppm(&dir.join("preview_imitator.ppm"), &preview_g)
        .map_err(|e| with_path(dir, e))?;
    let (preview_e, _) = renderer::render(&result.params.finalized());
    imgio::write_ppm(&dir.join("preview_engine.ppm"), &preview_e)
        .map_err(|e| with_path(dir, e))?;
    let trace_path = dir.join("trace.jsonl");
    write_report(&trace_path, &result.trace, cfg)?;

    let first = result.trace.first().expect("trace has init row");
    let last = result.trace.last().expect("trace non-empty");
    println!(
        "L_S {:.5} -> {:.5} over {} iterations ({:?}); wrote {}",
        first.ls,
        last.ls,
        result.trace.len() - 1,
        result.status,
        args.out.display()
    );
    Ok(EXIT_OK)
}

#[derive(Deserialize)]
struct ParamsFileIn {
    #[allow(dead_code)]
    schema_version: u32,
    schema_hash: u32,
    continuous: Vec<(String, f32)>,
    discrete: Vec<GroupIn>,
}

#[derive(Deserialize)]
struct GroupIn {
    name: String,
    logits: Vec<f32>,
}

fn read_params_file(path: &Path) -> Result<ParamVector, CmdError> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    let file: ParamsFileIn =
        serde_json::from_str(&text).map_err(|e| with_path(path, e))?;
    if file.schema_hash != renderer::schema_hash() {
        return Err(with_path(
            path,
            format!(
                "schema hash mismatch: file {:#010x}, binary {:#010x}",
                file.schema_hash,
                renderer::schema_hash()
            ),
        ));
    }
    let mut continuous = Vec::with_capacity(CONTINUOUS_NAMES.len());
    for name in CONTINUOUS_NAMES {
        let v = file
            .continuous
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| with_path(path, format!("missing continuous parameter '{name}'")))?;
        continuous.push(v.1);
    }
    let mut discrete = Vec::with_capacity(DISCRETE_GROUPS.len());
    for (name, count) in DISCRETE_GROUPS {
        let g = file
            .discrete
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| with_path(path, format!("missing discrete group '{name}'")))?;
        if g.logits.len() != count {
            return Err(with_path(
                path,
                format!("group '{name}' has {} logits, expected {count}", g.logits.len()),
            ));
        }
        discrete.push(g.logits.clone());
    }
    Ok(ParamVector { continuous, discrete })
}

fn cmd_render(
    params_path: &Path,
    backend: Backend,
    out: &Path,
    imitator_path: Option<&Path>,
    cfg: &PipelineConfig,
) -> CmdResult {
    let params = read_params_file(params_path)?;
    let image: Image = match backend {
        Backend::Engine => renderer::render(&params.finalized()).0,
        Backend::Imitator => {
            let path = imitator_path
                .ok_or_else(|| usage_err("--imitator CKPT is required for the imitator backend"))?;
            let g = load_imitator(path)?;
            search::generate_smoothed(&g, &params, cfg.beta)
        }
    };
    imgio::write_ppm(out, &image).map_err(|e| with_path(out, e))?;
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CmdError> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, json).map_err(|e| with_path(path, e))
}

fn cmd_eval(suite: EvalSuite, cfg: &PipelineConfig) -> CmdResult {
    let scfg = cfg.search();
    match suite {
        EvalSuite::Recover { nets, n, shift, seed, out } => {
            let (g, f1, f2) = load_nets(&nets)?;
            let ckpts = Checkpoints { imitator: &g, recognizer: &f1, segmenter: &f2 };
            let report = evalkit::run_recovery_suite(n, shift, seed, &ckpts, &scfg)
                .map_err(|e| usage_err(e.to_string()))?;
            print!("{}", evalkit::recovery_summary_text(&report));
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            let ok = if shift == 0.0 {
                report.mean_mae < 0.15
                    && report.mean_discrete_correct >= 2.0
                    && report.descent_fraction >= 0.95
            } else {
                report.mean_final_cosine > report.mean_init_cosine
            };
            Ok(if ok { EXIT_OK } else { EXIT_THRESHOLD })
        }
        EvalSuite::Ablate { nets, n, shift, seed, out } => {
            let (g, f1, f2) = load_nets(&nets)?;
            let ckpts = Checkpoints { imitator: &g, recognizer: &f1, segmenter: &f2 };
            let report = evalkit::run_ablation(n, shift, seed, &ckpts, &scfg)
                .map_err(|e| usage_err(e.to_string()))?;
            print!("{}", evalkit::ablation_summary_text(&report));
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            let ok = report.combined.mean_final_cosine >= report.l2_only.mean_final_cosine
                && report.l2_only.mean_final_cosine >= report.init.mean_final_cosine;
            Ok(if ok { EXIT_OK } else { EXIT_THRESHOLD })
        }
        EvalSuite::Frechet { nets, n, shift, seed, out } => {
            let (g, f1, f2) = load_nets(&nets)?;
            let ckpts = Checkpoints { imitator: &g, recognizer: &f1, segmenter: &f2 };
            let report = frechet_report(n, shift, seed, &ckpts, &scfg)?;
            println!("d2(reference, reference)       = {:.6}", report.self_distance);
            println!("d2(created, reference)         = {:.6}", report.created_vs_reference);
            println!("d2(shifted targets, reference) = {:.6}", report.shifted_vs_reference);
            println!("d2(render split A, split B)    = {:.6} (noise floor)", report.noise_floor);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            let ok = report.self_distance <= 1e-6
                && report.created_vs_reference < report.shifted_vs_reference;
            Ok(if ok { EXIT_OK } else { EXIT_THRESHOLD })
        }
        EvalSuite::Robust { nets, n, strengths, seed, out } => {
            if strengths.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(usage_err("strengths must lie in [0,1]"));
            }
            let (g, f1, f2) = load_nets(&nets)?;
            let ckpts = Checkpoints { imitator: &g, recognizer: &f1, segmenter: &f2 };
            let report = evalkit::robustness_sweep(n, &strengths, seed, &ckpts, &scfg)
                .map_err(|e| usage_err(e.to_string()))?;
            for row in &report.rows {
                print!("{}", evalkit::recovery_summary_text(row));
            }
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            let ok = report
                .rows
                .iter()
                .all(|r| r.rows.is_empty() || r.mean_final_cosine > r.mean_init_cosine);
            Ok(if ok { EXIT_OK } else { EXIT_THRESHOLD })
        }
    }
}

#[derive(Serialize)]
struct FrechetReport {
    n: usize,
    shift: f32,
    seed: u64,
    self_distance: f64,
    created_vs_reference: f64,
    shifted_vs_reference: f64,
    noise_floor: f64,
}

/// Builds the reference/created/shifted image sets and their pairwise
/// Fréchet distances under the recognizer embedding.
fn frechet_report(
    n: usize,
    shift: f32,
    seed: u64,
    ckpts: &Checkpoints,
    scfg: &SearchConfig,
) -> Result<FrechetReport, CmdError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut reference = Vec::with_capacity(n);
    let mut reference_b = Vec::with_capacity(n);
    let mut shifted = Vec::with_capacity(n);
    let mut created = Vec::with_capacity(n);
    for i in 0..n {
        reference.push(renderer::render(&ParamVector::sample(&mut rng).finalized()).0);
        reference_b.push(renderer::render(&ParamVector::sample(&mut rng).finalized()).0);
        let truth = ParamVector::sample(&mut rng);
        let (clean, _) = renderer::render(&truth.finalized());
        let target = renderer::photo_shift(&clean, seed ^ (i as u64).wrapping_mul(0x9E37), shift);
        let result = search::create(&target, scfg, ckpts.imitator, ckpts.recognizer, ckpts.segmenter)
            .map_err(|e| usage_err(format!("search failed: {e}")))?;
        created.push(renderer::render(&result.params.finalized()).0);
        shifted.push(target);
    }
    let d = |a: &[Image], b: &[Image]| {
        evalkit::frechet_distance(a, b, ckpts.recognizer).map_err(|e| usage_err(e.to_string()))
    };
    Ok(FrechetReport {
        n,
        shift,
        seed,
        self_distance: d(&reference, &reference)?,
        created_vs_reference: d(&created, &reference)?,
        shifted_vs_reference: d(&shifted, &reference)?,
        noise_floor: d(&reference, &reference_b)?,
    })
}

fn cmd_grad_check(seed: u64, with_corrupted_fixture: bool) -> CmdResult {
    let results = gradcheck::suite(seed, with_corrupted_fixture);
    let mut failures = 0;
    for r in &results {
        println!("{r}");
        let expected_fail = r.name == "corrupted_fixture";
        if r.pass == expected_fail {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} gradient checks passed", results.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("{failures} gradient check(s) failed");
        Ok(EXIT_THRESHOLD)
    }
}
