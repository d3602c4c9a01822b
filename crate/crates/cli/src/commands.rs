use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latent_rom::autodiff::Matrix;
use latent_rom::burgers::{burgers_dataset, simulate_trajectory, Grid};
use latent_rom::dataio::{read_coordinates, sample_parameters, Dataset, FieldTrajectory, ModelBundle};
use latent_rom::networks::ArchitectureSpec;
use latent_rom::online::{evaluate_testset, Predictor, PredictionRequest};
use latent_rom::training::train;
use latent_rom::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{domain_preset, parse_latent_dims, parse_vector, RunConfig};
use crate::{Cli, Command, Common, EvaluateArgs, GenerateArgs, PredictArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Some simulations failed; the archives hold the rest.
    Partial { failed: usize, total: usize, list: PathBuf },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Partial { failed, total, list } => {
                write!(f, "{failed} of {total} simulations failed; partial archives written, failures listed in {}", list.display())
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn category(e: &CliError) -> &'static str {
    match e {
        CliError::Partial { .. } => "solver",
        CliError::Core(e) => match e {
            Error::Dimension { .. } => "dimension",
            Error::State(_) => "state",
            Error::Spec(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Solver { .. } => "solver",
            Error::InvalidInput(_) => "input",
            Error::Format { .. } => "format",
            Error::Checksum(_) => "checksum",
            Error::Version { .. } => "version",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        },
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    apply_common(&mut cfg, &cli.common);
    let name = match &cli.command {
        Command::Generate(a) => {
            apply_generate(&mut cfg, a)?;
            "generate"
        }
        Command::Train(a) => {
            apply_train(&mut cfg, a);
            "train"
        }
        Command::Predict(_) => "predict",
        Command::Evaluate(_) => "evaluate",
    };
    cfg.validate()?;
    let dir = run_dir(&cli.common.out, name)?;
    cfg.write(&dir.join("config.json"))?;
    let argv: Vec<String> = std::env::args().collect();
    write_text(&dir.join("invocation.txt"), &format!("{}\n", argv.join(" ")))?;
    log::info!("run directory {}", dir.display());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate(_) => generate(&cfg, &dir),
        Command::Train(a) => train_bundles(&cfg, a, &dir),
        Command::Predict(a) => predict(&cfg, a, &dir),
        Command::Evaluate(a) => evaluate(a, &dir),
    })?;
    println!("{}", dir.display());
    Ok(())
}

fn apply_common(cfg: &mut RunConfig, common: &Common) {
    if let Some(s) = common.seed {
        cfg.training.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
}

fn apply_generate(cfg: &mut RunConfig, a: &GenerateArgs) -> Result<()> {
    if let Some(d) = &a.domain {
        let (lo, hi) = domain_preset(d)?;
        cfg.param_lo = lo.to_vec();
        cfg.param_hi = hi.to_vec();
    }
    cfg.n_train = a.n_train.unwrap_or(cfg.n_train);
    cfg.n_test = a.n_test.unwrap_or(cfg.n_test);
    cfg.segments = a.segments.unwrap_or(cfg.segments);
    cfg.multiscale |= a.multiscale;
    cfg.test_segments = a.test_segments.or(cfg.test_segments);
    cfg.n_steps = a.n_steps.unwrap_or(cfg.n_steps);
    cfg.t_final = a.t_final.unwrap_or(cfg.t_final);
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.training;
    t.max_iterations = a.max_iterations.unwrap_or(t.max_iterations);
    t.check_every = a.check_every.unwrap_or(t.check_every);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
}

/// `<out>/<command>-<timestamp>`, suffixed until the name is unused.
fn run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for k in 0.. {
        let name = if k == 0 { format!("{command}-{stamp}") } else { format!("{command}-{stamp}-{k}") };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Io { path: dir, source: e }.into()),
        }
    }
    unreachable!()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

#[derive(Serialize)]
struct Failure {
    id: String,
    mu: Vec<f64>,
    segments: usize,
    error: String,
}

struct Job {
    id: String,
    mu: Vec<f64>,
    segments: usize,
}

fn generate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let bounds = cfg.bounds()?;
    let seed = cfg.training.seed;
    let train_mus = sample_parameters(&bounds, cfg.n_train, cfg.train_sampling, seed)?;
    let test_mus = sample_parameters(&bounds, cfg.n_test, cfg.test_sampling, seed.wrapping_add(1))?;
    let train_jobs: Vec<Job> = train_mus
        .into_iter()
        .enumerate()
        .map(|(i, mu)| {
            let segments = if cfg.multiscale { cfg.multiscale_segments[i % cfg.multiscale_segments.len()] } else { cfg.segments };
            Job { id: format!("train-{i:04}"), mu, segments }
        })
        .collect();
    let test_jobs: Vec<Job> = test_mus
        .into_iter()
        .enumerate()
        .map(|(i, mu)| Job { id: format!("test-{i:04}"), mu, segments: cfg.test_grid() })
        .collect();

    let mut failures = Vec::new();
    let total = train_jobs.len() + test_jobs.len();
    for (name, jobs) in [("train", train_jobs), ("test", test_jobs)] {
        let start = Instant::now();
        let results: Vec<(Job, latent_rom::Result<FieldTrajectory>)> = jobs
            .into_par_iter()
            .map(|job| {
                let r = simulate_trajectory(job.id.clone(), &job.mu, &cfg.burgers(job.segments));
                (job, r)
            })
            .collect();
        let mut ds = burgers_dataset(&cfg.burgers(cfg.segments));
        ds.metadata["parameter_box"] = serde_json::json!(bounds);
        ds.metadata["seed"] = serde_json::json!(seed);
        ds.metadata["split"] = serde_json::json!(name);
        for (job, r) in results {
            match r {
                Ok(t) => ds.push(t)?,
                Err(e) => {
                    log::error!("{} at mu = {:?}: {e}", job.id, job.mu);
                    failures.push(Failure { id: job.id, mu: job.mu, segments: job.segments, error: e.to_string() });
                }
            }
        }
        ds.save(&dir.join(name))?;
        log::info!("{name}: {} trajectories in {:.1} s", ds.trajectories.len(), start.elapsed().as_secs_f64());
    }
    if !failures.is_empty() {
        let list = dir.join("failures.json");
        write_text(&list, &serde_json::to_string_pretty(&failures).expect("failures serialise"))?;
        return Err(CliError::Partial { failed: failures.len(), total, list });
    }
    Ok(())
}

fn train_bundles(cfg: &RunConfig, a: &TrainArgs, dir: &Path) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let first = data.trajectories.first().ok_or_else(|| Error::InvalidInput(format!("{} holds no trajectories", a.data.display())))?;
    let dims = match &a.ns {
        Some(s) => parse_latent_dims(s)?,
        None => vec![cfg.latent_dim],
    };
    let library = cfg.library()?;
    let (param_dim, space_dim, field_dim) = (first.mu.len(), first.coords.ncols(), data.fields.len());
    let results: Vec<(usize, Result<()>)> = dims
        .par_iter()
        .map(|&ns| {
            let arch = ArchitectureSpec::standard(ns, param_dim, space_dim, field_dim, cfg.taylor_order);
            let out = dir.join(format!("ns{ns}"));
            let r = match train(&data, &arch, &library, &cfg.training) {
                Ok(mut bundle) => {
                    bundle.knn = cfg.knn();
                    let s = &bundle.summary;
                    log::info!(
                        "ns = {ns}: {} after {} iterations, loss {:.4e}, latent error {:?}%",
                        s.status,
                        s.iterations,
                        s.final_loss.total,
                        s.latent_l2
                    );
                    bundle.save(&out).map_err(CliError::from)
                }
                Err(failure) => {
                    if let Some(mut checkpoint) = failure.checkpoint {
                        checkpoint.knn = cfg.knn();
                        let path = dir.join(format!("ns{ns}-checkpoint"));
                        match checkpoint.save(&path) {
                            Ok(()) => log::warn!("ns = {ns}: last checkpoint saved to {}", path.display()),
                            Err(e) => log::error!("ns = {ns}: checkpoint not saved: {e}"),
                        }
                    }
                    Err(failure.error.into())
                }
            };
            (ns, r)
        })
        .collect();
    let mut first_err = None;
    for (ns, r) in results {
        match r {
            Ok(()) => println!("ns{ns}: {}", dir.join(format!("ns{ns}")).display()),
            Err(e) => {
                log::error!("ns = {ns}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn field_names(n: usize) -> Vec<String> {
    match n {
        2 => vec!["u".into(), "v".into()],
        _ => (0..n).map(|i| format!("f{i}")).collect(),
    }
}

fn predict(cfg: &RunConfig, a: &PredictArgs, dir: &Path) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let mu = parse_vector(&a.mu)?;
    let space_dim = bundle.architecture.space_dim;
    let (coords, grid): (Matrix, Option<String>) = match (&a.coords, a.segments) {
        (Some(path), _) => (read_coordinates(path, space_dim)?, None),
        (None, segments) => {
            let g = Grid::new(segments.unwrap_or(cfg.segments), cfg.domain)?;
            (g.coords.clone(), Some(g.tag()))
        }
    };
    let predictor = Predictor::new(&bundle)?;
    let prediction = predictor.predict(&PredictionRequest { mu: mu.clone(), coords, times: None })?;
    let mut trajectory = prediction.trajectory;
    trajectory.id = "prediction".into();
    trajectory.grid = grid;
    let mut ds = Dataset::new(Vec::new(), bundle.times.clone(), field_names(bundle.architecture.field_dim));
    ds.metadata = serde_json::json!({
        "model": a.model,
        "neighbors": prediction.coefficients.neighbors,
        "weights": prediction.coefficients.weights,
    });
    if a.csv {
        write_prediction_csv(&dir.join("prediction.csv"), &ds, &trajectory)?;
    }
    ds.domain_box = (0..space_dim)
        .map(|j| {
            let col = trajectory.coords.column(j);
            [col.fold(f64::INFINITY, |m, &v| m.min(v)), col.fold(f64::NEG_INFINITY, |m, &v| m.max(v))]
        })
        .collect();
    ds.push(trajectory)?;
    ds.save(&dir.join("prediction"))?;
    println!("predicted mu = {mu:?} on {} points in {:.4} s", ds.trajectories[0].n_points(), prediction.wall_clock);
    Ok(())
}

fn write_prediction_csv(path: &Path, ds: &Dataset, t: &FieldTrajectory) -> Result<()> {
    let io = |e| CliError::from(Error::Io { path: path.into(), source: e });
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = vec!["t".to_string()];
    header.extend((0..t.coords.ncols()).map(|j| format!("x{j}")));
    header.extend(ds.fields.iter().cloned());
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (m, time) in ds.times.iter().enumerate() {
        for k in 0..t.n_points() {
            write!(w, "{time}").map_err(io)?;
            for v in t.coords.row(k) {
                write!(w, ",{v}").map_err(io)?;
            }
            for f in 0..ds.fields.len() {
                write!(w, ",{}", t.fields[[m, k, f]]).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn evaluate(a: &EvaluateArgs, dir: &Path) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let truth = Dataset::load(&a.data)?;
    let mus: Vec<Vec<f64>> = truth.trajectories.iter().map(|t| t.mu.clone()).collect();
    let report = evaluate_testset(&bundle, &truth, &mus)?;
    report.write_csv(&dir.join("report.csv"))?;
    println!("trajectories: {}", report.entries.len());
    match report.aggregate_l2 {
        Some(l2) => println!("aggregate relative L2 error: {l2:.4}%"),
        None => println!("aggregate relative L2 error: undefined (zero truth norm)"),
    }
    println!("prediction time: {:.3} s", report.predict_seconds);
    match (report.solver_seconds, report.speedup) {
        (Some(s), Some(x)) => println!("solver time: {s:.3} s, speed-up: {x:.1}x"),
        _ => println!("solver time unavailable; no speed-up reported"),
    }
    Ok(())
}
