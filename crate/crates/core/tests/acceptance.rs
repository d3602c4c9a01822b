//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! By default the end-to-end regression runs as the 1500-iteration smoke
//! variant and the multiscale criterion is not run. Set
//! `LATENT_ROM_ACCEPTANCE=full` for the 6000-iteration regression and the
//! multiscale run (about an hour on one core).

use std::time::Instant;

use latent_rom::autodiff::{finite_difference_check, Matrix};
use latent_rom::burgers::{simulate, simulate_trajectory, BurgersConfig, Grid};
use latent_rom::dataio::{sample_parameters, Dataset, FieldTrajectory, ModelBundle, SamplingMode};
use latent_rom::idmodel::{fit_coefficients_least_squares, solve_latent_ode, IdModel, LibrarySpec};
use latent_rom::interp::{interpolate_coefficients, parameter_distance, KnnConfig};
use latent_rom::networks::{build_networks, ArchitectureSpec, LatentTrajectory, Tldnet};
use latent_rom::online::{evaluate_testset, L2Accumulator, PredictionRequest, Predictor};
use latent_rom::training::{
    coefficient_block, latent_consistency, record_total_loss, train, Batch, StopStatus, TrainingConfig, TrainingData,
};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D1: [[f64; 2]; 2] = [[0.7, 0.9], [0.9, 1.1]];
const D2: [[f64; 2]; 2] = [[0.5, 1.1], [0.5, 1.5]];

struct Outcome {
    label: String,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Ledger {
    outcomes: Vec<Outcome>,
}

impl Ledger {
    fn record(&mut self, label: &str, pass: bool, detail: String) {
        println!("{} {label}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.outcomes.push(Outcome { label: label.into(), pass, detail });
    }

    fn skip(&mut self, label: &str, why: &str) {
        println!("SKIP {label}: {why}");
    }

    fn error(&mut self, label: &str, e: impl std::fmt::Display) {
        self.record(label, false, format!("error: {e}"));
    }
}

fn gradient_check(ledger: &mut Ledger) {
    let label = "1 gradient correctness";
    let start = Instant::now();
    let times: Vec<f64> = (0..=10).map(|m| m as f64 * 0.02).collect();
    let coords = Matrix::from_shape_fn((25, 2), |(k, j)| if j == 0 { (k % 5) as f64 * 0.5 - 1.0 } else { (k / 5) as f64 * 0.5 - 1.0 });
    let mut ds = Dataset::new(vec![[-1.0, 1.0]; 2], times.clone(), vec!["u".into(), "v".into()]);
    for (b, mu) in [[0.8, 1.0], [0.85, 0.95]].iter().enumerate() {
        let fields = Array3::from_shape_fn((times.len(), 25, 2), |(m, k, f)| {
            let (x, y) = (coords[[k, 0]], coords[[k, 1]]);
            mu[0] * (-(x * x + y * y) / (2.0 * mu[1] * mu[1])).exp() * (1.0 - (1.0 + f as f64) * times[m])
        });
        ds.push(FieldTrajectory { id: format!("g{b}"), mu: mu.to_vec(), coords: coords.clone(), fields, grid: None, wall_clock: None })
            .unwrap();
    }
    let config = TrainingConfig { weight_coef: 0.01, points_per_snapshot: None, ..TrainingConfig::default() };
    let arch = ArchitectureSpec::burgers(2);
    let lib = LibrarySpec::default();
    let run = || -> latent_rom::Result<f64> {
        let data = TrainingData::prepare(&ds, config.range_scale)?;
        let mut store = build_networks(&arch, 7)?;
        let nb = lib.n_columns(2);
        let ids = (0..2)
            .map(|i| store.insert(coefficient_block(i), Matrix::from_shape_fn((nb, 2), |(r, c)| 0.1 * (i + 1) as f64 - 0.05 * (r + c) as f64)))
            .collect::<latent_rom::Result<Vec<_>>>()?;
        let net = Tldnet::bind(&arch, &store)?;
        let batch = Batch::draw(&data, None, &mut ChaCha8Rng::seed_from_u64(0));
        finite_difference_check(&mut store, 1e-5, |tape, s| {
            record_total_loss(tape, s, &net, &lib, &ids, &data, &batch, &config).map(|g| g.total)
        })
    };
    match run() {
        Ok(err) => {
            let secs = start.elapsed().as_secs_f64();
            ledger.record(label, err < 1e-4 && secs < 60.0, format!("max relative error {err:.2e} (< 1e-4), {secs:.1} s (< 60 s)"));
        }
        Err(e) => ledger.error(label, e),
    }
}

fn sindy_recovery(ledger: &mut Ledger) {
    let label = "2 sparse identification oracle";
    // A = P diag(d) P^-1 so the affine system has a closed-form solution.
    let p = Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.3, 0.2, 0.0, 1.0);
    let p_inv = p.try_inverse().unwrap();
    let d = Vector3::new(-0.5, -1.2, 0.3);
    let a = p * Matrix3::from_diagonal(&d) * p_inv;
    let b = Vector3::new(0.1, -0.2, 0.3);
    let z0 = Vector3::new(1.0, -0.5, 0.25);
    let c = p_inv * b;
    let w0 = p_inv * z0;
    let exact = |t: f64| -> Vector3<f64> {
        let w = Vector3::from_fn(|i, _| (w0[i] + c[i] / d[i]) * (d[i] * t).exp() - c[i] / d[i]);
        p * w
    };
    let times: Vec<f64> = (0..=40).map(|m| m as f64 / 40.0).collect();
    let states = Matrix::from_shape_fn((times.len(), 3), |(m, i)| exact(times[m])[i]);
    let first = Matrix::from_shape_fn((times.len(), 3), |(m, i)| (a * exact(times[m]) + b)[i]);
    let traj = LatentTrajectory { times: times.clone(), states, first, second: None };
    let lib = LibrarySpec::default();
    let result = (|| -> latent_rom::Result<(f64, f64)> {
        let xi = fit_coefficients_least_squares(&traj, &lib)?;
        let mut coef_err = 0.0_f64;
        for j in 0..3 {
            coef_err = coef_err.max((xi[[0, j]] - b[j]).abs());
            for i in 0..3 {
                coef_err = coef_err.max((xi[[1 + i, j]] - a[(j, i)]).abs());
            }
        }
        let fine: Vec<f64> = (0..=100).map(|m| m as f64 / 100.0).collect();
        let model = IdModel::new(lib.clone(), xi, vec![])?;
        let z = solve_latent_ode(&model, &[z0[0], z0[1], z0[2]], &fine)?;
        let truth = exact(1.0);
        let num: f64 = (0..3).map(|i| (z[[100, i]] - truth[i]).powi(2)).sum();
        Ok((coef_err, (num / truth.norm_squared()).sqrt()))
    })();
    match result {
        Ok((coef, ode)) => ledger.record(
            label,
            coef <= 1e-6 && ode <= 1e-6,
            format!("max coefficient error {coef:.2e} (<= 1e-6), RK4 relative error at t=1 {ode:.2e} (<= 1e-6)"),
        ),
        Err(e) => ledger.error(label, e),
    }
}

fn knn_checks(ledger: &mut Ledger) {
    let label = "3 KNN inverse-distance weighting";
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Vec<f64>> = (0..25).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let xis: Vec<Matrix> = (0..25).map(|_| Matrix::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0))).collect();
    let cfg = KnnConfig::default();
    let (mut mismatched, mut worst_sum, mut not_bitwise) = (0, 0.0_f64, 0);
    for _ in 0..1000 {
        let q = vec![rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)];
        let r = interpolate_coefficients(&q, &points, &xis, &cfg).unwrap();
        let mut oracle: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, parameter_distance(&q, p).unwrap())).collect();
        oracle.sort_by(|a, b| a.1.total_cmp(&b.1));
        let expected: Vec<usize> = oracle[..cfg.k].iter().map(|x| x.0).collect();
        if r.neighbors != expected {
            mismatched += 1;
        }
        worst_sum = worst_sum.max((r.weights.iter().sum::<f64>() - 1.0).abs());
    }
    for (p, xi) in points.iter().zip(&xis) {
        let r = interpolate_coefficients(p, &points, &xis, &cfg).unwrap();
        if r.xi.iter().zip(xi).any(|(a, b)| a.to_bits() != b.to_bits()) {
            not_bitwise += 1;
        }
    }
    ledger.record(
        label,
        mismatched == 0 && worst_sum <= 1e-12 && not_bitwise == 0,
        format!("{mismatched}/1000 neighbour sets differ from the sorted oracle, weight-sum error {worst_sum:.1e} (<= 1e-12), {not_bitwise}/25 exact matches not bitwise"),
    );
}

fn burgers_checks(ledger: &mut Ledger) {
    let label = "4 Burgers solver properties";
    let start = Instant::now();
    let cfg = BurgersConfig::default();
    let result = (|| -> latent_rom::Result<(bool, String)> {
        let grid = Grid::new(cfg.segments, cfg.domain)?;
        let zero = simulate(0.0, 1.0, &cfg)?;
        let zero_ok = zero.snapshots.iter().all(|&v| v == 0.0);

        let sim = simulate(0.8, 1.0, &cfg)?;
        let n1 = grid.nodes_per_edge();
        let mut walls_ok = true;
        let mut worst_growth = f64::NEG_INFINITY;
        let mut worst_sym = 0.0_f64;
        let mut previous = f64::INFINITY;
        for snap in sim.snapshots.axis_iter(Axis(0)) {
            for k in 0..grid.n_points() {
                if grid.boundary[k] && (snap[[k, 0]] != 0.0 || snap[[k, 1]] != 0.0) {
                    walls_ok = false;
                }
            }
            let energy: f64 = snap.iter().map(|v| v * v).sum::<f64>() * grid.spacing * grid.spacing;
            worst_growth = worst_growth.max(energy - previous);
            previous = energy;
            for i in 0..n1 {
                for j in 0..n1 {
                    worst_sym = worst_sym.max((snap[[grid.index(i, j), 0]] - snap[[grid.index(j, i), 1]]).abs());
                }
            }
        }
        let decay_ok = worst_growth <= 1e-10;

        // Step-halving at fixed grid: successive differences shrink by ~2 for a first-order scheme.
        let horizon = BurgersConfig { t_final: 0.5, ..cfg.clone() };
        let finals: Vec<Matrix> = [50, 100, 200]
            .iter()
            .map(|&n| {
                let s = simulate(0.8, 1.0, &BurgersConfig { n_steps: n, ..horizon.clone() })?;
                Ok(s.snapshots.index_axis(Axis(0), n).to_owned())
            })
            .collect::<latent_rom::Result<_>>()?;
        let diff = |a: &Matrix, b: &Matrix| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let ratio = diff(&finals[0], &finals[1]) / diff(&finals[1], &finals[2]);
        let secs = start.elapsed().as_secs_f64();
        let pass = zero_ok && walls_ok && decay_ok && worst_sym <= 1e-8 && (1.7..=2.3).contains(&ratio) && secs < 300.0;
        Ok((pass, format!(
            "a=0 zero trajectory {zero_ok}, walls exactly zero {walls_ok}, max energy growth {worst_growth:.1e} (<= 1e-10), \
             diagonal symmetry {worst_sym:.1e} (<= 1e-8), step-halving ratio {ratio:.3} (in [1.7, 2.3]), {secs:.0} s (< 300 s)"
        )))
    })();
    match result {
        Ok((pass, detail)) => ledger.record(label, pass, detail),
        Err(e) => ledger.error(label, e),
    }
}

/// Simulate every parameter point on the `segments` grid chosen per index.
fn simulate_set(prefix: &str, mus: &[Vec<f64>], segments: impl Fn(usize) -> usize) -> latent_rom::Result<Dataset> {
    let base = BurgersConfig::default();
    let mut ds = Dataset::new(vec![base.domain; 2], base.times(), vec!["u".into(), "v".into()]);
    for (i, mu) in mus.iter().enumerate() {
        let cfg = BurgersConfig { segments: segments(i), ..base.clone() };
        ds.push(simulate_trajectory(format!("{prefix}-{i:03}"), mu, &cfg)?)?;
    }
    Ok(ds)
}

fn bounds(b: [[f64; 2]; 2]) -> Vec<[f64; 2]> {
    b.to_vec()
}

struct Regression {
    bundle: ModelBundle,
    test: Dataset,
    aggregate: f64,
    speedup: Option<f64>,
    train_seconds: f64,
}

fn d1_regression(iterations: usize) -> latent_rom::Result<Regression> {
    let t = Instant::now();
    let train_mus = sample_parameters(&bounds(D1), 25, SamplingMode::Random, 0)?;
    let test_mus = sample_parameters(&bounds(D1), 64, SamplingMode::UniformGrid, 1)?;
    let train_set = simulate_set("train", &train_mus, |_| 50)?;
    let test_set = simulate_set("test", &test_mus, |_| 50)?;
    println!("  generated 25 + 64 trajectories in {:.0} s", t.elapsed().as_secs_f64());
    let config = TrainingConfig { max_iterations: iterations, ..TrainingConfig::default() };
    let t = Instant::now();
    let bundle = train(&train_set, &ArchitectureSpec::burgers(5), &LibrarySpec::default(), &config).map_err(|f| f.error)?;
    let train_seconds = t.elapsed().as_secs_f64();
    println!(
        "  trained {} iterations in {train_seconds:.0} s ({}), final loss {:.3e}",
        bundle.summary.iterations, bundle.summary.status, bundle.summary.final_loss.total
    );
    let report = evaluate_testset(&bundle, &test_set, &test_mus)?;
    let aggregate = report.aggregate_l2.unwrap_or(f64::INFINITY);
    Ok(Regression { bundle, test: test_set, aggregate, speedup: report.speedup, train_seconds })
}

fn latent_sanity(ledger: &mut Ledger, run: &Regression) {
    let label = "6 latent smoothness";
    let b = &run.bundle;
    let result = (|| -> latent_rom::Result<(bool, f64)> {
        let net = Tldnet::bind(&b.architecture, &b.params)?;
        let dt = b.times[1] - b.times[0];
        let relative: Vec<f64> = b.times.iter().map(|t| t - b.times[0]).collect();
        let mut states = Vec::new();
        for mu in &b.training_mus {
            let mu_n = b.normalizers.mu.normalize(mu);
            let z0 = net.initial_state(&b.params, &mu_n)?;
            states.push(net.taylor_rollout(&b.params, &z0, &mu_n, dt, b.times.len() - 1)?.states);
        }
        let finite = states.iter().all(|s| s.iter().all(|v| v.is_finite()));
        let r = latent_consistency(&states, &b.coefficients, &b.library, &relative)?;
        Ok((finite, r))
    })();
    match result {
        Ok((finite, r)) => {
            let tol = b.training.tol_latent;
            let within = r <= tol;
            let flagged = b.summary.status == StopStatus::MaxIterations;
            let status = if within {
                "within tolerance"
            } else if flagged {
                "above tolerance, run flagged max-iterations"
            } else {
                "above tolerance but reported converged"
            };
            let last = b.summary.latent_l2.map_or("none".to_string(), |v| format!("{v:.3}%"));
            ledger.record(
                label,
                finite && (within || flagged),
                format!("latent states finite {finite}, latent error {r:.3}% vs tolerance {tol}% ({status}; last check {last})"),
            );
        }
        Err(e) => ledger.error(label, e),
    }
}

fn mesh_free(ledger: &mut Ledger, run: &Regression) {
    let label = "9 mesh-free query";
    let result = (|| -> latent_rom::Result<(f64, f64, bool)> {
        let predictor = Predictor::new(&run.bundle)?;
        let grid = Grid::new(50, BurgersConfig::default().domain)?;
        // Cell centres lie on no training grid.
        let s = grid.segments;
        let centres = Matrix::from_shape_fn((s * s, 2), |(k, j)| {
            let (i, jj) = (k / s, k % s);
            let idx = if j == 0 { i } else { jj };
            grid.lo + (idx as f64 + 0.5) * grid.spacing
        });
        let (mut on, mut off) = (L2Accumulator::default(), L2Accumulator::default());
        let mut finite = true;
        for truth in &run.test.trajectories {
            let p_on = predictor.predict(&PredictionRequest { mu: truth.mu.clone(), coords: truth.coords.clone(), times: None })?;
            on.add(&p_on.trajectory.fields, &truth.fields)?;
            let p_off = predictor.predict(&PredictionRequest { mu: truth.mu.clone(), coords: centres.clone(), times: None })?;
            finite &= p_off.trajectory.fields.iter().all(|v| v.is_finite());
            let mut interp = Array3::zeros(p_off.trajectory.fields.raw_dim());
            for m in 0..truth.fields.dim().0 {
                for f in 0..2 {
                    let nodal: Vec<f64> = truth.fields.slice(ndarray::s![m, .., f]).to_vec();
                    for k in 0..centres.nrows() {
                        interp[[m, k, f]] = grid.bilinear(&nodal, centres[[k, 0]], centres[[k, 1]]);
                    }
                }
            }
            off.add(&p_off.trajectory.fields, &interp)?;
        }
        Ok((on.rate()?, off.rate()?, finite))
    })();
    match result {
        Ok((on, off, finite)) => ledger.record(
            label,
            finite && off <= 2.0 * on,
            format!("off-grid error {off:.3}% vs on-grid {on:.3}% (<= 2x = {:.3}%), finite {finite}", 2.0 * on),
        ),
        Err(e) => ledger.error(label, e),
    }
}

fn multiscale(ledger: &mut Ledger) {
    let label = "7 multiscale grids";
    let result = (|| -> latent_rom::Result<(f64, f64)> {
        let t = Instant::now();
        let train_mus = sample_parameters(&bounds(D2), 25, SamplingMode::Random, 0)?;
        let test_mus = sample_parameters(&bounds(D2), 16, SamplingMode::UniformGrid, 1)?;
        let train_set = simulate_set("ms-train", &train_mus, |i| [50, 60, 70][i % 3])?;
        let mut test_set = simulate_set("ms-test", &test_mus, |_| 70)?;
        let star = vec![0.64, 1.21];
        test_set.push(simulate_trajectory("ms-star", &star, &BurgersConfig { segments: 70, ..BurgersConfig::default() })?)?;
        println!("  generated 25 mixed-grid + 17 fine-grid trajectories in {:.0} s", t.elapsed().as_secs_f64());
        let t = Instant::now();
        let bundle = train(&train_set, &ArchitectureSpec::burgers(5), &LibrarySpec::default(), &TrainingConfig::default()).map_err(|f| f.error)?;
        println!("  trained {} iterations in {:.0} s ({})", bundle.summary.iterations, t.elapsed().as_secs_f64(), bundle.summary.status);
        let report = evaluate_testset(&bundle, &test_set, &test_mus)?;
        let star_report = evaluate_testset(&bundle, &test_set, &[star])?;
        Ok((report.aggregate_l2.unwrap_or(f64::INFINITY), star_report.aggregate_l2.unwrap_or(f64::INFINITY)))
    })();
    match result {
        Ok((agg, star)) => ledger.record(
            label,
            agg <= 6.0,
            format!("aggregate error on 16 test points, 70-segment grid {agg:.3}% (<= 6%); at mu* = [0.64, 1.21] {star:.3}%"),
        ),
        Err(e) => ledger.error(label, e),
    }
}

fn main() {
    let full = std::env::var("LATENT_ROM_ACCEPTANCE").is_ok_and(|v| v == "full");
    let mut ledger = Ledger::default();
    let start = Instant::now();

    gradient_check(&mut ledger);
    sindy_recovery(&mut ledger);
    knn_checks(&mut ledger);
    burgers_checks(&mut ledger);

    let (iterations, bound, budget, name) =
        if full { (6000, 5.0, 3600.0, "5 D1 regression (full)") } else { (1500, 10.0, 900.0, "5 D1 regression (smoke)") };
    let t = Instant::now();
    match d1_regression(iterations) {
        Ok(run) => {
            let secs = t.elapsed().as_secs_f64();
            ledger.record(
                name,
                run.aggregate <= bound && secs <= budget,
                format!(
                    "aggregate error {:.3}% on 64 test points (<= {bound}%), {iterations} iterations, training {:.0} s, total {secs:.0} s (<= {budget:.0} s)",
                    run.aggregate, run.train_seconds
                ),
            );
            latent_sanity(&mut ledger, &run);
            match run.speedup {
                Some(x) => ledger.record("8 speed-up", x >= 10.0, format!("online evaluation {x:.1}x faster than the solver on the same 64 trajectories (>= 10x)")),
                None => ledger.record("8 speed-up", false, "no solver timings recorded".into()),
            }
            mesh_free(&mut ledger, &run);
        }
        Err(e) => {
            for label in [name, "6 latent smoothness", "8 speed-up", "9 mesh-free query"] {
                ledger.error(label, &e);
            }
        }
    }

    if full {
        multiscale(&mut ledger);
    } else {
        ledger.skip("7 multiscale grids", "long-running; set LATENT_ROM_ACCEPTANCE=full");
    }

    let failed: Vec<&Outcome> = ledger.outcomes.iter().filter(|o| !o.pass).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.0} s",
        ledger.outcomes.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    for o in &failed {
        eprintln!("failed: {}: {}", o.label, o.detail);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
