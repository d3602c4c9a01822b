//! Prediction at unseen parameters and arbitrary coordinates, the relative
//! L2 error metric, and test-set evaluation.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array3, ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamStore};
use crate::dataio::{Dataset, FieldTrajectory, ModelBundle};
use crate::error::{Error, Result};
use crate::idmodel::{solve_latent_ode, IdModel};
use crate::interp::{interpolate_coefficients, DistanceSpace, InterpolationResult};
use crate::networks::{EvalWorkspace, Tldnet};

/// Query points are pushed through the reconstruction network this many
/// rows at a time.
const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRequest {
    /// Raw parameter values.
    pub mu: Vec<f64>,
    /// `M x d` raw coordinates.
    pub coords: Matrix,
    /// Defaults to the bundle's training grid; any other grid must match it.
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub trajectory: FieldTrajectory,
    pub coefficients: InterpolationResult,
    /// `(N_t + 1) x N_s`
    pub latent: Matrix,
    pub wall_clock: f64,
}

/// A bundle with its networks bound, ready for repeated queries.
pub struct Predictor<'a> {
    bundle: &'a ModelBundle,
    net: Tldnet,
    knn_points: Vec<Vec<f64>>,
    relative_times: Vec<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let net = Tldnet::bind(&bundle.architecture, &bundle.params)?;
        let knn_points = match bundle.knn.space {
            DistanceSpace::Normalized => bundle.training_mus.iter().map(|m| bundle.normalizers.mu.normalize(m)).collect(),
            DistanceSpace::Raw => bundle.training_mus.clone(),
        };
        let t0 = bundle.times.first().copied().unwrap_or(0.0);
        let relative_times = bundle.times.iter().map(|t| t - t0).collect();
        Ok(Self { bundle, net, knn_points, relative_times })
    }

    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    fn check(&self, request: &PredictionRequest) -> Result<()> {
        let arch = &self.bundle.architecture;
        if request.mu.len() != arch.param_dim {
            return Err(Error::dim("query parameter", arch.param_dim, request.mu.len()));
        }
        if request.coords.ncols() != arch.space_dim {
            return Err(Error::dim("query coordinates", arch.space_dim, request.coords.ncols()));
        }
        if request.mu.iter().chain(request.coords.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("query contains non-finite values".into()));
        }
        if let Some(times) = &request.times {
            let same = times.len() == self.bundle.times.len()
                && times.iter().zip(&self.bundle.times).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0));
            if !same {
                return Err(Error::InvalidInput("requested time grid differs from the training grid".into()));
            }
        }
        Ok(())
    }

    /// Coefficients and latent trajectory at `mu` (raw).
    pub fn latent(&self, mu: &[f64]) -> Result<(InterpolationResult, Matrix)> {
        let b = self.bundle;
        let mu_norm = b.normalizers.mu.normalize(mu);
        let query = match b.knn.space {
            DistanceSpace::Normalized => mu_norm.clone(),
            DistanceSpace::Raw => mu.to_vec(),
        };
        let coefficients = interpolate_coefficients(&query, &self.knn_points, &b.coefficients, &b.knn)?;
        let z0 = self.net.initial_state(&b.params, &mu_norm)?;
        let model = IdModel::new(b.library.clone(), coefficients.xi.clone(), mu.to_vec())?;
        let latent = solve_latent_ode(&model, &z0, &self.relative_times).map_err(|e| match e {
            Error::Divergence { step, detail } => Error::Divergence { step, detail: format!("latent ODE at mu = {mu:?}: {detail}") },
            e => e,
        })?;
        Ok((coefficients, latent))
    }

    pub fn predict(&self, request: &PredictionRequest) -> Result<Prediction> {
        let start = Instant::now();
        self.check(request)?;
        let b = self.bundle;
        let (coefficients, latent) = self.latent(&request.mu)?;
        let mu_norm = b.normalizers.mu.normalize(&request.mu);
        let coords = b.normalizers.x.normalize_rows(request.coords.view())?;
        let fields = reconstruct_fields(&self.net, &b.params, &latent, &mu_norm, &coords, b)?;
        Ok(Prediction {
            trajectory: FieldTrajectory {
                id: format!("predicted-{}", format_mu(&request.mu)),
                mu: request.mu.clone(),
                coords: request.coords.clone(),
                fields,
                grid: None,
                wall_clock: Some(start.elapsed().as_secs_f64()),
            },
            coefficients,
            latent,
            wall_clock: start.elapsed().as_secs_f64(),
        })
    }
}

fn format_mu(mu: &[f64]) -> String {
    mu.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join("_")
}

/// Decode every latent state at every coordinate and undo the field scaling.
fn reconstruct_fields(net: &Tldnet, store: &ParamStore, latent: &Matrix, mu_norm: &[f64], coords: &Matrix, bundle: &ModelBundle) -> Result<Array3<f64>> {
    let (levels, ns) = latent.dim();
    let n_points = coords.nrows();
    let nd = mu_norm.len();
    let nf = bundle.architecture.field_dim;
    let mut fields = Array3::zeros((levels, n_points, nf));
    let mut input = Matrix::zeros((n_points, ns + nd + coords.ncols()));
    input.slice_mut(s![.., ns..ns + nd]).assign(&ndarray::aview1(mu_norm));
    input.slice_mut(s![.., ns + nd..]).assign(coords);
    let mut ws = EvalWorkspace::default();
    for m in 0..levels {
        input.slice_mut(s![.., ..ns]).assign(&latent.row(m));
        for start in (0..n_points).step_by(CHUNK_ROWS) {
            let end = (start + CHUNK_ROWS).min(n_points);
            let out = net.reconstruction.eval_with(store, input.slice(s![start..end, ..]), &mut ws)?;
            let mut dest = fields.slice_mut(s![m, start..end, ..]);
            dest.assign(out);
            for mut row in dest.rows_mut() {
                for ((x, r), w) in row.iter_mut().zip(&bundle.normalizers.u.reference).zip(&bundle.normalizers.u.half_range) {
                    *x = *x * w + r;
                }
            }
        }
    }
    Ok(fields)
}

/// One-shot prediction.
pub fn predict(bundle: &ModelBundle, request: &PredictionRequest) -> Result<Prediction> {
    Predictor::new(bundle)?.predict(request)
}

/// `100 * |pred - truth|_F / |truth|_F`.
pub fn l2_rate<S1, S2, D>(pred: &ArrayBase<S1, D>, truth: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let mut acc = L2Accumulator::default();
    acc.add(pred, truth)?;
    acc.rate()
}

/// Running sums for an L2 rate over concatenated fields.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct L2Accumulator {
    pub error_sq: f64,
    pub truth_sq: f64,
}

impl L2Accumulator {
    pub fn add<S1, S2, D>(&mut self, pred: &ArrayBase<S1, D>, truth: &ArrayBase<S2, D>) -> Result<()>
    where
        S1: Data<Elem = f64>,
        S2: Data<Elem = f64>,
        D: Dimension,
    {
        if pred.shape() != truth.shape() {
            return Err(Error::dim("prediction against truth", format!("{:?}", truth.shape()), format!("{:?}", pred.shape())));
        }
        ndarray::Zip::from(pred).and(truth).for_each(|&p, &t| {
            self.error_sq += (p - t) * (p - t);
            self.truth_sq += t * t;
        });
        Ok(())
    }

    pub fn merge(&mut self, other: &L2Accumulator) {
        self.error_sq += other.error_sq;
        self.truth_sq += other.truth_sq;
    }

    pub fn rate(&self) -> Result<f64> {
        if !(self.truth_sq > 0.0) {
            return Err(Error::InvalidInput("reference field has zero norm".into()));
        }
        Ok((self.error_sq / self.truth_sq).sqrt() * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationEntry {
    pub id: String,
    pub mu: Vec<f64>,
    pub l2: f64,
    pub predict_seconds: f64,
    pub solver_seconds: Option<f64>,
    #[serde(skip)]
    pub sums: L2Accumulator,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub entries: Vec<EvaluationEntry>,
    /// L2 rate over all evaluated fields concatenated.
    pub aggregate_l2: Option<f64>,
    pub predict_seconds: f64,
    /// Solver time for the evaluated trajectories, when every one recorded it.
    pub solver_seconds: Option<f64>,
    pub speedup: Option<f64>,
    /// Requested parameters without a truth trajectory.
    pub missing: Vec<Vec<f64>>,
}

impl EvaluationReport {
    pub fn is_partial(&self) -> bool {
        !self.missing.is_empty()
    }

    pub fn push(&mut self, entry: EvaluationEntry) {
        self.entries.push(entry);
        self.finish();
    }

    fn finish(&mut self) {
        let mut acc = L2Accumulator::default();
        for e in &self.entries {
            acc.merge(&e.sums);
        }
        self.aggregate_l2 = acc.rate().ok();
        self.predict_seconds = self.entries.iter().map(|e| e.predict_seconds).sum();
        self.solver_seconds = self.entries.iter().map(|e| e.solver_seconds).sum::<Option<f64>>();
        self.speedup = self.solver_seconds.filter(|_| self.predict_seconds > 0.0).map(|s| s / self.predict_seconds);
    }

    /// One row per trajectory, then an `aggregate` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Format { path: path.into(), detail: e.to_string() };
        let nd = self.entries.first().map_or(0, |e| e.mu.len());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["id".to_string()];
        header.extend((0..nd).map(|j| format!("mu{j}")));
        header.extend(["l2_percent", "predict_seconds", "solver_seconds", "speedup"].map(String::from));
        w.write_record(&header).map_err(err)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for e in &self.entries {
            let mut rec = vec![e.id.clone()];
            rec.extend(e.mu.iter().map(|v| v.to_string()));
            let speedup = e.solver_seconds.filter(|_| e.predict_seconds > 0.0).map(|s| s / e.predict_seconds);
            rec.extend([e.l2.to_string(), e.predict_seconds.to_string(), opt(e.solver_seconds), opt(speedup)]);
            w.write_record(&rec).map_err(err)?;
        }
        for m in &self.missing {
            let mut rec = vec!["missing".to_string()];
            rec.extend(m.iter().map(|v| v.to_string()));
            rec.extend([String::new(), String::new(), String::new(), String::new()]);
            w.write_record(&rec).map_err(err)?;
        }
        let mut rec = vec!["aggregate".to_string()];
        rec.extend(std::iter::repeat_n(String::new(), nd));
        rec.extend([opt(self.aggregate_l2), self.predict_seconds.to_string(), opt(self.solver_seconds), opt(self.speedup)]);
        w.write_record(&rec).map_err(err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Predict on the truth trajectory's own coordinates and score it. Only the
/// prediction itself is timed.
pub fn evaluate_trajectory(predictor: &Predictor<'_>, truth: &FieldTrajectory) -> Result<EvaluationEntry> {
    let request = PredictionRequest { mu: truth.mu.clone(), coords: truth.coords.clone(), times: None };
    let prediction = predictor.predict(&request)?;
    let mut sums = L2Accumulator::default();
    sums.add(&prediction.trajectory.fields, &truth.fields)?;
    Ok(EvaluationEntry {
        id: truth.id.clone(),
        mu: truth.mu.clone(),
        l2: sums.rate()?,
        predict_seconds: prediction.wall_clock,
        solver_seconds: truth.wall_clock,
        sums,
    })
}

/// Score every requested parameter point that has a truth trajectory
/// (matched to 1e-12); the rest are listed as missing.
pub fn evaluate_testset(bundle: &ModelBundle, truth: &Dataset, test_mus: &[Vec<f64>]) -> Result<EvaluationReport> {
    let predictor = Predictor::new(bundle)?;
    if truth.times.len() != bundle.times.len() {
        return Err(Error::dim("truth time levels", bundle.times.len(), truth.times.len()));
    }
    let mut report = EvaluationReport::default();
    for mu in test_mus {
        let found = truth
            .trajectories
            .iter()
            .find(|t| t.mu.len() == mu.len() && t.mu.iter().zip(mu).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0)));
        match found {
            Some(t) => report.entries.push(evaluate_trajectory(&predictor, t)?),
            None => {
                log::warn!("no truth trajectory for mu = {mu:?}");
                report.missing.push(mu.clone());
            }
        }
    }
    report.finish();
    Ok(report)
}
