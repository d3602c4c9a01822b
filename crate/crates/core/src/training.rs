//! Normalisation, the joint loss, Adam with step decay, and the training
//! loop with its periodic latent-consistency stopping check.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use ndarray::{Array3, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::dataio::{Dataset, ModelBundle};
use crate::error::{Error, Result};
use crate::idmodel::{id_loss_on_tape, solve_latent_ode, IdModel, LibrarySpec};
use crate::interp::KnnConfig;
use crate::networks::{build_networks, rollout_on_tape, ArchitectureSpec, TapeRollout, Tldnet};

/// Componentwise affine map `v -> (v - reference) / half_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub reference: Vec<f64>,
    pub half_range: Vec<f64>,
}

impl Normalizer {
    /// Midpoint and half-width of `[min, max]`. Intervals centred on the
    /// origin have both scaled by `range_scale`.
    pub fn from_bounds(min: &[f64], max: &[f64], range_scale: f64) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::dim("normaliser bounds", min.len(), max.len()));
        }
        if !(range_scale > 0.0) || !range_scale.is_finite() {
            return Err(Error::Spec(format!("range multiplier must be positive, got {range_scale}")));
        }
        let mut reference = Vec::with_capacity(min.len());
        let mut half_range = Vec::with_capacity(min.len());
        for (c, (&lo, &hi)) in min.iter().zip(max).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || hi < lo {
                return Err(Error::InvalidInput(format!("invalid range [{lo}, {hi}] for component {c}")));
            }
            let mut r = 0.5 * (lo + hi);
            let mut w = 0.5 * (hi - lo);
            if w <= f64::EPSILON * r.abs().max(1.0) {
                w = 1e-8 * r.abs().max(1.0);
                log::warn!("component {c} has a degenerate range [{lo}, {hi}]; widening half-range to {w:e}");
            } else if (lo + hi).abs() <= 1e-12 * (hi - lo) {
                r *= range_scale;
                w *= range_scale;
            }
            reference.push(r);
            half_range.push(w);
        }
        Ok(Self { reference, half_range })
    }

    /// Bounds taken columnwise from `rows`.
    pub fn from_rows(rows: ArrayView2<f64>, range_scale: f64) -> Result<Self> {
        let mut lo = vec![f64::INFINITY; rows.ncols()];
        let mut hi = vec![f64::NEG_INFINITY; rows.ncols()];
        for r in rows.rows() {
            for (c, &v) in r.iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        Self::from_bounds(&lo, &hi, range_scale)
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.reference).zip(&self.half_range).map(|((x, r), w)| (x - r) / w).collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.reference).zip(&self.half_range).map(|((x, r), w)| x * w + r).collect()
    }

    /// Normalise every row of `m` (`n x dim`).
    pub fn normalize_rows(&self, m: ArrayView2<f64>) -> Result<Matrix> {
        self.check_width(m.ncols())?;
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            for ((x, r), w) in row.iter_mut().zip(&self.reference).zip(&self.half_range) {
                *x = (*x - r) / w;
            }
        }
        Ok(out)
    }

    pub fn denormalize_in_place(&self, m: &mut Matrix) -> Result<()> {
        self.check_width(m.ncols())?;
        for mut row in m.rows_mut() {
            for ((x, r), w) in row.iter_mut().zip(&self.reference).zip(&self.half_range) {
                *x = *x * w + r;
            }
        }
        Ok(())
    }

    fn check_width(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::dim("normaliser width", self.dim(), n));
        }
        Ok(())
    }
}

/// Normalisers for parameters, coordinates, and field components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub mu: Normalizer,
    pub x: Normalizer,
    pub u: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub max_iterations: usize,
    pub check_every: usize,
    /// Latent relative error bound in percent.
    pub tol_latent: f64,
    pub tol_loss: f64,
    pub weight_id: f64,
    pub weight_z0: f64,
    pub weight_coef: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    /// Spatial points drawn per trajectory and time level each iteration;
    /// `None` uses every point.
    pub points_per_snapshot: Option<usize>,
    pub range_scale: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_iterations: 6000,
            check_every: 500,
            tol_latent: 1.0,
            tol_loss: 1e-4,
            weight_id: 0.05,
            weight_z0: 0.5,
            weight_coef: 0.0,
            learning_rate: 0.05,
            lr_decay: 0.6,
            lr_period: 500,
            points_per_snapshot: Some(12),
            range_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.check_every == 0 || self.lr_period == 0 {
            return Err(Error::Spec("iteration count, check cadence and decay period must be at least 1".into()));
        }
        for (name, w) in [("weight_id", self.weight_id), ("weight_z0", self.weight_z0), ("weight_coef", self.weight_coef)] {
            if !(w >= 0.0) {
                return Err(Error::Spec(format!("{name} must be non-negative, got {w}")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Spec("learning rate and decay factor must be positive".into()));
        }
        if self.points_per_snapshot == Some(0) {
            return Err(Error::Spec("points_per_snapshot must be at least 1".into()));
        }
        if self.tol_latent.is_nan() || self.tol_loss.is_nan() {
            return Err(Error::Spec("tolerances must not be NaN".into()));
        }
        Ok(())
    }
}

/// `lr0 * factor^floor(iteration / period)`, with `iteration` counted from 0.
pub fn lr_schedule(iteration: usize, lr0: f64, factor: f64, period: usize) -> f64 {
    lr0 * factor.powi((iteration / period.max(1)) as i32)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.blocks().iter().map(|b| Matrix::zeros(b.value.raw_dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Apply one update using the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((block, m), v) in store.blocks_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut block.value).and(&block.grad).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Normalised training arrays.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub times: Vec<f64>,
    pub dt: f64,
    pub mus: Vec<Vec<f64>>,
    /// `B x N_D`
    pub mu_norm: Matrix,
    /// Per trajectory, `N_u x d`.
    pub coords: Vec<Matrix>,
    /// Per trajectory, `(N_t + 1) x N_u x N_f`.
    pub fields: Vec<Array3<f64>>,
    pub normalizers: Normalizers,
}

/// Check that `times` is uniform and return its step.
pub fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::InvalidInput("need at least two time levels".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("time grid must be increasing".into()));
    }
    for (m, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::InvalidInput(format!("time grid is not uniform at level {}", m + 1)));
        }
    }
    Ok(dt)
}

impl TrainingData {
    pub fn prepare(dataset: &Dataset, range_scale: f64) -> Result<Self> {
        let trajs = &dataset.trajectories;
        if trajs.is_empty() {
            return Err(Error::InvalidInput("training dataset has no trajectories".into()));
        }
        let dt = uniform_step(&dataset.times)?;
        let nd = trajs[0].mu.len();
        let nf = dataset.fields.len();
        let d = dataset.domain_box.len();
        let mut mu_raw = Matrix::zeros((trajs.len(), nd));
        let mut u_lo = vec![f64::INFINITY; nf];
        let mut u_hi = vec![f64::NEG_INFINITY; nf];
        for (b, t) in trajs.iter().enumerate() {
            if t.mu.len() != nd {
                return Err(Error::dim(format!("parameter vector of {}", t.id), nd, t.mu.len()));
            }
            mu_raw.row_mut(b).assign(&ndarray::aview1(&t.mu));
            t.check_shapes(dataset.times.len(), d, nf)?;
            for f in t.fields.rows() {
                for (c, &v) in f.iter().enumerate() {
                    u_lo[c] = u_lo[c].min(v);
                    u_hi[c] = u_hi[c].max(v);
                }
            }
        }
        let (box_lo, box_hi): (Vec<f64>, Vec<f64>) = dataset.domain_box.iter().map(|b| (b[0], b[1])).unzip();
        let normalizers = Normalizers {
            mu: Normalizer::from_rows(mu_raw.view(), range_scale)?,
            x: Normalizer::from_bounds(&box_lo, &box_hi, range_scale)?,
            u: Normalizer::from_bounds(&u_lo, &u_hi, range_scale)?,
        };
        let mut coords = Vec::with_capacity(trajs.len());
        let mut fields = Vec::with_capacity(trajs.len());
        for t in trajs {
            coords.push(normalizers.x.normalize_rows(t.coords.view())?);
            let mut f = t.fields.clone();
            for mut row in f.rows_mut() {
                for ((x, r), w) in row.iter_mut().zip(&normalizers.u.reference).zip(&normalizers.u.half_range) {
                    *x = (*x - r) / w;
                }
            }
            fields.push(f);
        }
        Ok(Self {
            times: dataset.times.clone(),
            dt,
            mus: trajs.iter().map(|t| t.mu.clone()).collect(),
            mu_norm: normalizers.mu.normalize_rows(mu_raw.view())?,
            coords,
            fields,
            normalizers,
        })
    }

    pub fn n_trajectories(&self) -> usize {
        self.mus.len()
    }

    pub fn n_levels(&self) -> usize {
        self.times.len()
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Rows fed to the reconstruction network in one iteration, ordered by time
/// level, then trajectory, then point.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Row of the stacked latent states (`level * B + trajectory`) for each sample.
    latent_rows: Rc<Vec<usize>>,
    /// Normalised `[mu, x]` for each sample.
    inputs: Matrix,
    target: Rc<Matrix>,
    weights: Rc<Vec<f64>>,
    initial_weights: Rc<Vec<f64>>,
    initial_rows: usize,
}

impl Batch {
    /// Every point, or `points` random points per trajectory and level.
    pub fn draw(data: &TrainingData, points: Option<usize>, rng: &mut ChaCha8Rng) -> Self {
        let b_count = data.n_trajectories();
        let levels = data.n_levels();
        let nd = data.mu_norm.ncols();
        let d = data.coords[0].ncols();
        let nf = data.fields[0].dim().2;
        let counts: Vec<usize> = data.coords.iter().map(|c| points.map_or(c.nrows(), |s| s.min(c.nrows()))).collect();
        let per_level: usize = counts.iter().sum();
        let rows = per_level * levels;
        let mut latent_rows = Vec::with_capacity(rows);
        let mut inputs = Matrix::zeros((rows, nd + d));
        let mut target = Matrix::zeros((rows, nf));
        let mut weights = Vec::with_capacity(rows);
        let mut r = 0;
        let mut picked: Vec<usize> = Vec::new();
        for m in 0..levels {
            for b in 0..b_count {
                let n_u = data.coords[b].nrows();
                picked.clear();
                if counts[b] == n_u {
                    picked.extend(0..n_u);
                } else {
                    picked.extend(sample(rng, n_u, counts[b]).iter());
                }
                let w = 1.0 / (b_count * levels * counts[b]) as f64;
                for &k in &picked {
                    latent_rows.push(m * b_count + b);
                    let mut row = inputs.row_mut(r);
                    for j in 0..nd {
                        row[j] = data.mu_norm[[b, j]];
                    }
                    for j in 0..d {
                        row[nd + j] = data.coords[b][[k, j]];
                    }
                    for c in 0..nf {
                        target[[r, c]] = data.fields[b][[m, k, c]];
                    }
                    weights.push(w);
                    r += 1;
                }
            }
        }
        let initial_weights = counts.iter().flat_map(|&c| std::iter::repeat_n(1.0 / (b_count * c) as f64, c)).collect();
        Self {
            latent_rows: Rc::new(latent_rows),
            inputs,
            target: Rc::new(target),
            weights: Rc::new(weights),
            initial_weights: Rc::new(initial_weights),
            initial_rows: per_level,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Values of the loss terms; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub initial: f64,
    pub identification: f64,
    pub coefficients: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:e} rec={:e} z0={:e} id={:e} coef={:e}",
            self.total, self.reconstruction, self.initial, self.identification, self.coefficients
        )
    }
}

/// Nodes of one recorded loss evaluation.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub initial: NodeId,
    pub identification: NodeId,
    pub coefficients: NodeId,
    pub rollout: TapeRollout,
}

impl LossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            reconstruction: tape.scalar(self.reconstruction),
            initial: tape.scalar(self.initial),
            identification: tape.scalar(self.identification),
            coefficients: tape.scalar(self.coefficients),
        }
    }
}

/// Name of the coefficient block for training trajectory `i`.
pub fn coefficient_block(i: usize) -> String {
    format!("xi.{i}")
}

/// Record the joint loss
/// `rec + w_z0 * z0 + w_id * id + w_coef * sum_i |Xi_i|_F^2` on `tape`.
pub fn record_total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    net: &Tldnet,
    library: &LibrarySpec,
    xi_ids: &[ParamId],
    data: &TrainingData,
    batch: &Batch,
    config: &TrainingConfig,
) -> Result<LossGraph> {
    let b_count = data.n_trajectories();
    if xi_ids.len() != b_count {
        return Err(Error::dim("coefficient blocks", b_count, xi_ids.len()));
    }
    let dyn_net = net.dynamics.record(tape, store);
    let rec_net = net.reconstruction.record(tape, store);
    let z0_net = net.initial.record(tape, store);
    let mu = tape.input(data.mu_norm.clone());
    let z0 = z0_net.forward(tape, mu)?;
    let rollout = rollout_on_tape(tape, &dyn_net, &net.spec, z0, mu, data.dt, data.n_steps())?;

    let z_all = tape.concat_rows(&rollout.states)?;
    let z_rows = tape.gather_rows(z_all, batch.latent_rows.clone())?;
    let fixed = tape.input(batch.inputs.clone());
    let rec_in = tape.concat_cols(&[z_rows, fixed])?;
    let rec_out = rec_net.forward(tape, rec_in)?;
    let reconstruction = tape.weighted_squared_error(rec_out, batch.target.clone(), batch.weights.clone())?;

    let first_rows = Rc::new((0..batch.initial_rows).collect::<Vec<_>>());
    let rec_initial = tape.gather_rows(rec_out, first_rows)?;
    let target_initial = Rc::new(batch.target.slice(ndarray::s![..batch.initial_rows, ..]).to_owned());
    let initial = tape.weighted_squared_error(rec_initial, target_initial, batch.initial_weights.clone())?;

    let xi: Vec<NodeId> = xi_ids.iter().map(|&id| tape.param(store, id)).collect();
    let identification = id_loss_on_tape(tape, &rollout.states, &rollout.first, &xi, library)?;

    let mut coefficients = tape.sum_squares(xi[0]);
    for &x in &xi[1..] {
        let s = tape.sum_squares(x);
        coefficients = tape.add(coefficients, s)?;
    }

    let mut total = reconstruction;
    for (node, w) in [(initial, config.weight_z0), (identification, config.weight_id), (coefficients, config.weight_coef)] {
        let scaled = tape.scale(node, w);
        total = tape.add(total, scaled)?;
    }
    Ok(LossGraph { total, reconstruction, initial, identification, coefficients, rollout })
}

/// Evaluate the joint loss on `batch` without touching gradients.
pub fn total_loss(
    store: &ParamStore,
    net: &Tldnet,
    library: &LibrarySpec,
    xi_ids: &[ParamId],
    data: &TrainingData,
    batch: &Batch,
    config: &TrainingConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let g = record_total_loss(&mut tape, store, net, library, xi_ids, data, batch, config)?;
    Ok(g.breakdown(&tape))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopStatus {
    Converged,
    MaxIterations,
}

impl std::fmt::Display for StopStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopStatus::Converged => "converged",
            StopStatus::MaxIterations => "max-iterations",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub status: StopStatus,
    pub iterations: usize,
    pub final_loss: LossBreakdown,
    /// Latent relative error (percent) at the last check.
    pub latent_l2: Option<f64>,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub reconstruction: f64,
    pub initial: f64,
    pub identification: f64,
    pub coefficients: f64,
    pub latent_l2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format { path: path.into(), detail: e.to_string() })?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format { path: path.into(), detail: e.to_string() })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Training failed; `checkpoint` holds the model as of the last successful check.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: Error,
    pub checkpoint: Option<Box<ModelBundle>>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, checkpoint: None }
    }
}

/// Latent relative error (percent) between the rollout states and the
/// identified ODEs integrated from each trajectory's initial state.
pub fn latent_consistency(
    states: &[Matrix],
    coefficients: &[Matrix],
    library: &LibrarySpec,
    times: &[f64],
) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (z, xi) in states.iter().zip(coefficients) {
        let model = IdModel::new(library.clone(), xi.clone(), Vec::new())?;
        let z0 = z.row(0).to_vec();
        let resolved = match solve_latent_ode(&model, &z0, times) {
            Ok(r) => r,
            Err(Error::Divergence { .. }) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        num += (&resolved - z).iter().map(|v| v * v).sum::<f64>();
        den += z.iter().map(|v| v * v).sum::<f64>();
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt() * 100.0)
}

/// Per-trajectory state histories from a recorded rollout.
fn rollout_states(tape: &Tape, rollout: &TapeRollout, b_count: usize) -> Vec<Matrix> {
    let levels = rollout.states.len();
    let ns = tape.value(rollout.states[0]).ncols();
    let mut out = vec![Matrix::zeros((levels, ns)); b_count];
    for (m, &node) in rollout.states.iter().enumerate() {
        let v = tape.value(node);
        for (b, traj) in out.iter_mut().enumerate() {
            traj.row_mut(m).assign(&v.row(b));
        }
    }
    out
}

struct Session<'a> {
    arch: &'a ArchitectureSpec,
    library: &'a LibrarySpec,
    config: &'a TrainingConfig,
    data: TrainingData,
    store: ParamStore,
    xi_ids: Vec<ParamId>,
}

impl Session<'_> {
    fn bundle(&self, log: &TrainingLog, summary: TrainingSummary) -> ModelBundle {
        let params = self.store.subset(|n| !n.starts_with("xi."));
        let coefficients = self.xi_ids.iter().map(|&id| self.store.value(id).clone()).collect();
        ModelBundle {
            architecture: self.arch.clone(),
            library: self.library.clone(),
            params,
            normalizers: self.data.normalizers.clone(),
            training_mus: self.data.mus.clone(),
            coefficients,
            times: self.data.times.clone(),
            training: self.config.clone(),
            knn: KnnConfig::default(),
            summary,
            log: log.clone(),
        }
    }
}

/// Jointly fit the three networks and one coefficient matrix per training
/// trajectory.
pub fn train(
    dataset: &Dataset,
    arch: &ArchitectureSpec,
    library: &LibrarySpec,
    config: &TrainingConfig,
) -> std::result::Result<ModelBundle, TrainFailure> {
    config.validate()?;
    arch.validate()?;
    let data = TrainingData::prepare(dataset, config.range_scale)?;
    if data.mu_norm.ncols() != arch.param_dim
        || data.coords[0].ncols() != arch.space_dim
        || data.fields[0].dim().2 != arch.field_dim
    {
        return Err(Error::dim(
            "dataset against architecture (param, space, field)",
            format!("({}, {}, {})", arch.param_dim, arch.space_dim, arch.field_dim),
            format!("({}, {}, {})", data.mu_norm.ncols(), data.coords[0].ncols(), data.fields[0].dim().2),
        )
        .into());
    }
    let mut store = build_networks(arch, config.seed)?;
    let nb = library.n_columns(arch.latent_dim);
    let xi_ids = (0..data.n_trajectories())
        .map(|i| store.insert(coefficient_block(i), Matrix::zeros((nb, arch.latent_dim))))
        .collect::<Result<Vec<_>>>()?;
    let net = Tldnet::bind(arch, &store)?;
    let mut session = Session { arch, library, config, data, store, xi_ids };
    run(&mut session, &net)
}

fn run(s: &mut Session<'_>, net: &Tldnet) -> std::result::Result<ModelBundle, TrainFailure> {
    let start = Instant::now();
    let config = s.config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut adam = Adam::new(&s.store);
    let mut log = TrainingLog::default();
    let mut last = LossBreakdown::default();
    let mut latent_l2 = None;
    let b_count = s.data.n_trajectories();
    let relative_times: Vec<f64> = s.data.times.iter().map(|t| t - s.data.times[0]).collect();
    let unchecked = TrainingSummary {
        status: StopStatus::MaxIterations,
        iterations: 0,
        final_loss: LossBreakdown::default(),
        latent_l2: None,
        wall_clock: 0.0,
    };
    let mut checkpoint = Box::new(s.bundle(&log, unchecked));
    let fail = |error: Error, checkpoint: &ModelBundle| TrainFailure { error, checkpoint: Some(Box::new(checkpoint.clone())) };

    for i in 1..=config.max_iterations {
        let lr = lr_schedule(i - 1, config.learning_rate, config.lr_decay, config.lr_period);
        let batch = Batch::draw(&s.data, config.points_per_snapshot, &mut rng);
        let mut tape = Tape::new();
        let graph = match record_total_loss(&mut tape, &s.store, net, s.library, &s.xi_ids, &s.data, &batch, config) {
            Ok(g) => g,
            Err(Error::Divergence { detail, .. }) => return Err(fail(Error::Divergence { step: i, detail }, &checkpoint)),
            Err(e) => return Err(fail(e, &checkpoint)),
        };
        last = graph.breakdown(&tape);
        if !last.total.is_finite() {
            return Err(fail(Error::Divergence { step: i, detail: format!("non-finite loss ({last})") }, &checkpoint));
        }
        let mut row = LogRow {
            iteration: i,
            lr,
            total: last.total,
            reconstruction: last.reconstruction,
            initial: last.initial,
            identification: last.identification,
            coefficients: last.coefficients,
            latent_l2: None,
        };
        if i % config.check_every == 0 {
            let states = rollout_states(&tape, &graph.rollout, b_count);
            let xis: Vec<Matrix> = s.xi_ids.iter().map(|&id| s.store.value(id).clone()).collect();
            let r = latent_consistency(&states, &xis, s.library, &relative_times).map_err(|e| fail(e, &checkpoint))?;
            row.latent_l2 = Some(r);
            latent_l2 = Some(r);
            log.rows.push(row);
            log::info!("iteration {i}: {last}, latent error {r:.4}%");
            let summary = TrainingSummary {
                status: StopStatus::Converged,
                iterations: i,
                final_loss: last,
                latent_l2,
                wall_clock: start.elapsed().as_secs_f64(),
            };
            if r <= config.tol_latent && last.total <= config.tol_loss {
                return Ok(s.bundle(&log, summary));
            }
            checkpoint = Box::new(s.bundle(&log, TrainingSummary { status: StopStatus::MaxIterations, ..summary }));
        } else {
            log.rows.push(row);
        }

        s.store.zero_grad();
        tape.backward_scalar(graph.total, 1.0, &mut s.store).map_err(|e| fail(e, &checkpoint))?;
        adam.step(&mut s.store, lr);
    }

    let summary = TrainingSummary {
        status: StopStatus::MaxIterations,
        iterations: config.max_iterations,
        final_loss: last,
        latent_l2,
        wall_clock: start.elapsed().as_secs_f64(),
    };
    log::info!("stopped at the iteration limit: {last}");
    Ok(s.bundle(&log, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::FieldTrajectory;
    use approx::assert_abs_diff_eq;

    fn toy_dataset(n_traj: usize) -> Dataset {
        let times: Vec<f64> = (0..6).map(|m| m as f64 * 0.1).collect();
        let xs: Vec<f64> = (0..10).map(|k| k as f64 / 9.0).collect();
        let mut ds = Dataset::new(vec![[0.0, 1.0]], times.clone(), vec!["u".into()]);
        for b in 0..n_traj {
            let mu = 1.0 + b as f64 / (n_traj.max(2) - 1) as f64;
            let fields = Array3::from_shape_fn((times.len(), xs.len(), 1), |(m, k, _)| {
                (-mu * times[m]).exp() * (std::f64::consts::PI * xs[k]).sin()
            });
            ds.push(FieldTrajectory {
                id: format!("t{b}"),
                mu: vec![mu],
                coords: Matrix::from_shape_vec((xs.len(), 1), xs.clone()).unwrap(),
                fields,
                grid: None,
                wall_clock: None,
            })
            .unwrap();
        }
        ds
    }

    fn toy_arch() -> ArchitectureSpec {
        ArchitectureSpec::standard(2, 1, 1, 1, 2)
    }

    #[test]
    fn step_decay_schedule() {
        assert_eq!(lr_schedule(0, 0.05, 0.6, 500), 0.05);
        assert_eq!(lr_schedule(499, 0.05, 0.6, 500), 0.05);
        assert_abs_diff_eq!(lr_schedule(500, 0.05, 0.6, 500), 0.03, epsilon = 1e-15);
        assert_abs_diff_eq!(lr_schedule(1000, 0.05, 0.6, 500), 0.018, epsilon = 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_and_unit_gradient_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::from_elem((2, 3), 0.5)).unwrap();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1);
        assert_eq!(store.value(id), &Matrix::from_elem((2, 3), 0.5));
        store.accumulate_grad(id, &Matrix::from_elem((2, 3), 1.0));
        adam.step(&mut store, 0.1);
        assert_eq!(adam.steps(), 2);
        for &v in store.value(id) {
            assert_abs_diff_eq!(v, 0.5 - 0.1 * (0.1 / 0.19) / ((0.001 / 0.001999f64).sqrt() + 1e-8), epsilon = 1e-12);
        }
    }

    #[test]
    fn normaliser_examples() {
        let n = Normalizer::from_bounds(&[0.0, 2.0], &[2.0, 6.0], 1.0).unwrap();
        assert_eq!(n.reference, vec![1.0, 4.0]);
        assert_eq!(n.half_range, vec![1.0, 2.0]);
        assert_eq!(n.normalize(&[0.0, 6.0]), vec![-1.0, 1.0]);
        let v = [0.37, 5.1];
        let back = n.denormalize(&n.normalize(&v));
        assert_abs_diff_eq!(back[0], v[0], epsilon = 1e-15);
        assert_abs_diff_eq!(back[1], v[1], epsilon = 1e-15);

        let s = Normalizer::from_bounds(&[-3.0], &[3.0], 2.0).unwrap();
        assert_eq!(s.reference, vec![0.0]);
        assert_eq!(s.half_range, vec![6.0]);

        let d = Normalizer::from_bounds(&[5.0], &[5.0], 1.0).unwrap();
        assert_abs_diff_eq!(d.half_range[0], 5e-8, epsilon = 1e-20);
        assert!(Normalizer::from_bounds(&[1.0], &[0.0], 1.0).is_err());
        assert!(Normalizer::from_bounds(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn prepared_data_lies_in_the_unit_box() {
        let data = TrainingData::prepare(&toy_dataset(3), 1.0).unwrap();
        assert_eq!(data.mu_norm.column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert!(data.coords.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        assert!(data.fields.iter().flatten().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        assert_abs_diff_eq!(data.dt, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn batch_weights_sum_to_one() {
        let data = TrainingData::prepare(&toy_dataset(3), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for points in [None, Some(4)] {
            let b = Batch::draw(&data, points, &mut rng);
            assert_abs_diff_eq!(b.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(b.initial_weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_eq!(b.len(), 6 * 3 * points.unwrap_or(10));
        }
    }

    fn setup(config: &TrainingConfig) -> (ParamStore, Tldnet, Vec<ParamId>, TrainingData, Batch) {
        let arch = toy_arch();
        let data = TrainingData::prepare(&toy_dataset(3), 1.0).unwrap();
        let mut store = build_networks(&arch, 3).unwrap();
        let nb = LibrarySpec::default().n_columns(2);
        let ids = (0..3)
            .map(|i| store.insert(coefficient_block(i), Matrix::from_elem((nb, 2), 0.1 * (i as f64 + 1.0))).unwrap())
            .collect();
        let net = Tldnet::bind(&arch, &store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let batch = Batch::draw(&data, config.points_per_snapshot, &mut rng);
        (store, net, ids, data, batch)
    }

    #[test]
    fn total_is_the_weighted_sum_of_its_terms() {
        let config = TrainingConfig { weight_coef: 0.01, ..TrainingConfig::default() };
        let (store, net, ids, data, batch) = setup(&config);
        let l = total_loss(&store, &net, &LibrarySpec::default(), &ids, &data, &batch, &config).unwrap();
        let sum = l.reconstruction + config.weight_z0 * l.initial + config.weight_id * l.identification + config.weight_coef * l.coefficients;
        assert_abs_diff_eq!(l.total, sum, epsilon = 1e-12);
        assert!(l.identification > 0.0 && l.coefficients > 0.0);
        let expected_coef: f64 = ids.iter().map(|&id| store.value(id).iter().map(|v| v * v).sum::<f64>()).sum();
        assert_abs_diff_eq!(l.coefficients, expected_coef, epsilon = 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let config = TrainingConfig { weight_coef: 0.01, points_per_snapshot: Some(3), ..TrainingConfig::default() };
        let (mut store, net, ids, data, batch) = setup(&config);
        let lib = LibrarySpec::default();
        let err = crate::autodiff::finite_difference_check(&mut store, 1e-5, |tape, s| {
            record_total_loss(tape, s, &net, &lib, &ids, &data, &batch, &config).map(|g| g.total)
        })
        .unwrap();
        assert!(err < 1e-4, "relative gradient error {err}");
    }

    #[test]
    fn fifty_adam_steps_halve_the_loss() {
        let config = TrainingConfig { max_iterations: 50, check_every: 50, tol_latent: 0.0, tol_loss: 0.0, learning_rate: 0.01, points_per_snapshot: None, ..TrainingConfig::default() };
        let bundle = train(&toy_dataset(3), &toy_arch(), &LibrarySpec::default(), &config).unwrap();
        let first = bundle.log.rows[0].total;
        let last = bundle.log.rows.last().unwrap().total;
        assert!(last <= 0.5 * first, "loss went from {first} to {last}");
        assert_eq!(bundle.summary.status, StopStatus::MaxIterations);
        assert_eq!(bundle.summary.iterations, 50);
    }

    #[test]
    fn infinite_tolerances_stop_at_the_first_check() {
        let config = TrainingConfig { max_iterations: 100, check_every: 5, tol_latent: f64::INFINITY, tol_loss: f64::INFINITY, ..TrainingConfig::default() };
        let bundle = train(&toy_dataset(2), &toy_arch(), &LibrarySpec::default(), &config).unwrap();
        assert_eq!(bundle.summary.status, StopStatus::Converged);
        assert_eq!(bundle.summary.iterations, 5);
        assert_eq!(bundle.log.rows.len(), 5);
        assert!(bundle.log.rows[4].latent_l2.is_some());
        assert_eq!(bundle.coefficients.len(), 2);
        assert!(bundle.params.blocks().iter().all(|b| !b.name.starts_with("xi.")));
    }

    #[test]
    fn training_is_deterministic_and_bundles_round_trip() {
        let config = TrainingConfig { max_iterations: 6, check_every: 3, ..TrainingConfig::default() };
        let a = train(&toy_dataset(2), &toy_arch(), &LibrarySpec::default(), &config).unwrap();
        let b = train(&toy_dataset(2), &toy_arch(), &LibrarySpec::default(), &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.coefficients, b.coefficients);

        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let mut back = ModelBundle::load(dir.path()).unwrap();
        back.summary.wall_clock = a.summary.wall_clock;
        assert_eq!(back, a);
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let arch = ArchitectureSpec::standard(2, 2, 1, 1, 2);
        let err = train(&toy_dataset(2), &arch, &LibrarySpec::default(), &TrainingConfig::default()).unwrap_err();
        assert!(matches!(err.error, Error::Dimension { .. }));
        assert!(err.checkpoint.is_none());
    }
}
