//! Candidate-function libraries and per-parameter latent ODE models
//! `dz/dt = Theta(z) * Xi`.
//!
//! Library columns always appear in this order, restricted to the enabled
//! kinds:
//!
//! | kind      | columns                                          |
//! |-----------|--------------------------------------------------|
//! | constant  | `1`                                              |
//! | linear    | `z1 .. zN`                                       |
//! | quadratic | `z1*z1, z1*z2, .., z1*zN, z2*z2, .., zN*zN`      |
//! | cosine    | `cos z1 .. cos zN`                               |

use std::rc::Rc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::networks::LatentTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Constant,
    Linear,
    Quadratic,
    Cosine,
}

impl TermKind {
    pub fn columns(self, latent_dim: usize) -> usize {
        match self {
            TermKind::Constant => 1,
            TermKind::Linear | TermKind::Cosine => latent_dim,
            TermKind::Quadratic => latent_dim * (latent_dim + 1) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TermKind>", into = "Vec<TermKind>")]
pub struct LibrarySpec {
    terms: Vec<TermKind>,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        Self { terms: vec![TermKind::Constant, TermKind::Linear] }
    }
}

impl TryFrom<Vec<TermKind>> for LibrarySpec {
    type Error = Error;

    fn try_from(terms: Vec<TermKind>) -> Result<Self> {
        Self::new(&terms)
    }
}

impl From<LibrarySpec> for Vec<TermKind> {
    fn from(spec: LibrarySpec) -> Self {
        spec.terms
    }
}

impl LibrarySpec {
    /// Enabled kinds are stored in canonical column order; duplicates collapse.
    pub fn new(terms: &[TermKind]) -> Result<Self> {
        let mut terms = terms.to_vec();
        terms.sort();
        terms.dedup();
        if terms.is_empty() {
            return Err(Error::Spec("library must enable at least one term kind".into()));
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[TermKind] {
        &self.terms
    }

    pub fn has(&self, kind: TermKind) -> bool {
        self.terms.contains(&kind)
    }

    pub fn n_columns(&self, latent_dim: usize) -> usize {
        self.terms.iter().map(|k| k.columns(latent_dim)).sum()
    }

    pub fn column_names(&self, latent_dim: usize) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_columns(latent_dim));
        for kind in &self.terms {
            match kind {
                TermKind::Constant => names.push("1".to_string()),
                TermKind::Linear => names.extend((1..=latent_dim).map(|j| format!("z{j}"))),
                TermKind::Quadratic => {
                    for a in 1..=latent_dim {
                        names.extend((a..=latent_dim).map(|b| format!("z{a}*z{b}")));
                    }
                }
                TermKind::Cosine => names.extend((1..=latent_dim).map(|j| format!("cos z{j}"))),
            }
        }
        names
    }

    /// Fill `out` (length `n_columns`) with the library row at `z`.
    pub fn eval_row(&self, z: &[f64], out: &mut [f64]) {
        let mut c = 0;
        for kind in &self.terms {
            match kind {
                TermKind::Constant => {
                    out[c] = 1.0;
                    c += 1;
                }
                TermKind::Linear => {
                    out[c..c + z.len()].copy_from_slice(z);
                    c += z.len();
                }
                TermKind::Quadratic => {
                    for a in 0..z.len() {
                        for b in a..z.len() {
                            out[c] = z[a] * z[b];
                            c += 1;
                        }
                    }
                }
                TermKind::Cosine => {
                    for (o, v) in out[c..c + z.len()].iter_mut().zip(z) {
                        *o = v.cos();
                    }
                    c += z.len();
                }
            }
        }
    }
}

/// Evaluate the library on every row of `z` (`T x N_s`), giving `T x N_b`.
pub fn build_library(z: &Matrix, spec: &LibrarySpec) -> Result<Matrix> {
    if let Some(((r, c), _)) = z.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite latent state at row {r}, column {c}")));
    }
    let ns = z.ncols();
    let nb = spec.n_columns(ns);
    let mut theta = Matrix::zeros((z.nrows(), nb));
    for (zr, mut tr) in z.rows().into_iter().zip(theta.rows_mut()) {
        let zr = zr.to_vec();
        spec.eval_row(&zr, tr.as_slice_mut().expect("row-major library"));
    }
    Ok(theta)
}

/// Record the library of `z` (`B x N_s`) on a tape.
pub fn library_on_tape(tape: &mut Tape, z: NodeId, spec: &LibrarySpec) -> Result<NodeId> {
    let (rows, ns) = tape.value(z).dim();
    let mut parts = Vec::new();
    for kind in spec.terms() {
        match kind {
            TermKind::Constant => parts.push(tape.input(Matrix::ones((rows, 1)))),
            TermKind::Linear => parts.push(z),
            TermKind::Quadratic => {
                let cols: Vec<NodeId> = (0..ns).map(|j| tape.slice_cols(z, j, j + 1)).collect::<Result<_>>()?;
                for a in 0..ns {
                    for b in a..ns {
                        parts.push(tape.mul(cols[a], cols[b])?);
                    }
                }
            }
            TermKind::Cosine => parts.push(tape.cos(z)),
        }
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat_cols(&parts)
}

/// Identification loss recorded on a tape for a batch of `B` trajectories.
///
/// `states[m]` and `first[m]` are `B x N_s` nodes at time level `m`; row `b`
/// belongs to trajectory `b`, whose coefficient node is `xi[b]`. The value is
/// `(1/B) sum_b (1/N_s) sum_j sum_m (dz_bj(m) - Theta(z_b(m)) xi_b(:, j))^2`.
pub fn id_loss_on_tape(
    tape: &mut Tape,
    states: &[NodeId],
    first: &[NodeId],
    xi: &[NodeId],
    spec: &LibrarySpec,
) -> Result<NodeId> {
    if states.len() != first.len() || states.is_empty() {
        return Err(Error::dim("identification loss time levels", states.len(), first.len()));
    }
    let (batch, ns) = tape.value(states[0]).dim();
    if xi.len() != batch {
        return Err(Error::dim("identification loss coefficient count", batch, xi.len()));
    }
    let levels = states.len();
    let z_all = tape.concat_rows(states)?;
    let d_all = tape.concat_rows(first)?;
    let theta_all = library_on_tape(tape, z_all, spec)?;
    let scale = 1.0 / (batch as f64 * ns as f64);
    let mut total: Option<NodeId> = None;
    for (b, &x) in xi.iter().enumerate() {
        let index = Rc::new((0..levels).map(|m| m * batch + b).collect::<Vec<_>>());
        let theta = tape.gather_rows(theta_all, index.clone())?;
        let target = tape.gather_rows(d_all, index)?;
        let pred = tape.matmul(theta, x)?;
        let resid = tape.sub(target, pred)?;
        let sq = tape.sum_squares(resid);
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), scale))
}

/// A latent ODE model tied to one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct IdModel {
    pub library: LibrarySpec,
    /// `N_b x N_s`
    pub xi: Matrix,
    pub mu: Vec<f64>,
}

impl IdModel {
    pub fn new(library: LibrarySpec, xi: Matrix, mu: Vec<f64>) -> Result<Self> {
        let nb = library.n_columns(xi.ncols());
        if xi.nrows() != nb {
            return Err(Error::dim("coefficient matrix rows", nb, xi.nrows()));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("coefficient matrix has non-finite entries".into()));
        }
        Ok(Self { library, xi, mu })
    }

    pub fn latent_dim(&self) -> usize {
        self.xi.ncols()
    }

    /// `dz/dt` at `z`.
    pub fn rhs(&self, z: &[f64], theta: &mut [f64], out: &mut [f64]) {
        self.library.eval_row(z, theta);
        out.fill(0.0);
        for (k, &t) in theta.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(self.xi.row(k)) {
                *o += t * x;
            }
        }
    }
}

/// Plain-value identification loss, same normalisation as [`id_loss_on_tape`].
pub fn id_loss(trajectories: &[LatentTrajectory], models: &[IdModel]) -> Result<f64> {
    if trajectories.len() != models.len() {
        return Err(Error::dim("identification loss models", trajectories.len(), models.len()));
    }
    if trajectories.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (traj, model) in trajectories.iter().zip(models) {
        let ns = traj.states.ncols();
        if model.latent_dim() != ns || traj.first.dim() != traj.states.dim() {
            return Err(Error::dim("identification loss latent width", ns, model.latent_dim()));
        }
        let theta = build_library(&traj.states, &model.library)?;
        let resid = &traj.first - &theta.dot(&model.xi);
        total += resid.iter().map(|r| r * r).sum::<f64>() / ns as f64;
    }
    Ok(total / trajectories.len() as f64)
}

/// Classic fourth-order Runge-Kutta integration of the model across `times`.
///
/// Returns a `times.len() x N_s` matrix whose first row is `z0`.
pub fn solve_latent_ode(model: &IdModel, z0: &[f64], times: &[f64]) -> Result<Matrix> {
    let ns = model.latent_dim();
    if z0.len() != ns {
        return Err(Error::dim("latent ODE initial state", ns, z0.len()));
    }
    if times.is_empty() {
        return Err(Error::InvalidInput("latent ODE time grid is empty".into()));
    }
    if let Some(w) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput(format!("time grid is not strictly increasing at index {}", w + 1)));
    }
    let nb = model.library.n_columns(ns);
    let mut theta = vec![0.0; nb];
    let mut out = Matrix::zeros((times.len(), ns));
    let mut z = z0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; ns], vec![0.0; ns], vec![0.0; ns], vec![0.0; ns], vec![0.0; ns]);
    out.row_mut(0).assign(&ndarray::aview1(&z));
    for m in 1..times.len() {
        let h = times[m] - times[m - 1];
        model.rhs(&z, &mut theta, &mut k1);
        for j in 0..ns {
            tmp[j] = z[j] + 0.5 * h * k1[j];
        }
        model.rhs(&tmp, &mut theta, &mut k2);
        for j in 0..ns {
            tmp[j] = z[j] + 0.5 * h * k2[j];
        }
        model.rhs(&tmp, &mut theta, &mut k3);
        for j in 0..ns {
            tmp[j] = z[j] + h * k3[j];
        }
        model.rhs(&tmp, &mut theta, &mut k4);
        for j in 0..ns {
            z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: m, detail: "non-finite state while integrating latent ODE".into() });
        }
        out.row_mut(m).assign(&ndarray::aview1(&z));
    }
    Ok(out)
}

const RIDGE: f64 = 1e-10;

/// Least-squares fit of `Xi` to a trajectory's network derivatives.
///
/// Solves `min |dz - Theta(z) Xi|^2` through a QR factorisation of `Theta`.
/// A rank-deficient library logs a warning and falls back to the damped
/// problem `min |dz - Theta(z) Xi|^2 + 1e-10 |Xi|^2`.
pub fn fit_coefficients_least_squares(trajectory: &LatentTrajectory, spec: &LibrarySpec) -> Result<Matrix> {
    let theta = build_library(&trajectory.states, spec)?;
    let (t, nb) = theta.dim();
    let ns = trajectory.states.ncols();
    if t < nb {
        return Err(Error::InvalidInput(format!("{t} time levels cannot determine {nb} library columns")));
    }
    if trajectory.first.dim() != trajectory.states.dim() {
        return Err(Error::dim("derivative history", format!("{t}x{ns}"), format!("{:?}", trajectory.first.dim())));
    }
    let plain = DMatrix::from_fn(t, nb, |r, c| theta[[r, c]]);
    let y = DMatrix::from_fn(t, ns, |r, c| trajectory.first[[r, c]]);
    let qr = plain.qr();
    let r = qr.r();
    let diag_max = (0..nb).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let diag_min = (0..nb).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    let xi = if diag_min > 1e-8 * diag_max {
        r.solve_upper_triangular(&(qr.q().transpose() * &y))
    } else {
        log::warn!("library matrix is rank deficient (|R| ratio {:.3e}); returning ridge solution", diag_min / diag_max.max(f64::MIN_POSITIVE));
        let sqrt_ridge = RIDGE.sqrt();
        let a = DMatrix::from_fn(t + nb, nb, |r, c| if r < t { theta[[r, c]] } else if r - t == c { sqrt_ridge } else { 0.0 });
        let y = DMatrix::from_fn(t + nb, ns, |r, c| if r < t { y[(r, c)] } else { 0.0 });
        let qr = a.qr();
        qr.r().solve_upper_triangular(&(qr.q().transpose() * y))
    }
    .ok_or_else(|| Error::InvalidInput("least-squares system is singular".into()))?;
    Ok(Matrix::from_shape_fn((nb, ns), |(i, j)| xi[(i, j)]))
}
