//! Implicit finite-difference solver for the 2D viscous Burgers system
//!
//! ```text
//! u_t + u u_x + v u_y = (1/Re) (u_xx + u_yy)
//! v_t + u v_x + v v_y = (1/Re) (v_xx + v_yy)
//! ```
//!
//! on a square box with homogeneous Dirichlet walls and a Gaussian bump
//! `u = v = a exp(-(x^2 + y^2) / (2 w^2))` at `t = 0`.
//!
//! Each step is backward Euler. Convection uses first-order upwinding on the
//! sign of the lagged velocity and diffusion the 5-point Laplacian. The
//! nonlinearity is resolved by Picard iteration, and every sweep solves one
//! banded system shared by both velocity components.

use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::dataio::{Dataset, FieldTrajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurgersConfig {
    pub reynolds: f64,
    pub domain: [f64; 2],
    pub segments: usize,
    pub t_final: f64,
    pub n_steps: usize,
    pub picard_tol: f64,
    pub max_sweeps: usize,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            reynolds: 1e4,
            domain: [-3.0, 3.0],
            segments: 50,
            t_final: 1.0,
            n_steps: 200,
            picard_tol: 1e-10,
            max_sweeps: 50,
        }
    }
}

impl BurgersConfig {
    pub fn dt(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|m| m as f64 * self.dt()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reynolds > 0.0) {
            return Err(Error::Spec(format!("Reynolds number must be positive, got {}", self.reynolds)));
        }
        if !(self.domain[1] > self.domain[0]) {
            return Err(Error::Spec(format!("empty domain {:?}", self.domain)));
        }
        if self.segments < 2 {
            return Err(Error::Spec(format!("need at least 2 segments per edge, got {}", self.segments)));
        }
        if self.n_steps == 0 || !(self.t_final > 0.0) {
            return Err(Error::Spec("time horizon and step count must be positive".into()));
        }
        if self.max_sweeps == 0 || !(self.picard_tol > 0.0) {
            return Err(Error::Spec("Picard tolerance and sweep limit must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform node grid including the walls: `(segments + 1)^2` nodes, node
/// `(i, j)` at index `j * (segments + 1) + i` with `i` along `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub segments: usize,
    pub lo: f64,
    pub hi: f64,
    pub spacing: f64,
    /// `N_u x 2`
    pub coords: Matrix,
    pub boundary: Vec<bool>,
}

impl Grid {
    pub fn new(segments: usize, domain: [f64; 2]) -> Result<Self> {
        if segments < 2 {
            return Err(Error::Spec(format!("need at least 2 segments per edge, got {segments}")));
        }
        let [lo, hi] = domain;
        let n = segments + 1;
        let spacing = (hi - lo) / segments as f64;
        let pos = |i: usize| if i == segments { hi } else { lo + i as f64 * spacing };
        let coords = Matrix::from_shape_fn((n * n, 2), |(k, c)| if c == 0 { pos(k % n) } else { pos(k / n) });
        let boundary = (0..n * n)
            .map(|k| {
                let (i, j) = (k % n, k / n);
                i == 0 || j == 0 || i == segments || j == segments
            })
            .collect();
        Ok(Self { segments, lo, hi, spacing, coords, boundary })
    }

    pub fn nodes_per_edge(&self) -> usize {
        self.segments + 1
    }

    pub fn n_points(&self) -> usize {
        self.coords.nrows()
    }

    /// Cell count `segments^2`, the figure usually quoted for these grids.
    pub fn cell_count(&self) -> usize {
        self.segments * self.segments
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nodes_per_edge() + i
    }

    pub fn tag(&self) -> String {
        format!("square-{}", self.segments)
    }

    /// Bilinear interpolation of a nodal scalar field at `(x, y)` inside the box.
    pub fn bilinear(&self, values: &[f64], x: f64, y: f64) -> f64 {
        let s = self.segments;
        let locate = |p: f64| {
            let t = ((p - self.lo) / self.spacing).clamp(0.0, s as f64);
            let cell = (t.floor() as usize).min(s - 1);
            (cell, t - cell as f64)
        };
        let (i, fx) = locate(x);
        let (j, fy) = locate(y);
        let v = |a, b| values[self.index(a, b)];
        (1.0 - fx) * (1.0 - fy) * v(i, j) + fx * (1.0 - fy) * v(i + 1, j) + (1.0 - fx) * fy * v(i, j + 1) + fx * fy * v(i + 1, j + 1)
    }
}

pub fn make_grid(segments: usize) -> Result<Grid> {
    Grid::new(segments, BurgersConfig::default().domain)
}

/// `N_u x 2` Gaussian initial velocity, zero on the walls.
pub fn initial_field(a: f64, width: f64, grid: &Grid) -> Result<Matrix> {
    if !(width > 0.0) {
        return Err(Error::InvalidInput(format!("Gaussian width must be positive, got {width}")));
    }
    let mut f = Matrix::zeros((grid.n_points(), 2));
    for k in 0..grid.n_points() {
        if grid.boundary[k] {
            continue;
        }
        let (x, y) = (grid.coords[[k, 0]], grid.coords[[k, 1]]);
        let g = a * (-(x * x + y * y) / (2.0 * width * width)).exp();
        f[[k, 0]] = g;
        f[[k, 1]] = g;
    }
    Ok(f)
}

/// Row-major band storage of an `n x n` matrix with half-bandwidth `bw`.
struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    fn new(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        let w = 2 * self.bw + 1;
        &mut self.data[i * w + j + self.bw - i]
    }

    /// In-place LU without pivoting; safe for the diagonally dominant
    /// M-matrices assembled here.
    fn factor(&mut self) {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        for k in 0..n {
            let pivot = self.data[k * w + bw];
            let last = (k + bw).min(n - 1);
            let (head, tail) = self.data.split_at_mut((k + 1) * w);
            let row_k = &head[k * w + bw + 1..k * w + bw + 1 + (last - k)];
            for i in k + 1..=last {
                let r = &mut tail[(i - k - 1) * w..(i - k) * w];
                let off = k + bw - i;
                let l = r[off] / pivot;
                r[off] = l;
                for (a, &b) in r[off + 1..off + 1 + (last - k)].iter_mut().zip(row_k) {
                    *a -= l * b;
                }
            }
        }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        for i in 0..n {
            let first = i.saturating_sub(bw);
            let row = &self.data[i * w..(i + 1) * w];
            let mut s = rhs[i];
            for j in first..i {
                s -= row[j + bw - i] * rhs[j];
            }
            rhs[i] = s;
        }
        for i in (0..n).rev() {
            let last = (i + bw).min(n - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let mut s = rhs[i];
            for j in i + 1..=last {
                s -= row[j + bw - i] * rhs[j];
            }
            rhs[i] = s / row[bw];
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub sweeps: usize,
    pub residual: f64,
}

/// Reusable solver for one grid and configuration.
pub struct BurgersSolver {
    config: BurgersConfig,
    grid: Grid,
    band: Banded,
    u: Vec<f64>,
    v: Vec<f64>,
    previous: Option<(Vec<f64>, Vec<f64>)>,
}

impl BurgersSolver {
    pub fn new(config: &BurgersConfig) -> Result<Self> {
        config.validate()?;
        let grid = Grid::new(config.segments, config.domain)?;
        let m = config.segments - 1;
        Ok(Self {
            config: config.clone(),
            grid,
            band: Banded::new(m * m, m),
            u: vec![0.0; m * m],
            v: vec![0.0; m * m],
            previous: None,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn config(&self) -> &BurgersConfig {
        &self.config
    }

    /// Assemble the backward-Euler system with convection lagged at
    /// `(ubar, vbar)` over interior unknowns.
    fn assemble(&mut self, ubar: &[f64], vbar: &[f64]) {
        let m = self.config.segments - 1;
        let h = self.grid.spacing;
        let nu = 1.0 / self.config.reynolds;
        let inv_dt = 1.0 / self.config.dt();
        let diff = nu / (h * h);
        self.band.data.fill(0.0);
        for q in 0..m {
            for p in 0..m {
                let r = q * m + p;
                let (a, b) = (ubar[r], vbar[r]);
                *self.band.at(r, r) = inv_dt + (a.abs() + b.abs()) / h + 4.0 * diff;
                let west = -a.max(0.0) / h - diff;
                let east = -(-a).max(0.0) / h - diff;
                let south = -b.max(0.0) / h - diff;
                let north = -(-b).max(0.0) / h - diff;
                if p > 0 {
                    *self.band.at(r, r - 1) = west;
                }
                if p + 1 < m {
                    *self.band.at(r, r + 1) = east;
                }
                if q > 0 {
                    *self.band.at(r, r - m) = south;
                }
                if q + 1 < m {
                    *self.band.at(r, r + m) = north;
                }
            }
        }
    }

    fn gather(&self, field: &Matrix, comp: usize, out: &mut [f64]) {
        let m = self.config.segments - 1;
        for q in 0..m {
            for p in 0..m {
                out[q * m + p] = field[[self.grid.index(p + 1, q + 1), comp]];
            }
        }
    }

    fn scatter(&self, u: &[f64], v: &[f64], field: &mut Matrix) {
        let m = self.config.segments - 1;
        field.fill(0.0);
        for q in 0..m {
            for p in 0..m {
                let k = self.grid.index(p + 1, q + 1);
                field[[k, 0]] = u[q * m + p];
                field[[k, 1]] = v[q * m + p];
            }
        }
    }

    /// Forget the previous step so the next Picard iteration starts from the
    /// current field instead of a linear extrapolation.
    pub fn reset(&mut self) {
        self.previous = None;
    }

    /// Advance `field` (`N_u x 2`) by one step in place.
    pub fn step(&mut self, field: &mut Matrix) -> Result<StepStats> {
        if field.dim() != (self.grid.n_points(), 2) {
            return Err(Error::dim("velocity field", format!("{}x2", self.grid.n_points()), format!("{:?}", field.dim())));
        }
        if field.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("velocity field has non-finite entries".into()));
        }
        let n = self.u.len();
        let inv_dt = 1.0 / self.config.dt();
        let mut u_old = vec![0.0; n];
        let mut v_old = vec![0.0; n];
        self.gather(field, 0, &mut u_old);
        self.gather(field, 1, &mut v_old);
        let (mut ubar, mut vbar) = match &self.previous {
            Some((up, vp)) => (
                u_old.iter().zip(up).map(|(a, b)| 2.0 * a - b).collect(),
                v_old.iter().zip(vp).map(|(a, b)| 2.0 * a - b).collect(),
            ),
            None => (u_old.clone(), v_old.clone()),
        };
        let mut residual = f64::INFINITY;
        for sweep in 1..=self.config.max_sweeps {
            self.assemble(&ubar, &vbar);
            self.band.factor();
            for (x, &o) in self.u.iter_mut().zip(&u_old) {
                *x = o * inv_dt;
            }
            for (x, &o) in self.v.iter_mut().zip(&v_old) {
                *x = o * inv_dt;
            }
            self.band.solve(&mut self.u);
            self.band.solve(&mut self.v);
            residual = self
                .u
                .iter()
                .zip(&ubar)
                .chain(self.v.iter().zip(&vbar))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if !residual.is_finite() {
                break;
            }
            ubar.copy_from_slice(&self.u);
            vbar.copy_from_slice(&self.v);
            if residual <= self.config.picard_tol {
                let (u, v) = (std::mem::take(&mut self.u), std::mem::take(&mut self.v));
                self.scatter(&u, &v, field);
                self.u = u;
                self.v = v;
                self.previous = Some((u_old, v_old));
                return Ok(StepStats { sweeps: sweep, residual });
            }
        }
        Err(Error::Solver { sweeps: self.config.max_sweeps, residual })
    }
}

/// One step of the implicit scheme with a throwaway solver.
pub fn step_implicit(field: &Matrix, config: &BurgersConfig) -> Result<Matrix> {
    let mut solver = BurgersSolver::new(config)?;
    let mut next = field.clone();
    solver.step(&mut next)?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub times: Vec<f64>,
    /// `(N_t + 1) x N_u x 2`
    pub snapshots: Array3<f64>,
    pub wall_clock: f64,
    pub max_sweeps_used: usize,
}

/// Run the full trajectory for parameter `(a, width)`.
pub fn simulate(a: f64, width: f64, config: &BurgersConfig) -> Result<Simulation> {
    let start = Instant::now();
    let mut solver = BurgersSolver::new(config)?;
    let mut field = initial_field(a, width, solver.grid())?;
    let nu = solver.grid().n_points();
    let mut snapshots = Array3::zeros((config.n_steps + 1, nu, 2));
    snapshots.index_axis_mut(ndarray::Axis(0), 0).assign(&field);
    let mut max_sweeps_used = 0;
    for m in 1..=config.n_steps {
        let stats = solver.step(&mut field).map_err(|e| match e {
            Error::Solver { sweeps, residual } => {
                log::warn!("Picard iteration stalled at step {m} for a={a}, width={width}");
                Error::Solver { sweeps, residual }
            }
            other => other,
        })?;
        max_sweeps_used = max_sweeps_used.max(stats.sweeps);
        snapshots.index_axis_mut(ndarray::Axis(0), m).assign(&field);
    }
    Ok(Simulation { times: config.times(), snapshots, wall_clock: start.elapsed().as_secs_f64(), max_sweeps_used })
}

/// Simulate at `mu = [a, width]` and package the snapshots with their grid.
pub fn simulate_trajectory(id: impl Into<String>, mu: &[f64], config: &BurgersConfig) -> Result<FieldTrajectory> {
    if mu.len() != 2 {
        return Err(Error::dim("Burgers parameter vector (a, width)", 2, mu.len()));
    }
    let sim = simulate(mu[0], mu[1], config)?;
    let grid = Grid::new(config.segments, config.domain)?;
    Ok(FieldTrajectory {
        id: id.into(),
        mu: mu.to_vec(),
        grid: Some(grid.tag()),
        coords: grid.coords,
        fields: sim.snapshots,
        wall_clock: Some(sim.wall_clock),
    })
}

/// An empty archive laid out for Burgers trajectories under `config`.
pub fn burgers_dataset(config: &BurgersConfig) -> Dataset {
    let mut ds = Dataset::new(vec![config.domain; 2], config.times(), vec!["u".into(), "v".into()]);
    ds.metadata = serde_json::json!({ "solver": config });
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> BurgersConfig {
        BurgersConfig { segments: 20, n_steps: 20, t_final: 0.1, ..BurgersConfig::default() }
    }

    #[test]
    fn grid_geometry() {
        let g = make_grid(50).unwrap();
        assert_abs_diff_eq!(g.spacing, 0.12, epsilon = 1e-15);
        assert_eq!(g.n_points(), 51 * 51);
        assert_eq!(g.cell_count(), 2500);
        assert_eq!(make_grid(60).unwrap().cell_count(), 3600);
        assert_eq!(make_grid(70).unwrap().cell_count(), 4900);
        assert!(g.coords.iter().all(|&c| (-3.0..=3.0).contains(&c)));
        assert_eq!(g.coords.row(g.index(50, 50)).to_vec(), vec![3.0, 3.0]);
        assert_eq!(g.boundary.iter().filter(|&&b| b).count(), 4 * 50);
        assert!(matches!(make_grid(1), Err(Error::Spec(_))));
    }

    #[test]
    fn initial_field_shape() {
        let g = make_grid(50).unwrap();
        let f = initial_field(0.8, 1.0, &g).unwrap();
        let origin = g.index(25, 25);
        assert_eq!(f[[origin, 0]], 0.8);
        assert_eq!(f[[origin, 1]], 0.8);
        assert_eq!(f[[g.index(25, 30), 0]], f[[g.index(30, 25), 0]]);
        assert_abs_diff_eq!(f[[g.index(20, 25), 0]], f[[g.index(25, 30), 1]], epsilon = 1e-14);
        assert!(initial_field(0.0, 1.0, &g).unwrap().iter().all(|&v| v == 0.0));
        assert!(initial_field(1.0, 0.0, &g).is_err());
    }

    #[test]
    fn zero_field_is_a_fixed_point() {
        let cfg = small();
        let g = Grid::new(cfg.segments, cfg.domain).unwrap();
        let zero = Matrix::zeros((g.n_points(), 2));
        assert!(step_implicit(&zero, &cfg).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn banded_lu_matches_dense_solve() {
        let n = 12;
        let bw = 3;
        let mut b = Banded::new(n, bw);
        let mut dense = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=(i + bw).min(n - 1) {
                let v = if i == j { 10.0 } else { -(((i * 7 + j * 3) % 5) as f64) * 0.4 };
                *b.at(i, j) = v;
                dense[(i, j)] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let expect = dense.lu().solve(&nalgebra::DVector::from_vec(rhs.clone())).unwrap();
        b.factor();
        let mut x = rhs;
        b.solve(&mut x);
        for i in 0..n {
            assert_abs_diff_eq!(x[i], expect[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn max_norm_does_not_grow_and_walls_stay_zero() {
        let cfg = small();
        let sim = simulate(0.9, 1.0, &cfg).unwrap();
        let g = Grid::new(cfg.segments, cfg.domain).unwrap();
        let mut prev = f64::INFINITY;
        for snap in sim.snapshots.outer_iter() {
            let m = snap.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(m <= prev + 1e-14);
            prev = m;
            for (k, &b) in g.boundary.iter().enumerate() {
                if b {
                    assert_eq!(snap[[k, 0]], 0.0);
                    assert_eq!(snap[[k, 1]], 0.0);
                }
            }
        }
        assert_eq!(sim.snapshots.dim(), (21, 441, 2));
    }

    #[test]
    fn picard_failure_is_reported() {
        let cfg = BurgersConfig { max_sweeps: 1, ..small() };
        let err = simulate(0.9, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Solver { sweeps: 1, .. }), "{err}");
    }

    #[test]
    fn bilinear_reproduces_affine_fields() {
        let g = make_grid(10).unwrap();
        let vals: Vec<f64> = g.coords.rows().into_iter().map(|r| 2.0 * r[0] - 0.5 * r[1] + 1.0).collect();
        for (x, y) in [(0.13, -2.71), (3.0, 3.0), (-3.0, 0.0), (1.234, 0.5)] {
            assert_abs_diff_eq!(g.bilinear(&vals, x, y), 2.0 * x - 0.5 * y + 1.0, epsilon = 1e-12);
        }
    }
}
