//! The three latent-dynamics networks and the Taylor-series rollout.
//!
//! * `dyn`: `[z, mu] -> [dz/dt, d2z/dt2]` (second half only when the
//!   Taylor order is 2)
//! * `rec`: `[z, mu, x] -> u`
//! * `z0`:  `mu -> z(0)`
//!
//! Parameter blocks are named `<net>.<layer>.<part>`, for example
//! `rec.1.fc2.weight` or `dyn.4.bias`.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finish_rows, Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Affine,
    ResnetBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// One layer: its kind, output width, and the activation applied after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn affine(width: usize) -> Self {
        Self { kind: LayerKind::Affine, width, activation: Activation::Tanh }
    }

    pub fn resnet(width: usize) -> Self {
        Self { kind: LayerKind::ResnetBlock, width, activation: Activation::Tanh }
    }

    pub fn output(width: usize) -> Self {
        Self { kind: LayerKind::Affine, width, activation: Activation::Identity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Net {
    Dyn,
    Rec,
    Z0,
}

impl Net {
    pub const ALL: [Net; 3] = [Net::Dyn, Net::Rec, Net::Z0];

    pub fn prefix(self) -> &'static str {
        match self {
            Net::Dyn => "dyn",
            Net::Rec => "rec",
            Net::Z0 => "z0",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub latent_dim: usize,
    pub param_dim: usize,
    pub space_dim: usize,
    pub field_dim: usize,
    /// Taylor order of the rollout, 1 or 2.
    pub order: usize,
    pub dyn_layers: Vec<LayerSpec>,
    pub rec_layers: Vec<LayerSpec>,
    pub z0_layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Layer stacks used for the 2D Burgers case, parameterised by latent size.
    pub fn burgers(latent_dim: usize) -> Self {
        Self::standard(latent_dim, 2, 2, 2, 2)
    }

    /// The Burgers layer stacks with arbitrary input/output sizes.
    pub fn standard(latent_dim: usize, param_dim: usize, space_dim: usize, field_dim: usize, order: usize) -> Self {
        use LayerSpec as L;
        Self {
            latent_dim,
            param_dim,
            space_dim,
            field_dim,
            order,
            dyn_layers: vec![L::affine(6), L::resnet(6), L::affine(6), L::resnet(6), L::output(order * latent_dim)],
            rec_layers: vec![
                L::affine(11),
                L::resnet(15),
                L::affine(15),
                L::resnet(15),
                L::affine(15),
                L::resnet(11),
                L::output(field_dim),
            ],
            z0_layers: vec![L::affine(6), L::affine(6), L::affine(6), L::output(latent_dim)],
        }
    }

    pub fn layers(&self, net: Net) -> &[LayerSpec] {
        match net {
            Net::Dyn => &self.dyn_layers,
            Net::Rec => &self.rec_layers,
            Net::Z0 => &self.z0_layers,
        }
    }

    pub fn input_width(&self, net: Net) -> usize {
        match net {
            Net::Dyn => self.latent_dim + self.param_dim,
            Net::Rec => self.latent_dim + self.param_dim + self.space_dim,
            Net::Z0 => self.param_dim,
        }
    }

    pub fn output_width(&self, net: Net) -> usize {
        match net {
            Net::Dyn => self.order * self.latent_dim,
            Net::Rec => self.field_dim,
            Net::Z0 => self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("latent_dim", self.latent_dim),
            ("param_dim", self.param_dim),
            ("space_dim", self.space_dim),
            ("field_dim", self.field_dim),
        ] {
            if v == 0 {
                return Err(Error::Spec(format!("{what} must be positive")));
            }
        }
        if !(1..=2).contains(&self.order) {
            return Err(Error::Spec(format!("Taylor order must be 1 or 2, got {}", self.order)));
        }
        for net in Net::ALL {
            let layers = self.layers(net);
            let Some(last) = layers.last() else {
                return Err(Error::Spec(format!("{} network has no layers", net.prefix())));
            };
            if let Some(i) = layers.iter().position(|l| l.width == 0) {
                return Err(Error::Spec(format!("{} layer {i} has zero width", net.prefix())));
            }
            if last.width != self.output_width(net) {
                return Err(Error::Spec(format!(
                    "{} network ends at width {} but must output {}",
                    net.prefix(),
                    last.width,
                    self.output_width(net)
                )));
            }
        }
        Ok(())
    }
}

/// Allocate and initialise every block of the three networks.
///
/// Weights are uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`, biases zero.
pub fn build_networks(spec: &ArchitectureSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for net in Net::ALL {
        let mut width = spec.input_width(net);
        for (l, layer) in spec.layers(net).iter().enumerate() {
            let p = format!("{}.{l}", net.prefix());
            let out = layer.width;
            match layer.kind {
                LayerKind::Affine => {
                    store.insert(format!("{p}.weight"), ParamStore::init_weight(&mut rng, out, width))?;
                    store.insert(format!("{p}.bias"), Matrix::zeros((1, out)))?;
                }
                LayerKind::ResnetBlock => {
                    store.insert(format!("{p}.fc1.weight"), ParamStore::init_weight(&mut rng, out, width))?;
                    store.insert(format!("{p}.fc1.bias"), Matrix::zeros((1, out)))?;
                    store.insert(format!("{p}.fc2.weight"), ParamStore::init_weight(&mut rng, out, out))?;
                    store.insert(format!("{p}.fc2.bias"), Matrix::zeros((1, out)))?;
                    if width != out {
                        store.insert(format!("{p}.proj.weight"), ParamStore::init_weight(&mut rng, out, width))?;
                        store.insert(format!("{p}.proj.bias"), Matrix::zeros((1, out)))?;
                    }
                }
            }
            width = out;
        }
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy)]
struct AffineIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum BoundLayer {
    Affine(AffineIds),
    Resnet {
        fc1: AffineIds,
        fc2: AffineIds,
        proj: Option<AffineIds>,
    },
}

#[derive(Debug, Clone, Default)]
struct LayerBuffers {
    out: Matrix,
    inner: Matrix,
    skip: Matrix,
}

impl LayerBuffers {
    fn new(layer: &BoundLayer, store: &ParamStore, rows: usize) -> Self {
        let width = |ids: &AffineIds| store.value(ids.w).nrows();
        match layer {
            BoundLayer::Affine(ids) => Self { out: Matrix::zeros((rows, width(ids))), ..Self::default() },
            BoundLayer::Resnet { fc1, fc2, proj } => Self {
                out: Matrix::zeros((rows, width(fc2))),
                inner: Matrix::zeros((rows, width(fc1))),
                skip: proj.as_ref().map_or_else(|| Matrix::zeros((0, 0)), |p| Matrix::zeros((rows, width(p)))),
            },
        }
    }
}

/// Scratch space for repeated plain evaluations of one network.
#[derive(Debug, Clone, Default)]
pub struct EvalWorkspace {
    rows: usize,
    layers: Vec<LayerBuffers>,
}

/// A network whose layers have been resolved to parameter ids in a store.
#[derive(Debug, Clone)]
pub struct BoundNet {
    net: Net,
    input_width: usize,
    layers: Vec<(BoundLayer, Activation)>,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Spec(format!("parameter block {name:?} is missing")))
}

fn lookup_affine(store: &ParamStore, prefix: &str, rows: usize, cols: usize) -> Result<AffineIds> {
    let w = lookup(store, &format!("{prefix}.weight"))?;
    let b = lookup(store, &format!("{prefix}.bias"))?;
    let (wv, bv) = (store.value(w), store.value(b));
    if wv.dim() != (rows, cols) {
        return Err(Error::dim(format!("{prefix}.weight"), format!("{rows}x{cols}"), format!("{}x{}", wv.nrows(), wv.ncols())));
    }
    if bv.dim() != (1, rows) {
        return Err(Error::dim(format!("{prefix}.bias"), format!("1x{rows}"), format!("{}x{}", bv.nrows(), bv.ncols())));
    }
    Ok(AffineIds { w, b })
}

impl BoundNet {
    pub fn bind(spec: &ArchitectureSpec, store: &ParamStore, net: Net) -> Result<Self> {
        let mut width = spec.input_width(net);
        let mut layers = Vec::new();
        for (l, layer) in spec.layers(net).iter().enumerate() {
            let p = format!("{}.{l}", net.prefix());
            let out = layer.width;
            let bound = match layer.kind {
                LayerKind::Affine => BoundLayer::Affine(lookup_affine(store, &p, out, width)?),
                LayerKind::ResnetBlock => BoundLayer::Resnet {
                    fc1: lookup_affine(store, &format!("{p}.fc1"), out, width)?,
                    fc2: lookup_affine(store, &format!("{p}.fc2"), out, out)?,
                    proj: if width != out {
                        Some(lookup_affine(store, &format!("{p}.proj"), out, width)?)
                    } else {
                        None
                    },
                },
            };
            layers.push((bound, layer.activation));
            width = out;
        }
        Ok(Self { net, input_width: spec.input_width(net), layers })
    }

    pub fn net(&self) -> Net {
        self.net
    }

    /// Evaluate on a batch of rows without recording anything.
    pub fn eval(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let mut ws = EvalWorkspace::default();
        Ok(self.eval_with(store, x.view(), &mut ws)?.clone())
    }

    /// Like [`BoundNet::eval`], reusing the buffers in `ws` across calls.
    /// Rounds exactly like the tape's forward pass.
    pub fn eval_with<'w>(&self, store: &ParamStore, x: ArrayView2<f64>, ws: &'w mut EvalWorkspace) -> Result<&'w Matrix> {
        if x.ncols() != self.input_width {
            return Err(Error::dim(
                format!("{} network input", self.net.prefix()),
                self.input_width,
                x.ncols(),
            ));
        }
        let rows = x.nrows();
        if ws.rows != rows || ws.layers.len() != self.layers.len() {
            ws.rows = rows;
            ws.layers = self.layers.iter().map(|(l, _)| LayerBuffers::new(l, store, rows)).collect();
        }
        let gemm = |ids: &AffineIds, x: ArrayView2<f64>, y: &mut Matrix| {
            general_mat_mul(1.0, &x, &store.value(ids.w).t(), 0.0, y);
        };
        let bias = |ids: &AffineIds| store.value(ids.b).as_slice().expect("bias row is contiguous");
        fn flat(m: &mut Matrix) -> &mut [f64] {
            m.as_slice_mut().expect("workspace buffers are contiguous")
        }
        for (l, (layer, act)) in self.layers.iter().enumerate() {
            let (done, rest) = ws.layers.split_at_mut(l);
            let h = done.last().map_or(x, |b| b.out.view());
            let buf = &mut rest[0];
            let act = *act == Activation::Tanh;
            match layer {
                BoundLayer::Affine(ids) => {
                    gemm(ids, h, &mut buf.out);
                    finish_rows(flat(&mut buf.out), bias(ids), None, act);
                }
                BoundLayer::Resnet { fc1, fc2, proj } => {
                    gemm(fc1, h, &mut buf.inner);
                    finish_rows(flat(&mut buf.inner), bias(fc1), None, true);
                    gemm(fc2, buf.inner.view(), &mut buf.out);
                    match proj {
                        Some(p) => {
                            gemm(p, h, &mut buf.skip);
                            finish_rows(flat(&mut buf.skip), bias(p), None, false);
                            finish_rows(flat(&mut buf.out), bias(fc2), buf.skip.as_slice(), act);
                        }
                        None => {
                            let owned;
                            let skip = match h.as_slice() {
                                Some(s) => s,
                                None => {
                                    owned = h.as_standard_layout().into_owned();
                                    owned.as_slice().expect("standard layout")
                                }
                            };
                            finish_rows(flat(&mut buf.out), bias(fc2), Some(skip), act);
                        }
                    }
                }
            }
        }
        Ok(&ws.layers.last().expect("network has layers").out)
    }

    /// Put this network's parameters on a tape once, so repeated forward
    /// passes (for example every rollout step) share the same nodes.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore) -> TapeNet {
        let mut put = |ids: &AffineIds| (tape.param(store, ids.w), tape.param(store, ids.b));
        let layers = self
            .layers
            .iter()
            .map(|(layer, act)| {
                let l = match layer {
                    BoundLayer::Affine(ids) => TapeLayer::Affine(put(ids)),
                    BoundLayer::Resnet { fc1, fc2, proj } => TapeLayer::Resnet {
                        fc1: put(fc1),
                        fc2: put(fc2),
                        proj: proj.as_ref().map(&mut put),
                    },
                };
                (l, *act)
            })
            .collect();
        TapeNet { layers }
    }
}

#[derive(Debug, Clone)]
enum TapeLayer {
    Affine((NodeId, NodeId)),
    Resnet {
        fc1: (NodeId, NodeId),
        fc2: (NodeId, NodeId),
        proj: Option<(NodeId, NodeId)>,
    },
}

/// A network whose parameters already live on a tape.
#[derive(Debug, Clone)]
pub struct TapeNet {
    layers: Vec<(TapeLayer, Activation)>,
}

impl TapeNet {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (layer, act) in &self.layers {
            h = match layer {
                TapeLayer::Affine((w, b)) => tape.affine(h, *w, *b)?,
                TapeLayer::Resnet { fc1, fc2, proj } => resnet_block_tape(tape, h, *fc1, *fc2, *proj)?,
            };
            if *act == Activation::Tanh {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// `F(x) + skip(x)` where `F` is affine -> tanh -> affine and the skip path is
/// the identity, or a learned affine projection when widths differ.
pub fn resnet_block_tape(
    tape: &mut Tape,
    x: NodeId,
    fc1: (NodeId, NodeId),
    fc2: (NodeId, NodeId),
    proj: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    let inner = tape.affine(x, fc1.0, fc1.1)?;
    let inner = tape.tanh(inner);
    let f = tape.affine(inner, fc2.0, fc2.1)?;
    let skip = match proj {
        Some((w, b)) => tape.affine(x, w, b)?,
        None => x,
    };
    tape.add(f, skip)
}

/// All three networks bound to one store.
#[derive(Debug, Clone)]
pub struct Tldnet {
    pub spec: ArchitectureSpec,
    pub dynamics: BoundNet,
    pub reconstruction: BoundNet,
    pub initial: BoundNet,
}

/// Latent states and network-produced time derivatives over a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub times: Vec<f64>,
    /// `(N_t + 1) x N_s`
    pub states: Matrix,
    /// `(N_t + 1) x N_s`, the first half of the `dyn` output at each state
    pub first: Matrix,
    /// `(N_t + 1) x N_s` when the Taylor order is 2
    pub second: Option<Matrix>,
}

fn row(values: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

impl Tldnet {
    pub fn bind(spec: &ArchitectureSpec, store: &ParamStore) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            dynamics: BoundNet::bind(spec, store, Net::Dyn)?,
            reconstruction: BoundNet::bind(spec, store, Net::Rec)?,
            initial: BoundNet::bind(spec, store, Net::Z0)?,
        })
    }

    /// `z(0)` from a normalised parameter vector.
    pub fn initial_state(&self, store: &ParamStore, mu: &[f64]) -> Result<Vec<f64>> {
        Ok(self.initial.eval(store, &row(mu))?.into_raw_vec_and_offset().0)
    }

    /// Explicit Taylor rollout of `n_steps` steps of size `dt`.
    ///
    /// `z(m+1) = z(m) + dz(m) dt + d2z(m) dt^2`, with derivatives taken from the
    /// `dyn` network at the current state.
    pub fn taylor_rollout(&self, store: &ParamStore, z0: &[f64], mu: &[f64], dt: f64, n_steps: usize) -> Result<LatentTrajectory> {
        let ns = self.spec.latent_dim;
        if z0.len() != ns {
            return Err(Error::dim("rollout initial state", ns, z0.len()));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        let second_order = self.spec.order == 2;
        let mut states = Matrix::zeros((n_steps + 1, ns));
        let mut first = Matrix::zeros((n_steps + 1, ns));
        let mut second = second_order.then(|| Matrix::zeros((n_steps + 1, ns)));
        let mut z = z0.to_vec();
        let mut input = Matrix::zeros((1, ns + mu.len()));
        input.slice_mut(s![0, ns..]).assign(&ndarray::aview1(mu));
        for m in 0..=n_steps {
            states.row_mut(m).assign(&ndarray::aview1(&z));
            input.slice_mut(s![0, ..ns]).assign(&ndarray::aview1(&z));
            let out = self.dynamics.eval(store, &input)?;
            first.row_mut(m).assign(&out.slice(s![0, ..ns]));
            if let Some(sec) = second.as_mut() {
                sec.row_mut(m).assign(&out.slice(s![0, ns..2 * ns]));
            }
            if m == n_steps {
                break;
            }
            for j in 0..ns {
                let mut next = z[j] + out[[0, j]] * dt;
                if second_order {
                    next += out[[0, ns + j]] * dt * dt;
                }
                z[j] = next;
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    step: m + 1,
                    detail: "non-finite latent state during Taylor rollout".into(),
                });
            }
        }
        let times = (0..=n_steps).map(|m| m as f64 * dt).collect();
        Ok(LatentTrajectory { times, states, first, second })
    }

    /// Field values at one `(z, mu, x)` query.
    pub fn reconstruct(&self, store: &ParamStore, z: &[f64], mu: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let input = row(&[z, mu, x].concat());
        Ok(self.reconstruction.eval(store, &input)?.into_raw_vec_and_offset().0)
    }

    /// Field values at every row of `coords` for one latent state.
    pub fn reconstruct_batch(&self, store: &ParamStore, z: &[f64], mu: &[f64], coords: &Matrix) -> Result<Matrix> {
        let head = row(&[z, mu].concat());
        let head = head.broadcast((coords.nrows(), head.ncols())).expect("broadcast row");
        let input = concatenate(Axis(1), &[head.view(), coords.view()])
            .map_err(|e| Error::dim("reconstruction input", "matching rows", e))?;
        self.reconstruction.eval(store, &input)
    }
}

/// Nodes produced by recording a batched rollout on a tape.
#[derive(Debug, Clone)]
pub struct TapeRollout {
    /// One `B x N_s` node per time level, `N_t + 1` in total.
    pub states: Vec<NodeId>,
    pub first: Vec<NodeId>,
    pub second: Vec<NodeId>,
}

/// Record the Taylor rollout for a batch of `B` parameter points on `tape`.
///
/// `z0` is `B x N_s`, `mu` is `B x N_D` (normalised).
pub fn rollout_on_tape(
    tape: &mut Tape,
    dyn_net: &TapeNet,
    spec: &ArchitectureSpec,
    z0: NodeId,
    mu: NodeId,
    dt: f64,
    n_steps: usize,
) -> Result<TapeRollout> {
    let ns = spec.latent_dim;
    let mut out = TapeRollout { states: Vec::with_capacity(n_steps + 1), first: Vec::new(), second: Vec::new() };
    let mut z = z0;
    for m in 0..=n_steps {
        out.states.push(z);
        let input = tape.concat_cols(&[z, mu])?;
        let d = dyn_net.forward(tape, input)?;
        let zd = tape.slice_cols(d, 0, ns)?;
        out.first.push(zd);
        let zdd = if spec.order == 2 {
            let n = tape.slice_cols(d, ns, 2 * ns)?;
            out.second.push(n);
            Some(n)
        } else {
            None
        };
        if m == n_steps {
            break;
        }
        let step = tape.scale(zd, dt);
        let mut next = tape.add(z, step)?;
        if let Some(zdd) = zdd {
            let curv = tape.scale(zdd, dt * dt);
            next = tape.add(next, curv)?;
        }
        if tape.value(next).iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: m + 1,
                detail: "non-finite latent state during Taylor rollout".into(),
            });
        }
        z = next;
    }
    Ok(out)
}
