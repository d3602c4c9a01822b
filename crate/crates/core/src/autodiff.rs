//! Reverse-mode automatic differentiation over dense row-batched matrices.
//!
//! Every node on the [`Tape`] holds a `rows x cols` matrix. A "vector" in the
//! usual sense is a single row; batching many vectors through the same layer
//! is just a taller matrix, which keeps the tape short even when a loss
//! touches millions of points.
//!
//! Trainable arrays live in a [`ParamStore`]. A tape copies parameter values
//! in when they are first used and writes gradients back into the store's
//! gradient buffers during [`Tape::backward`].

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named, uniquely keyed parameter arrays with matching gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Spec(format!("duplicate parameter block name {name:?}")));
        }
        let id = ParamId(self.blocks.len());
        let grad = Matrix::zeros(value.raw_dim());
        self.index.insert(name.clone(), id);
        self.blocks.push(ParamBlock { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.blocks[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.blocks[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) {
        self.blocks[id.0].grad += g;
    }

    /// Copy of the blocks whose names satisfy `keep`, in the original order.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for b in &self.blocks {
            if keep(&b.name) {
                out.insert(b.name.clone(), b.value.clone())
                    .expect("names are unique in the source store");
            }
        }
        out
    }

    /// Uniform `[-sqrt(1/fan_in), sqrt(1/fan_in)]` weight matrix.
    pub fn init_weight<R: Rng>(rng: &mut R, out: usize, fan_in: usize) -> Matrix {
        let bound = (1.0 / fan_in as f64).sqrt();
        Matrix::from_shape_fn((out, fan_in), |_| rng.random_range(-bound..=bound))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    /// `x * w^T + b` with `w: out x in`, `b: 1 x out`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Tanh(NodeId),
    Cos(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize, end: usize },
    GatherRows { a: NodeId, index: Rc<Vec<usize>> },
    SumSquares(NodeId),
    /// `sum_r w_r * mean_c (a_rc - t_rc)^2`
    WeightedSquaredError {
        a: NodeId,
        target: Rc<Matrix>,
        weights: Rc<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    label: Option<String>,
}

/// Append-only record of primitive operations in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn affine_kernel(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView2<f64>) -> Matrix {
    let mut y = x.dot(&w.t());
    y += &b.row(0);
    y
}

/// Hyperbolic tangent to within a few ulp, written without branches so the
/// element loops vectorise.
///
/// With `2|x| = n ln2 + r`, `|r| <= ln2/2`, and `exp(r) - 1 = 2p / (q - p)`
/// from a rational approximation, `exp(2|x|) - 1 = N / D` with
/// `N = 2^(n+1) p + (2^n - 1)(q - p)` and `D = q - p`, so
/// `tanh|x| = N / (N + 2D)`: one division, no cancellation near zero.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const C1: f64 = 6.931_457_519_531_25e-1;
    const C2: f64 = 1.428_606_820_309_417_232_12e-6;
    // Adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let a = x.abs();
    let a = 2.0 * if a > 40.0 { 40.0 } else { a };
    let shifted = LOG2E * a + SHIFT;
    let n = shifted - SHIFT;
    let r = a - n * C1 - n * C2;
    let rr = r * r;
    let p = r * ((1.261_771_930_748_105_908_78e-4 * rr + 3.029_944_077_074_419_613e-2) * rr + 9.999_999_999_999_999_999_1e-1);
    let q = ((3.001_985_051_386_644_550_42e-6 * rr + 2.524_483_403_496_841_041_92e-3) * rr + 2.272_655_482_081_550_287_66e-1) * rr
        + 2.000_000_000_000_000_000_09;
    let exponent = shifted.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023);
    let scale = f64::from_bits(exponent << 52);
    let d = q - p;
    let num = 2.0 * scale * p + (scale - 1.0) * d;
    (num / (num + 2.0 * d)).copysign(x)
}

fn tanh_slice_portable(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
fn tanh_slice_avx512(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn tanh_slice_avx2(xs: &mut [f64]) {
    for x in xs {
        *x = tanh(*x);
    }
}

/// Elementwise [`tanh`], using wide vectors when the CPU has them. No
/// fused multiply-add is introduced, so results are identical either way.
pub fn tanh_slice(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { tanh_slice_avx512(xs) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { tanh_slice_avx2(xs) };
        return;
    }
    tanh_slice_portable(xs);
}

/// In place over row-major `y` with rows of `bias.len()`:
/// `y = act((y + bias) + skip)`, `act` being [`tanh`] or the identity.
pub(crate) fn finish_rows(y: &mut [f64], bias: &[f64], skip: Option<&[f64]>, act: bool) {
    let n = bias.len();
    match skip {
        Some(s) => {
            debug_assert_eq!(s.len(), y.len());
            for (row, srow) in y.chunks_exact_mut(n).zip(s.chunks_exact(n)) {
                for ((v, b), s) in row.iter_mut().zip(bias).zip(srow) {
                    *v = (*v + b) + s;
                }
            }
        }
        None => {
            for row in y.chunks_exact_mut(n) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
        }
    }
    if act {
        tanh_slice(y);
    }
}

pub(crate) fn tanh_kernel(x: ArrayView2<f64>) -> Matrix {
    let mut y = x.to_owned();
    tanh_in_place(&mut y);
    y
}

pub(crate) fn tanh_in_place(x: &mut Matrix) {
    match x.as_slice_memory_order_mut() {
        Some(s) => tanh_slice(s),
        None => x.mapv_inplace(tanh),
    }
}

fn shape(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn label(&self, id: NodeId) -> String {
        self.nodes[id.0]
            .label
            .clone()
            .unwrap_or_else(|| format!("node {}", id.0))
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn row_input(&mut self, values: &[f64]) -> NodeId {
        self.input(Matrix::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let block = store.get(id);
        let node = self.push(block.value.clone(), Op::Param(id));
        self.nodes[node.0].label = Some(block.name.clone());
        node
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.ncols() {
            return Err(Error::dim(
                format!("affine layer {}", self.label(w)),
                format!("input width {}", wv.ncols()),
                format!("input width {}", xv.ncols()),
            ));
        }
        if bv.nrows() != 1 || bv.ncols() != wv.nrows() {
            return Err(Error::dim(
                format!("affine layer {} bias", self.label(b)),
                format!("1x{}", wv.nrows()),
                shape(bv),
            ));
        }
        let y = affine_kernel(xv.view(), wv.view(), bv.view());
        Ok(self.push(y, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::dim("matmul", format!("{} inner rows", av.ncols()), shape(bv)));
        }
        let y = av.dot(bv);
        Ok(self.push(y, Op::MatMul { a, b }))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let y = tanh_kernel(self.value(a).view());
        self.push(y, Op::Tanh(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let y = self.value(a).mapv(f64::cos);
        self.push(y, Op::Cos(a))
    }

    fn same_shape(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(Error::dim(ctx, shape(av), shape(bv)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a) - self.value(b);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a) * self.value(b);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let y = self.value(a) * factor;
        self.push(y, Op::Scale(a, factor))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let y = concat(self, parts, Axis(1))?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let y = concat(self, parts, Axis(0))?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start > end || end > av.ncols() {
            return Err(Error::dim("slice_cols", format!("range within 0..{}", av.ncols()), format!("{start}..{end}")));
        }
        let y = av.slice(s![.., start..end]).to_owned();
        Ok(self.push(y, Op::SliceCols { a, start, end }))
    }

    pub fn gather_rows(&mut self, a: NodeId, index: Rc<Vec<usize>>) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.nrows()) {
            return Err(Error::dim("gather_rows", format!("row < {}", av.nrows()), bad));
        }
        let y = av.select(Axis(0), &index);
        Ok(self.push(y, Op::GatherRows { a, index }))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>();
        self.push(Matrix::from_elem((1, 1), v), Op::SumSquares(a))
    }

    pub fn weighted_squared_error(&mut self, a: NodeId, target: Rc<Matrix>, weights: Rc<Vec<f64>>) -> Result<NodeId> {
        let av = self.value(a);
        if av.dim() != target.dim() {
            return Err(Error::dim("squared error target", shape(av), shape(&target)));
        }
        if weights.len() != av.nrows() {
            return Err(Error::dim("squared error weights", av.nrows(), weights.len()));
        }
        let v = weighted_sq_err(av, &target, &weights);
        Ok(self.push(
            Matrix::from_elem((1, 1), v),
            Op::WeightedSquaredError { a, target, weights },
        ))
    }

    /// Mean squared error against a constant target, averaged over every entry.
    pub fn mse(&mut self, a: NodeId, target: Matrix) -> Result<NodeId> {
        let rows = target.nrows().max(1);
        let weights = Rc::new(vec![1.0 / rows as f64; target.nrows()]);
        self.weighted_squared_error(a, Rc::new(target), weights)
    }

    /// Recompute every node from its recorded inputs, reloading parameter
    /// values from `store`.
    pub fn replay(&mut self, store: &ParamStore) {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let value = match op {
                Op::Input => continue,
                Op::Param(id) => store.value(id).clone(),
                Op::Affine { x, w, b } => affine_kernel(
                    self.value(x).view(),
                    self.value(w).view(),
                    self.value(b).view(),
                ),
                Op::MatMul { a, b } => self.value(a).dot(self.value(b)),
                Op::Tanh(a) => tanh_kernel(self.value(a).view()),
                Op::Cos(a) => self.value(a).mapv(f64::cos),
                Op::Add(a, b) => self.value(a) + self.value(b),
                Op::Sub(a, b) => self.value(a) - self.value(b),
                Op::Mul(a, b) => self.value(a) * self.value(b),
                Op::Scale(a, f) => self.value(a) * f,
                Op::ConcatCols(ref parts) => concat(self, parts, Axis(1)).expect("shapes fixed at record time"),
                Op::ConcatRows(ref parts) => concat(self, parts, Axis(0)).expect("shapes fixed at record time"),
                Op::SliceCols { a, start, end } => self.value(a).slice(s![.., start..end]).to_owned(),
                Op::GatherRows { a, ref index } => self.value(a).select(Axis(0), index),
                Op::SumSquares(a) => {
                    Matrix::from_elem((1, 1), self.value(a).iter().map(|x| x * x).sum::<f64>())
                }
                Op::WeightedSquaredError {
                    a,
                    ref target,
                    ref weights,
                } => Matrix::from_elem((1, 1), weighted_sq_err(self.value(a), target, weights)),
            };
            self.nodes[i].value = value;
        }
    }

    /// Backward pass from a scalar (`1x1`) output.
    pub fn backward_scalar(&self, output: NodeId, seed: f64, store: &mut ParamStore) -> Result<()> {
        self.backward(output, &Matrix::from_elem((1, 1), seed), store)
    }

    /// Propagate `seed` (shaped like `output`) back through the tape and add the
    /// resulting parameter gradients into `store`. Input nodes get no gradient.
    pub fn backward(&self, output: NodeId, seed: &Matrix, store: &mut ParamStore) -> Result<()> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backward requested for node {} but the tape holds {} recorded operations; run the forward pass first",
                output.0,
                self.nodes.len()
            )));
        }
        let out_value = self.value(output);
        if out_value.dim() != seed.dim() {
            return Err(Error::dim("backward seed", shape(out_value), shape(seed)));
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let gw = g.t().dot(xv);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gx = g.dot(wv);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MatMul { a, b } => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = g;
                    ga.zip_mut_with(y, |gi, &yi| *gi *= 1.0 - yi * yi);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gi, &xi| *gi *= -xi.sin());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols { a, start, end } => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows { a, index } => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.raw_dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumSquares(a) => {
                    let ga = self.value(*a) * (2.0 * g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSquaredError { a, target, weights } => {
                    let av = self.value(*a);
                    let scale = 2.0 * g[[0, 0]] / av.ncols().max(1) as f64;
                    let mut ga = av - target.as_ref();
                    for (mut row, &w) in ga.rows_mut().into_iter().zip(weights.iter()) {
                        row *= scale * w;
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn concat(tape: &Tape, parts: &[NodeId], axis: Axis) -> Result<Matrix> {
    if parts.is_empty() {
        return Err(Error::dim("concat", "at least one part", 0));
    }
    let views: Vec<_> = parts.iter().map(|p| tape.value(*p).view()).collect();
    ndarray::concatenate(axis, &views).map_err(|e| Error::dim("concat", "compatible shapes", e))
}

fn weighted_sq_err(a: &Matrix, target: &Matrix, weights: &[f64]) -> f64 {
    let ncols = a.ncols().max(1) as f64;
    a.rows()
        .into_iter()
        .zip(target.rows())
        .zip(weights)
        .map(|((ar, tr), &w)| {
            let s: f64 = ar.iter().zip(tr.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            w * s / ncols
        })
        .sum()
}

pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Compare tape gradients with central differences.
///
/// `build` records the scalar loss on a fresh tape and returns its node. The
/// result is the maximum over every scalar parameter of
/// `|analytic - central| / max(|analytic|, |central|, GRADIENT_FLOOR)`.
/// The floor keeps components below the resolution of the difference
/// quotient from dominating.
pub fn finite_difference_check<F>(params: &mut ParamStore, step: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward_scalar(loss, 1.0, params)?;

    let mut eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(&mut t, p)?;
        Ok(t.scalar(l))
    };

    let mut worst = 0.0_f64;
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.value(id).len();
        for k in 0..n {
            let original = params.value(id).as_slice_memory_order().unwrap()[k];
            params.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = original + step;
            let plus = eval(params)?;
            params.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = original - step;
            let minus = eval(params)?;
            params.value_mut(id).as_slice_memory_order_mut().unwrap()[k] = original;

            let central = (plus - minus) / (2.0 * step);
            let analytic = params.grad(id).as_slice_memory_order().unwrap()[k];
            let rel = (analytic - central).abs() / analytic.abs().max(central.abs()).max(GRADIENT_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(blocks: &[(&str, Matrix)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = blocks
            .iter()
            .map(|(n, v)| store.insert(*n, v.clone()).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn affine_identity_and_constant_maps() {
        let (store, ids) = store_with(&[
            ("w", Matrix::eye(3)),
            ("b", Matrix::zeros((1, 3))),
            ("w0", Matrix::zeros((1, 3))),
            ("b0", array![[0.5]]),
            ("w2", array![[2.0]]),
            ("b2", array![[1.0]]),
        ]);
        let mut tape = Tape::new();
        let x = tape.row_input(&[1.0, 2.0, 3.0]);
        let (w, b) = (tape.param(&store, ids[0]), tape.param(&store, ids[1]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y), &array![[1.0, 2.0, 3.0]]);

        let (w0, b0) = (tape.param(&store, ids[2]), tape.param(&store, ids[3]));
        let y0 = tape.affine(x, w0, b0).unwrap();
        assert_eq!(tape.value(y0), &array![[0.5]]);

        let x1 = tape.row_input(&[3.0]);
        let (w2, b2) = (tape.param(&store, ids[4]), tape.param(&store, ids[5]));
        let y2 = tape.affine(x1, w2, b2).unwrap();
        assert_eq!(tape.value(y2), &array![[7.0]]);
    }

    #[test]
    fn affine_shape_mismatch_names_layer() {
        let (store, ids) = store_with(&[("dyn.0.weight", Matrix::zeros((2, 3))), ("dyn.0.bias", Matrix::zeros((1, 2)))]);
        let mut tape = Tape::new();
        let x = tape.row_input(&[1.0, 2.0]);
        let (w, b) = (tape.param(&store, ids[0]), tape.param(&store, ids[1]));
        let err = tape.affine(x, w, b).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(err.to_string().contains("dyn.0.weight"), "{err}");
    }

    #[test]
    fn tanh_matches_libm() {
        let mut worst = 0.0_f64;
        for k in -400_000..=400_000 {
            let x = k as f64 * 1e-4;
            let (a, b) = (tanh(x), x.tanh());
            worst = worst.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
        assert!(worst < 4.0 * f64::EPSILON, "worst relative error {worst:e}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(1e300), 1.0);
        assert_eq!(tanh(-f64::INFINITY), -1.0);
        assert!(tanh(f64::NAN).is_nan());
        assert_eq!(tanh(1e-300), 1e-300);

        let xs: Vec<f64> = (0..1001).map(|k| (k as f64 - 500.0) * 0.013).collect();
        let mut vector = xs.clone();
        tanh_slice(&mut vector);
        let mut scalar = xs.clone();
        tanh_slice_portable(&mut scalar);
        assert_eq!(vector, scalar);
    }

    #[test]
    fn tanh_values_and_derivative_at_zero() {
        let (mut store, ids) = store_with(&[("w", array![[0.0]])]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]);
        let y = tape.tanh(w);
        assert_eq!(tape.value(y)[[0, 0]], 0.0);
        tape.backward_scalar(y, 1.0, &mut store).unwrap();
        assert_eq!(store.grad(ids[0])[[0, 0]], 1.0);

        let mut tape = Tape::new();
        let big = tape.row_input(&[5.0, 10.0, 20.0]);
        let t = tape.tanh(big);
        let v = tape.value(t);
        assert!(v.iter().all(|&x| x > 0.0 && x <= 1.0));
        assert!(v[[0, 0]] <= v[[0, 1]] && v[[0, 1]] <= v[[0, 2]]);
    }

    #[test]
    fn square_derivative() {
        let (mut store, ids) = store_with(&[("w", array![[3.0]])]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]);
        let y = tape.mul(w, w).unwrap();
        assert_eq!(tape.scalar(y), 9.0);
        tape.backward_scalar(y, 1.0, &mut store).unwrap();
        assert_eq!(store.grad(ids[0])[[0, 0]], 6.0);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let (mut store, _) = store_with(&[("w", array![[1.0]])]);
        let tape = Tape::new();
        let err = tape.backward_scalar(NodeId(0), 1.0, &mut store).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn inputs_receive_no_gradient_and_unreached_params_stay_zero() {
        let (mut store, ids) = store_with(&[("a", array![[2.0]]), ("unused", array![[4.0]])]);
        let mut tape = Tape::new();
        let x = tape.row_input(&[3.0]);
        let a = tape.param(&store, ids[0]);
        let y = tape.mul(a, x).unwrap();
        tape.backward_scalar(y, 1.0, &mut store).unwrap();
        assert_eq!(store.grad(ids[0])[[0, 0]], 3.0);
        assert_eq!(store.grad(ids[1])[[0, 0]], 0.0);
    }

    fn chain(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("w1", ParamStore::init_weight(rng, 4, 3)).unwrap();
        store.insert("b1", Matrix::from_shape_fn((1, 4), |_| rng.random_range(-0.5..0.5))).unwrap();
        store.insert("w2", ParamStore::init_weight(rng, 2, 4)).unwrap();
        store.insert("b2", Matrix::from_shape_fn((1, 2), |_| rng.random_range(-0.5..0.5))).unwrap();
        store
    }

    fn chain_loss(tape: &mut Tape, p: &ParamStore, x: &Matrix) -> Result<NodeId> {
        let xi = tape.input(x.clone());
        let ids: Vec<_> = ["w1", "b1", "w2", "b2"].iter().map(|n| p.id(n).unwrap()).collect();
        let w1 = tape.param(p, ids[0]);
        let b1 = tape.param(p, ids[1]);
        let h = tape.affine(xi, w1, b1)?;
        let h = tape.tanh(h);
        let w2 = tape.param(p, ids[2]);
        let b2 = tape.param(p, ids[3]);
        let y = tape.affine(h, w2, b2)?;
        let c = tape.cos(y);
        let prod = tape.mul(c, y)?;
        Ok(tape.sum_squares(prod))
    }

    #[test]
    fn composite_chain_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let mut store = chain(&mut rng);
        let err = finite_difference_check(&mut store, 1e-5, |t, p| chain_loss(t, p, &x)).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn quadratic_loss_gradient_check() {
        let (mut store, _) = store_with(&[("w", array![[0.7, -1.3], [2.1, 0.4]])]);
        let err = finite_difference_check(&mut store, 1e-5, |t, p| {
            let w = t.param(p, p.id("w").unwrap());
            Ok(t.sum_squares(w))
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (mut store, ids) = store_with(&[("w", array![[1.5]])]);
        let err = finite_difference_check(&mut store, 1e-5, |t, _| Ok(t.row_input(&[4.0]))).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!(store.grad(ids[0])[[0, 0]], 0.0);
    }

    #[test]
    fn structural_ops_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("a", Matrix::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0))).unwrap();
        store.insert("m", Matrix::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0))).unwrap();
        let target = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let err = finite_difference_check(&mut store, 1e-5, |t, p| {
            let a = t.param(p, p.id("a").unwrap());
            let m = t.param(p, p.id("m").unwrap());
            let am = t.matmul(a, m)?;
            let sl = t.slice_cols(am, 1, 2)?;
            let cat = t.concat_cols(&[am, sl])?;
            let rows = t.concat_rows(&[cat, cat])?;
            let g = t.gather_rows(rows, Rc::new(vec![0, 5, 2, 2]))?;
            let d = t.sub(g, g)?;
            let g2 = t.add(g, d)?;
            let sc = t.scale(g2, 0.7);
            t.weighted_squared_error(sc, Rc::new(target.clone()), Rc::new(vec![0.1, 0.2, 0.3, 0.4]))
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let mut store = chain(&mut rng);
        let mut tape = Tape::new();
        let loss = chain_loss(&mut tape, &store, &x).unwrap();
        store.zero_grad();
        tape.backward_scalar(loss, 0.37, &mut store).unwrap();
        let g1: Vec<Matrix> = store.ids().map(|id| store.grad(id).clone()).collect();
        store.zero_grad();
        tape.backward_scalar(loss, 0.74, &mut store).unwrap();
        for (id, g) in store.ids().zip(&g1) {
            for (a, b) in store.grad(id).iter().zip(g.iter()) {
                assert!((a - 2.0 * b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn replay_reproduces_forward_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let store = chain(&mut rng);
        let mut tape = Tape::new();
        let loss = chain_loss(&mut tape, &store, &x).unwrap();
        let first = tape.scalar(loss);
        tape.replay(&store);
        assert_eq!(tape.scalar(loss).to_bits(), first.to_bits());
    }

    #[test]
    fn duplicate_block_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::zeros((1, 1))).unwrap();
        assert!(store.insert("w", Matrix::zeros((1, 1))).is_err());
    }
}
