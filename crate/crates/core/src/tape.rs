//! Reverse-mode automatic differentiation on a single-use tape.
//!
//! The op set is deliberately small: what a GRU unroll, affine readouts,
//! element-wise nonlinearities, Gaussian KL and a masked Poisson NLL need.
//! Ops are recorded in build order (inputs before consumers), so the backward
//! pass is one reverse sweep visiting each op exactly once.

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::{BoolTensor, Tensor};
use rand::RngExt;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// C[m,n] = A[m,k] @ B[k,n]
    MatMul { a: NodeId, b: NodeId },
    /// mat[m,n] + row[n] broadcast over rows
    AddRow { mat: NodeId, row: NodeId },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softplus(NodeId),
    /// scale * x + shift element-wise; only the scale matters backward
    AffineConst { a: NodeId, scale: f64 },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    SumAll(NodeId),
    /// Masked Poisson NLL (scalar): sum over include of
    /// lambda - k ln(lambda) + ln(k!), lambda floored at `math::RATE_FLOOR`.
    /// Excluding an element is identical to blocking its output gradient.
    PoissonNll { rates: NodeId, counts: Vec<u32>, include: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by node id, populated only where gradient flow reached.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, zeros if no gradient flowed there.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => Tensor::from_vec(&self.shapes[id.0], g.clone()).unwrap(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get_slice(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// C[m,n] (+)= A @ B with optional transposes, via dgemm strides (no copies).
/// `a` is [m,k] row-major (or [k,m] when `ta`), `b` is [k,n] (or [n,k] when `tb`).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Single-use reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable input (parameter or probed data).
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, masks, noise draws).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        assert_eq!(sa.len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(sb.len(), 2, "matmul: rhs must be 2-D");
        assert_eq!(sa[1], sb[0], "matmul: inner dims {} vs {}", sa[1], sb[0]);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.nodes[a.0].value.data(), false, self.nodes[b.0].value.data(), false, 0.0, &mut out);
        let value = Tensor::from_vec(&[m, n], out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b }, ng)
    }

    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let (sm, sr) = (self.nodes[mat.0].value.shape(), self.nodes[row.0].value.shape());
        assert_eq!(sm.len(), 2, "add_row: mat must be 2-D");
        assert_eq!(sr, &[sm[1]], "add_row: row length {} != cols {}", sr[0], sm[1]);
        let (m, n) = (sm[0], sm[1]);
        let rd = self.nodes[row.0].value.data();
        let mut data = self.nodes[mat.0].value.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rd[j];
            }
        }
        let value = Tensor::from_vec(&[m, n], data).unwrap();
        let ng = self.needs(mat) || self.needs(row);
        self.push(value, Op::AddRow { mat, row }, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(math::sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::ln);
        let ng = self.needs(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(math::softplus);
        let ng = self.needs(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn affine_const(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| scale * x + shift);
        let ng = self.needs(a);
        self.push(value, Op::AffineConst { a, scale }, ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(value, Op::Clamp { a, lo, hi }, ng)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        assert_eq!(sa.len(), 2, "concat_cols: lhs must be 2-D");
        assert_eq!(sb.len(), 2, "concat_cols: rhs must be 2-D");
        assert_eq!(sa[0], sb[0], "concat_cols: row count mismatch");
        let (m, ca, cb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::from_vec(&[m, ca + cb], data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols { a, b }, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let sa = self.nodes[a.0].value.shape();
        assert_eq!(sa.len(), 2, "slice_cols: input must be 2-D");
        assert!(start + len <= sa[1], "slice_cols: range {}..{} out of {} cols", start, start + len, sa[1]);
        let (m, c) = (sa[0], sa[1]);
        let da = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&da[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_vec(&[m, len], data).unwrap();
        let ng = self.needs(a);
        self.push(value, Op::SliceCols { a, start, len }, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Scalar masked Poisson NLL against constant counts with a constant
    /// include mask. Gradient reaches only included elements.
    pub fn poisson_nll(&mut self, rates: NodeId, counts: &[u32], include: &BoolTensor) -> NodeId {
        let vr = &self.nodes[rates.0].value;
        assert_eq!(vr.numel(), counts.len(), "poisson_nll: counts length mismatch");
        assert_eq!(vr.shape(), include.shape(), "poisson_nll: include shape mismatch");
        let mut total = 0.0;
        for ((&r, &k), &inc) in vr.data().iter().zip(counts).zip(include.data()) {
            if inc {
                total += math::poisson_nll_term(r, k);
            }
        }
        let ng = self.needs(rates);
        self.push(
            Tensor::scalar(total),
            Op::PoissonNll { rates, counts: counts.to_vec(), include: include.data().to_vec() },
            ng,
        )
    }

    /// Reverse sweep seeded with 1 at a scalar output.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(CoreError::ShapeMismatch(
                "backward: output is not scalar; use backward_seeded".into(),
            ));
        }
        self.backward_seeded(output, Tensor::scalar(1.0))
    }

    /// Reverse sweep from `output` with an explicit seed gradient. Zeroed
    /// seed elements block gradient flow through those elements.
    pub fn backward_seeded(&mut self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(CoreError::TapeConsumed);
        }
        self.consumed = true;
        if seed.shape() != self.value(output).shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "seed shape {:?} != output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], &g, |gi, _| gi, &g);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b.0], &g, |gi, _| gi, &g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], &g, |gi, _| gi, &g);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads[b.0], &g, |gi, _| -gi, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let vb = self.nodes[b.0].value.data();
                        accumulate(&mut grads[a.0], &g, |gi, o| gi * o, vb);
                    }
                    if self.needs(b) {
                        let va = self.nodes[a.0].value.data();
                        accumulate(&mut grads[b.0], &g, |gi, o| gi * o, va);
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let (m, k, n2) = (sa[0], sa[1], sb[1]);
                    if self.needs(a) {
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                        // dA[m,k] += G[m,n] @ B^T[n,k]
                        let vb = self.nodes[b.0].value.data();
                        gemm(m, n2, k, &g, false, vb, true, 1.0, ga);
                    }
                    if self.needs(b) {
                        let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * n2]);
                        // dB[k,n] += A^T[k,m] @ G[m,n]
                        let va = self.nodes[a.0].value.data();
                        gemm(k, m, n2, va, true, &g, false, 1.0, gb);
                    }
                }
                Op::AddRow { mat, row } => {
                    let (mat, row) = (*mat, *row);
                    let sm = self.nodes[mat.0].value.shape().to_vec();
                    let (m, n2) = (sm[0], sm[1]);
                    if self.needs(mat) {
                        accumulate(&mut grads[mat.0], &g, |gi, _| gi, &g);
                    }
                    if self.needs(row) {
                        let gr = grads[row.0].get_or_insert_with(|| vec![0.0; n2]);
                        for i in 0..m {
                            for j in 0..n2 {
                                gr[j] += g[i * n2 + j];
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let out = self.nodes[i].value.data();
                        accumulate(&mut grads[a.0], &g, |gi, s| gi * s * (1.0 - s), out);
                    }
                }
                Op::Tanh(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let out = self.nodes[i].value.data();
                        accumulate(&mut grads[a.0], &g, |gi, t| gi * (1.0 - t * t), out);
                    }
                }
                Op::Exp(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let out = self.nodes[i].value.data();
                        accumulate(&mut grads[a.0], &g, |gi, e| gi * e, out);
                    }
                }
                Op::Ln(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let inp = self.nodes[a.0].value.data();
                        accumulate(&mut grads[a.0], &g, |gi, x| gi / x, inp);
                    }
                }
                Op::Softplus(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let inp = self.nodes[a.0].value.data();
                        accumulate(&mut grads[a.0], &g, |gi, x| gi * math::sigmoid(x), inp);
                    }
                }
                Op::AffineConst { a, scale } => {
                    let (a, scale) = (*a, *scale);
                    if self.needs(a) {
                        accumulate(&mut grads[a.0], &g, |gi, _| gi * scale, &g);
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    if self.needs(a) {
                        let inp = self.nodes[a.0].value.data();
                        accumulate(
                            &mut grads[a.0],
                            &g,
                            |gi, x| if x >= lo && x <= hi { gi } else { 0.0 },
                            inp,
                        );
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a.0].value.shape()[1];
                    let cb = self.nodes[b.0].value.shape()[1];
                    let m = self.nodes[a.0].value.shape()[0];
                    if self.needs(a) {
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; m * ca]);
                        for i2 in 0..m {
                            for j in 0..ca {
                                ga[i2 * ca + j] += g[i2 * (ca + cb) + j];
                            }
                        }
                    }
                    if self.needs(b) {
                        let gb = grads[b.0].get_or_insert_with(|| vec![0.0; m * cb]);
                        for i2 in 0..m {
                            for j in 0..cb {
                                gb[i2 * cb + j] += g[i2 * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let (a, start, len) = (*a, *start, *len);
                    if self.needs(a) {
                        let sa = self.nodes[a.0].value.shape().to_vec();
                        let (m, c) = (sa[0], sa[1]);
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; m * c]);
                        for i2 in 0..m {
                            for j in 0..len {
                                ga[i2 * c + start + j] += g[i2 * len + j];
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let n2 = self.nodes[a.0].value.numel();
                        let ga = grads[a.0].get_or_insert_with(|| vec![0.0; n2]);
                        for v in ga.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::PoissonNll { rates, counts, include } => {
                    let rates = *rates;
                    if self.needs(rates) {
                        let vr = self.nodes[rates.0].value.data();
                        let n2 = vr.len();
                        let counts = counts.clone();
                        let include = include.clone();
                        let ga = grads[rates.0].get_or_insert_with(|| vec![0.0; n2]);
                        for e in 0..n2 {
                            if include[e] {
                                ga[e] += g[0] * math::poisson_nll_grad(vr[e], counts[e]);
                            }
                        }
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// grads[target] += f(g[i], other[i]) element-wise. `other` must be g-sized
/// or equal to g itself for ops that ignore it.
fn accumulate(
    target: &mut Option<Vec<f64>>,
    g: &[f64],
    f: impl Fn(f64, f64) -> f64,
    other: &[f64],
) {
    let t = target.get_or_insert_with(|| vec![0.0; g.len()]);
    debug_assert_eq!(t.len(), g.len());
    for i in 0..g.len() {
        t[i] += f(g[i], other[i]);
    }
}

/// Run a graph-building closure over fresh differentiable leaves.
/// Returns output values, the tape, and leaf/output ids for backward calls.
pub fn forward<F>(build: F, inputs: &[Tensor]) -> Result<(Vec<Tensor>, Tape, Vec<NodeId>, Vec<NodeId>)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Vec<NodeId>,
{
    let mut tape = Tape::new();
    let leaf_ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out_ids = build(&mut tape, &leaf_ids);
    let mut outputs = Vec::with_capacity(out_ids.len());
    for &id in &out_ids {
        let v = tape.value(id).clone();
        if !v.is_finite() {
            return Err(CoreError::NonFinite("graph output".into()));
        }
        outputs.push(v);
    }
    Ok((outputs, tape, leaf_ids, out_ids))
}

/// Compare analytic gradients of a scalar-valued graph against central finite
/// differences at `n_probes` randomly chosen input coordinates.
///
/// Returns max over probes of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor],
    n_probes: usize,
    fd_step: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    if n_probes == 0 {
        return Err(CoreError::InvalidArgument("grad_check: n_probes must be >= 1".into()));
    }
    let scalar_build = |tape: &mut Tape, ids: &[NodeId]| vec![build(tape, ids)];
    let (outputs, mut tape, leaf_ids, out_ids) = forward(scalar_build, inputs)?;
    if outputs[0].numel() != 1 {
        return Err(CoreError::InvalidArgument("grad_check: graph output must be scalar".into()));
    }
    let grads = tape.backward(out_ids[0])?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let (out, _, _, _) = forward(|t, ids| vec![build(t, ids)], perturbed)?;
        Ok(out[0].item())
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if coords.is_empty() {
        return Err(CoreError::InvalidArgument("grad_check: no input coordinates".into()));
    }

    let mut rng = crate::rng::stream(seed, "grad-check-probes");
    let mut max_rel = 0.0f64;
    for _ in 0..n_probes {
        let (ti, ei) = coords[rng.random_range(0..coords.len())];
        let mut plus = inputs.to_vec();
        plus[ti].data_mut()[ei] += fd_step;
        let mut minus = inputs.to_vec();
        minus[ti].data_mut()[ei] -= fd_step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * fd_step);
        let analytic = grads.get(leaf_ids[ti]).data()[ei];
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_backward() {
        // f(x) = x*x at x=[3] -> [9], grad 6
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        assert_eq!(tape.value(y).item(), 9.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn matmul_identity_passes_through() {
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::from_vec(&[3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let i = tape.constant(eye);
        let m = tape.var(a.clone());
        let out = tape.matmul(i, m);
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn tape_is_single_use() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(CoreError::TapeConsumed)));
    }

    #[test]
    fn zero_seed_blocks_all_gradients() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.mul(x, x);
        let grads = tape.backward_seeded(y, Tensor::zeros(&[3])).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let x0 = Tensor::from_vec(&[2, 2], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let run = |scale: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.var(x0.clone());
            let s = tape.sigmoid(x);
            let t = tape.tanh(s);
            let seed = Tensor::from_vec(&[2, 2], vec![scale, 2.0 * scale, -scale, 0.5 * scale]).unwrap();
            let grads = tape.backward_seeded(t, seed).unwrap();
            grads.get(x).data().to_vec()
        };
        let g1 = run(1.0);
        let g3 = run(3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn grad_check_linear_map_is_exact() {
        let w = Tensor::from_vec(&[3, 2], vec![0.2, -0.5, 1.0, 0.3, -0.7, 0.9]).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![0.4, -1.1, 0.6]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[1], ids[0]);
                tape.sum_all(y)
            },
            &[w, x],
            20,
            1e-5,
            11,
        )
        .unwrap();
        assert!(err < 1e-8, "linear map FD error {err}");
    }

    #[test]
    fn grad_check_softplus_chain() {
        let x = Tensor::from_vec(&[4], vec![0.5, -0.3, 1.2, -2.0]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let a = tape.softplus(ids[0]);
                let b = tape.softplus(a);
                let c = tape.mul(b, b);
                tape.sum_all(c)
            },
            &[x],
            40,
            1e-5,
            12,
        )
        .unwrap();
        assert!(err < 1e-5, "softplus chain FD error {err}");
    }

    #[test]
    fn grad_check_masked_poisson_nll() {
        let rates = Tensor::from_vec(&[2, 3], vec![0.5, 1.5, 0.2, 2.0, 0.8, 1.1]).unwrap();
        let counts = [1u32, 0, 2, 3, 0, 1];
        let include =
            BoolTensor::from_vec(&[2, 3], vec![true, false, true, true, true, false]).unwrap();
        let err = grad_check(
            |tape, ids| tape.poisson_nll(ids[0], &counts, &include),
            &[rates],
            30,
            1e-6,
            13,
        )
        .unwrap();
        assert!(err < 1e-6, "poisson nll FD error {err}");
    }

    #[test]
    fn fused_nll_matches_elementwise_composition() {
        // Same loss assembled from primitives; both value and parameter
        // gradient must agree with the fused op.
        let rates0 = Tensor::from_vec(&[4], vec![0.5, 1.5, 0.25, 2.0]).unwrap();
        let counts = [1u32, 0, 2, 3];
        let include = BoolTensor::from_vec(&[4], vec![true, false, true, true]).unwrap();

        let mut t1 = Tape::new();
        let r1 = t1.var(rates0.clone());
        let fused = t1.poisson_nll(r1, &counts, &include);
        let v_fused = t1.value(fused).item();
        let g_fused = t1.backward(fused).unwrap().get(r1);

        let mut t2 = Tape::new();
        let r2 = t2.var(rates0.clone());
        let kvec = Tensor::from_vec(&[4], counts.iter().map(|&k| k as f64).collect()).unwrap();
        let lnfact = Tensor::from_vec(&[4], counts.iter().map(|&k| math::ln_factorial(k)).collect()).unwrap();
        let k = t2.constant(kvec);
        let lf = t2.constant(lnfact);
        let inc = t2.constant(include.to_f64());
        let lnr = t2.ln(r2);
        let klnr = t2.mul(k, lnr);
        let a = t2.sub(r2, klnr);
        let b = t2.add(a, lf);
        let masked = t2.mul(inc, b);
        let composed = t2.sum_all(masked);
        let v_comp = t2.value(composed).item();
        let g_comp = t2.backward(composed).unwrap().get(r2);

        assert!((v_fused - v_comp).abs() < 1e-12);
        for (a, b) in g_fused.data().iter().zip(g_comp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let cat = tape.concat_cols(ids[0], ids[1]);
                let left = tape.slice_cols(cat, 1, 3);
                let sq = tape.mul(left, left);
                tape.sum_all(sq)
            },
            &[a, b],
            30,
            1e-5,
            14,
        )
        .unwrap();
        assert!(err < 1e-7, "concat/slice FD error {err}");
    }

    #[test]
    fn matmul_with_zero_inner_dim_is_zero() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::zeros(&[3, 0]));
        let b = tape.var(Tensor::zeros(&[0, 4]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).shape(), &[3, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
    }
}
