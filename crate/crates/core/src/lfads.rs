//! The sequential variational autoencoder at desk scale: a bidirectional GRU
//! encoder produces a Gaussian latent code that seeds a generator GRU; a
//! controller GRU compares a per-step encoding of the data with the evolving
//! factors and injects a time-varying input; factors read out exponential-link
//! Poisson rates. The composite loss is reconstruction NLL plus scaled KL and
//! L2 penalties.

use crate::error::{CoreError, Result};

use crate::rng::{stream, substream};
use crate::tape::{NodeId, Tape};
use crate::tensor::{BoolTensor, SpikeTensor, Tensor};
use rand::RngExt;
use serde::{Deserialize, Serialize};

/// Log-variances are clamped to +/- this before sampling or KL evaluation.
pub const LOGVAR_CLAMP: f64 = 16.0;

/// Network sizes. `u_dim = 0` degenerates to the autonomous model: the
/// controller path is skipped entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub enc_dim: usize,
    pub gen_dim: usize,
    pub con_dim: usize,
    pub factor_dim: usize,
    pub z_dim: usize,
    pub u_dim: usize,
    pub n_neurons: usize,
    pub n_bins: usize,
}

impl Architecture {
    /// Default desk-scale architecture for a dataset of the given shape.
    pub fn desk(n_neurons: usize, n_bins: usize) -> Self {
        Architecture {
            enc_dim: 64,
            gen_dim: 64,
            con_dim: 64,
            factor_dim: 20,
            z_dim: 32,
            u_dim: 2,
            n_neurons,
            n_bins,
        }
    }

    /// Small architecture for fast tests.
    pub fn tiny(n_neurons: usize, n_bins: usize) -> Self {
        Architecture {
            enc_dim: 8,
            gen_dim: 8,
            con_dim: 8,
            factor_dim: 4,
            z_dim: 4,
            u_dim: 2,
            n_neurons,
            n_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_dim == 0
            || self.gen_dim == 0
            || self.con_dim == 0
            || self.factor_dim == 0
            || self.z_dim == 0
            || self.n_neurons == 0
            || self.n_bins == 0
        {
            return Err(CoreError::InvalidArgument("architecture dims must be >= 1".into()));
        }
        if self.factor_dim > self.gen_dim {
            return Err(CoreError::InvalidArgument("factor_dim must be <= gen_dim".into()));
        }
        Ok(())
    }

    fn con_input_dim(&self) -> usize {
        2 * self.enc_dim + self.factor_dim
    }
}

/// The searched hyperparameters plus the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub l2_gen_scale: f64,
    pub l2_con_scale: f64,
    pub kl_ic_scale: f64,
    pub kl_co_scale: f64,
    pub dropout_prob: f64,
    pub keep_ratio: f64,
    pub learning_rate: f64,
}

impl Default for HyperParams {
    /// Search-space initialization values; scales sit at the geometric middle
    /// of their log-uniform ranges.
    fn default() -> Self {
        HyperParams {
            l2_gen_scale: 500.0,
            l2_con_scale: 500.0,
            kl_ic_scale: 0.5,
            kl_co_scale: 0.5,
            dropout_prob: 0.35,
            keep_ratio: 0.5,
            learning_rate: 0.01,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.l2_gen_scale < 0.0 || self.l2_con_scale < 0.0 || self.kl_ic_scale < 0.0 || self.kl_co_scale < 0.0 {
            return Err(CoreError::InvalidArgument("penalty scales must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(CoreError::InvalidArgument("dropout_prob must be in [0,1)".into()));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio < 1.0) {
            return Err(CoreError::InvalidArgument("keep_ratio must be in (0,1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidArgument("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.l2_gen_scale,
            self.l2_con_scale,
            self.kl_ic_scale,
            self.kl_co_scale,
            self.dropout_prob,
            self.keep_ratio,
            self.learning_rate,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return Err(CoreError::InvalidArgument("expected 7 hyperparameters".into()));
        }
        Ok(HyperParams {
            l2_gen_scale: v[0],
            l2_con_scale: v[1],
            kl_ic_scale: v[2],
            kl_co_scale: v[3],
            dropout_prob: v[4],
            keep_ratio: v[5],
            learning_rate: v[6],
        })
    }
}

/// Deterministic evaluation (posterior means) or stochastic ELBO sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    PosteriorSample { seed: u64 },
    PosteriorMean,
}

// ---------------------------------------------------------------------------
// Parameters

/// One GRU's weights, gates fused column-wise in order [reset, update, cand].
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_x: Tensor,   // [in, 3H]
    pub w_hru: Tensor, // [H, 2H]
    pub w_hc: Tensor,  // [H, H]
    pub b_ru: Tensor,  // [2H]
    pub b_c: Tensor,   // [H]
}

impl GruWeights {
    fn init<R: RngExt>(in_dim: usize, h: usize, rng: &mut R) -> Self {
        let std = if in_dim > 0 { 1.0 / (in_dim as f64).sqrt() } else { 0.0 };
        GruWeights {
            w_x: Tensor::randn(&[in_dim, 3 * h], std, rng),
            w_hru: hstack(&orthogonal(h, rng), &orthogonal(h, rng)),
            w_hc: orthogonal(h, rng),
            b_ru: Tensor::zeros(&[2 * h]),
            b_c: Tensor::zeros(&[h]),
        }
    }

    /// Squared Frobenius norm of the recurrent (h-side) matrices and their
    /// total element count, for size-independent L2 penalties.
    pub fn recurrent_l2(&self) -> (f64, usize) {
        let sq: f64 = self
            .w_hru
            .data()
            .iter()
            .chain(self.w_hc.data())
            .map(|v| v * v)
            .sum();
        (sq, self.w_hru.numel() + self.w_hc.numel())
    }
}

/// Affine readout y = x W + b.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineWeights {
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

impl AffineWeights {
    fn init<R: RngExt>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = if in_dim > 0 { 1.0 / (in_dim as f64).sqrt() } else { 0.0 };
        AffineWeights { w: Tensor::randn(&[in_dim, out_dim], std, rng), b: Tensor::zeros(&[out_dim]) }
    }
}

/// Orthogonal-ish [h, h] matrix: Q factor of a Gaussian draw.
fn orthogonal<R: RngExt>(h: usize, rng: &mut R) -> Tensor {
    let g = Tensor::randn(&[h, h], 1.0, rng);
    let m = nalgebra::DMatrix::from_row_slice(h, h, g.data());
    let q = m.qr().q();
    let mut out = Tensor::zeros(&[h, h]);
    for i in 0..h {
        for j in 0..h {
            out[[i, j]] = q[(i, j)];
        }
    }
    out
}

fn hstack(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, ca + cb]);
    for i in 0..m {
        for j in 0..ca {
            out[[i, j]] = a[[i, j]];
        }
        for j in 0..cb {
            out[[i, ca + j]] = b[[i, j]];
        }
    }
    out
}

/// All trainable tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct LfadsParams {
    pub enc_fwd: GruWeights,
    pub enc_bwd: GruWeights,
    pub ci_fwd: GruWeights,
    pub ci_bwd: GruWeights,
    pub controller: GruWeights,
    pub generator: GruWeights,
    pub z_map: AffineWeights,    // 2E -> 2Z
    pub g0_map: AffineWeights,   // Z -> G
    pub u_map: AffineWeights,    // C -> 2U
    pub fac_map: AffineWeights,  // G -> F
    pub rate_map: AffineWeights, // F -> N (log rates)
}

macro_rules! visit_params {
    ($self:expr, $f:expr) => {{
        let f = $f;
        for (prefix, gru) in [
            ("enc_fwd", &$self.enc_fwd),
            ("enc_bwd", &$self.enc_bwd),
            ("ci_fwd", &$self.ci_fwd),
            ("ci_bwd", &$self.ci_bwd),
            ("controller", &$self.controller),
            ("generator", &$self.generator),
        ] {
            f(format!("{prefix}.w_x"), &gru.w_x);
            f(format!("{prefix}.w_hru"), &gru.w_hru);
            f(format!("{prefix}.w_hc"), &gru.w_hc);
            f(format!("{prefix}.b_ru"), &gru.b_ru);
            f(format!("{prefix}.b_c"), &gru.b_c);
        }
        for (prefix, aff) in [
            ("z_map", &$self.z_map),
            ("g0_map", &$self.g0_map),
            ("u_map", &$self.u_map),
            ("fac_map", &$self.fac_map),
            ("rate_map", &$self.rate_map),
        ] {
            f(format!("{prefix}.w"), &aff.w);
            f(format!("{prefix}.b"), &aff.b);
        }
    }};
}

impl LfadsParams {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = stream(seed, "param-init");
        let (e, g, c) = (arch.enc_dim, arch.gen_dim, arch.con_dim);
        let n = arch.n_neurons;
        LfadsParams {
            enc_fwd: GruWeights::init(n, e, &mut rng),
            enc_bwd: GruWeights::init(n, e, &mut rng),
            ci_fwd: GruWeights::init(n, e, &mut rng),
            ci_bwd: GruWeights::init(n, e, &mut rng),
            controller: GruWeights::init(arch.con_input_dim(), c, &mut rng),
            generator: GruWeights::init(arch.u_dim, g, &mut rng),
            z_map: AffineWeights::init(2 * e, 2 * arch.z_dim, &mut rng),
            g0_map: AffineWeights::init(arch.z_dim, g, &mut rng),
            u_map: AffineWeights::init(c, 2 * arch.u_dim, &mut rng),
            fac_map: AffineWeights::init(g, arch.factor_dim, &mut rng),
            rate_map: AffineWeights::init(arch.factor_dim, n, &mut rng),
        }
    }

    /// Visit every parameter tensor in a fixed order (the order used for
    /// gradient vectors, optimizer state, and checkpoints).
    pub fn for_each(&self, mut f: impl FnMut(String, &Tensor)) {
        visit_params!(self, &mut f);
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each(|name, t| out.push((name, t.clone())));
        out
    }

    /// Rebuild from (name, tensor) pairs in `named()` order.
    pub fn from_named(arch: &Architecture, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut proto = LfadsParams::init(arch, 0);
        let mut expected = Vec::new();
        proto.for_each(|name, t| expected.push((name, t.shape().to_vec())));
        if expected.len() != tensors.len() {
            return Err(CoreError::Container(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((ename, eshape), (name, t)) in expected.iter().zip(tensors) {
            if ename != name || eshape != t.shape() {
                return Err(CoreError::Container(format!(
                    "parameter mismatch: expected {ename}{eshape:?}, got {name}{:?}",
                    t.shape()
                )));
            }
        }
        let values: Vec<Tensor> = tensors.iter().map(|(_, t)| t.clone()).collect();
        proto.assign_flat(&values);
        Ok(proto)
    }

    /// Overwrite all parameters from a flat list in `for_each` order.
    pub fn assign_flat(&mut self, values: &[Tensor]) {
        let mut i = 0;
        for gru in [
            &mut self.enc_fwd,
            &mut self.enc_bwd,
            &mut self.ci_fwd,
            &mut self.ci_bwd,
            &mut self.controller,
            &mut self.generator,
        ] {
            gru.w_x = values[i].clone();
            gru.w_hru = values[i + 1].clone();
            gru.w_hc = values[i + 2].clone();
            gru.b_ru = values[i + 3].clone();
            gru.b_c = values[i + 4].clone();
            i += 5;
        }
        for aff in [
            &mut self.z_map,
            &mut self.g0_map,
            &mut self.u_map,
            &mut self.fac_map,
            &mut self.rate_map,
        ] {
            aff.w = values[i].clone();
            aff.b = values[i + 1].clone();
            i += 2;
        }
        debug_assert_eq!(i, values.len());
    }

    pub fn n_tensors() -> usize {
        40
    }
}

// ---------------------------------------------------------------------------
// Model

/// Parameters bound to an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct LfadsModel {
    pub arch: Architecture,
    pub params: LfadsParams,
}

/// Per-trial inferred quantities from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// [batch, n_bins, n_neurons], spikes per BIN, strictly positive.
    pub rates: Tensor,
    /// [batch, n_bins, factor_dim].
    pub factors: Tensor,
    pub z_mean: Tensor,   // [batch, z_dim]
    pub z_logvar: Tensor, // [batch, z_dim]
    pub u_mean: Tensor,   // [batch, n_bins, u_dim]
    pub u_logvar: Tensor, // [batch, n_bins, u_dim]
    pub z_sample: Tensor, // [batch, z_dim]
    pub u_sample: Tensor, // [batch, n_bins, u_dim]
}

/// Loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_ic: f64,
    pub kl_co: f64,
    pub l2: f64,
    pub total: f64,
    pub n_included: usize,
}

struct GruNodes {
    w_x: NodeId,
    w_hru: NodeId,
    w_hc: NodeId,
    b_ru: NodeId,
    b_c: NodeId,
    h: usize,
}

struct AffineNodes {
    w: NodeId,
    b: NodeId,
}

pub(crate) struct ParamNodes {
    enc_fwd: GruNodes,
    enc_bwd: GruNodes,
    ci_fwd: GruNodes,
    ci_bwd: GruNodes,
    controller: GruNodes,
    generator: GruNodes,
    z_map: AffineNodes,
    g0_map: AffineNodes,
    u_map: AffineNodes,
    fac_map: AffineNodes,
    rate_map: AffineNodes,
    /// Every parameter leaf in `LfadsParams::for_each` order.
    pub flat: Vec<NodeId>,
}

/// Everything the loss and the metric extraction need from one build.
pub(crate) struct GraphHandles {
    pub params: ParamNodes,
    pub rate_nodes: Vec<NodeId>,
    pub fac_nodes: Vec<NodeId>,
    pub z_mean: NodeId,
    pub z_logvar: NodeId,
    pub u_mean_nodes: Vec<NodeId>,
    pub u_logvar_nodes: Vec<NodeId>,
    pub z_sample: NodeId,
    pub u_sample_nodes: Vec<NodeId>,
}

impl ParamNodes {
    /// Rebuild the structured view from leaf ids in `LfadsParams::for_each`
    /// order (the same order `assign_flat` consumes).
    pub(crate) fn from_flat(arch: &Architecture, flat: Vec<NodeId>) -> ParamNodes {
        assert_eq!(flat.len(), LfadsParams::n_tensors(), "parameter leaf count");
        let mut it = flat.iter().copied();
        let gru = |h: usize, it: &mut dyn Iterator<Item = NodeId>| GruNodes {
            w_x: it.next().unwrap(),
            w_hru: it.next().unwrap(),
            w_hc: it.next().unwrap(),
            b_ru: it.next().unwrap(),
            b_c: it.next().unwrap(),
            h,
        };
        let enc_fwd = gru(arch.enc_dim, &mut it);
        let enc_bwd = gru(arch.enc_dim, &mut it);
        let ci_fwd = gru(arch.enc_dim, &mut it);
        let ci_bwd = gru(arch.enc_dim, &mut it);
        let controller = gru(arch.con_dim, &mut it);
        let generator = gru(arch.gen_dim, &mut it);
        let aff = |it: &mut dyn Iterator<Item = NodeId>| AffineNodes {
            w: it.next().unwrap(),
            b: it.next().unwrap(),
        };
        let z_map = aff(&mut it);
        let g0_map = aff(&mut it);
        let u_map = aff(&mut it);
        let fac_map = aff(&mut it);
        let rate_map = aff(&mut it);
        assert!(it.next().is_none());
        ParamNodes {
            enc_fwd,
            enc_bwd,
            ci_fwd,
            ci_bwd,
            controller,
            generator,
            z_map,
            g0_map,
            u_map,
            fac_map,
            rate_map,
            flat,
        }
    }
}

fn gru_step(tape: &mut Tape, g: &GruNodes, x: NodeId, h: NodeId) -> NodeId {
    let hd = g.h;
    let xw = tape.matmul(x, g.w_x);
    let hru = tape.matmul(h, g.w_hru);
    let x_ru = tape.slice_cols(xw, 0, 2 * hd);
    let pre_ru = tape.add(x_ru, hru);
    let pre_ru = tape.add_row(pre_ru, g.b_ru);
    let ru = tape.sigmoid(pre_ru);
    let r = tape.slice_cols(ru, 0, hd);
    let u = tape.slice_cols(ru, hd, hd);
    let rh = tape.mul(r, h);
    let rhw = tape.matmul(rh, g.w_hc);
    let x_c = tape.slice_cols(xw, 2 * hd, hd);
    let pre_c = tape.add(x_c, rhw);
    let pre_c = tape.add_row(pre_c, g.b_c);
    let c = tape.tanh(pre_c);
    // h' = (1 - u) h + u c, written as h + u (c - h)
    let cmh = tape.sub(c, h);
    let step = tape.mul(u, cmh);
    tape.add(h, step)
}

fn affine(tape: &mut Tape, a: &AffineNodes, x: NodeId) -> NodeId {
    let xw = tape.matmul(x, a.w);
    tape.add_row(xw, a.b)
}

/// Inverted dropout as multiplication by a Bernoulli(1-p)/(1-p) constant.
fn dropout(tape: &mut Tape, x: NodeId, p: f64, seed: u64, tag: u64) -> NodeId {
    if p <= 0.0 {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let mut rng = substream(seed, "dropout", tag);
    let gain = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { gain })
        .collect();
    let m = tape.constant(Tensor::from_vec(&shape, mask).unwrap());
    tape.mul(x, m)
}

/// mean + eps * exp(logvar / 2) with a constant eps draw.
fn sample_gaussian(tape: &mut Tape, mean: NodeId, logvar: NodeId, eps: NodeId) -> NodeId {
    let half = tape.affine_const(logvar, 0.5, 0.0);
    let std = tape.exp(half);
    let noise = tape.mul(eps, std);
    tape.add(mean, noise)
}

/// Closed-form KL(N(mean, exp(logvar)) || N(0, prior_var I)) summed over all
/// elements, as tape nodes.
pub(crate) fn kl_gaussian_nodes(tape: &mut Tape, mean: NodeId, logvar: NodeId, prior_var: f64) -> NodeId {
    let ev = tape.exp(logvar);
    let m2 = tape.mul(mean, mean);
    let s = tape.add(ev, m2);
    let scaled = tape.affine_const(s, 1.0 / prior_var, prior_var.ln() - 1.0);
    let inner = tape.sub(scaled, logvar);
    let summed = tape.sum_all(inner);
    tape.affine_const(summed, 0.5, 0.0)
}

/// Closed-form KL of a diagonal Gaussian against N(0, prior_var I), summed
/// over dimensions.
pub fn kl_gaussian(mean: &Tensor, logvar: &Tensor, prior_var: f64) -> f64 {
    debug_assert_eq!(mean.shape(), logvar.shape());
    mean.data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &v)| 0.5 * ((v.exp() + m * m) / prior_var - 1.0 - v + prior_var.ln()))
        .sum()
}

impl LfadsModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(LfadsModel { arch, params: LfadsParams::init(&arch, seed) })
    }

    /// Register every parameter tensor as a tape leaf, in `for_each` order.
    pub(crate) fn register_params(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        let mut flat = Vec::with_capacity(LfadsParams::n_tensors());
        self.params.for_each(|_, t| {
            let id = if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) };
            flat.push(id);
        });
        ParamNodes::from_flat(&self.arch, flat)
    }

    /// Record the full forward computation on `tape`.
    ///
    /// `x` is the (already masked and rescaled) input, [batch, n_bins,
    /// n_neurons]. `dropout_cfg` is (prob, seed) during training, None for
    /// evaluation. With `trainable` the parameters are registered as
    /// differentiable leaves.
    pub(crate) fn build_graph(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: RunMode,
        dropout_cfg: Option<(f64, u64)>,
        trainable: bool,
    ) -> GraphHandles {
        let params = self.register_params(tape, trainable);
        build_graph_with(&self.arch, tape, params, x, mode, dropout_cfg)
    }
}

/// Record the forward computation against already-registered parameter
/// leaves; values come from the tape, not from any `LfadsParams`.
pub(crate) fn build_graph_with(
    arch: &Architecture,
    tape: &mut Tape,
    params: ParamNodes,
    x: &Tensor,
    mode: RunMode,
    dropout_cfg: Option<(f64, u64)>,
) -> GraphHandles {
    {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "input must be [batch, bin, neuron]");
        assert_eq!(shape[1], arch.n_bins, "input bins {} != arch.n_bins {}", shape[1], arch.n_bins);
        assert_eq!(
            shape[2], arch.n_neurons,
            "input neurons {} != arch.n_neurons {}",
            shape[2], arch.n_neurons
        );
    }
    let (batch, t_len, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ParamNodes {
        enc_fwd,
        enc_bwd,
        ci_fwd,
        ci_bwd,
        controller,
        generator,
        z_map,
        g0_map,
        u_map,
        fac_map,
        rate_map,
        flat,
    } = params;

    // Per-step input slices (constants) with input-layer dropout.
    let mut x_steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut step = Tensor::zeros(&[batch, n]);
        for b in 0..batch {
            for j in 0..n {
                step[[b, j]] = x[[b, t, j]];
            }
        }
        let mut node = tape.constant(step);
        if let Some((p, seed)) = dropout_cfg {
            node = dropout(tape, node, p, seed, t as u64);
        }
        x_steps.push(node);
    }

    // Bidirectional z encoder: final states only.
    let mut h = tape.constant(Tensor::zeros(&[batch, arch.enc_dim]));
    for &xt in &x_steps {
        h = gru_step(tape, &enc_fwd, xt, h);
    }
    let enc_final_fwd = h;
    let mut h = tape.constant(Tensor::zeros(&[batch, arch.enc_dim]));
    for &xt in x_steps.iter().rev() {
        h = gru_step(tape, &enc_bwd, xt, h);
    }
    let enc_final_bwd = h;
    let mut enc_final = tape.concat_cols(enc_final_fwd, enc_final_bwd);
    if let Some((p, seed)) = dropout_cfg {
        enc_final = dropout(tape, enc_final, p, seed, 1_000_000);
    }
    let z_params = affine(tape, &z_map, enc_final);
    let z_mean = tape.slice_cols(z_params, 0, arch.z_dim);
    let z_logvar_raw = tape.slice_cols(z_params, arch.z_dim, arch.z_dim);
    let z_logvar = tape.clamp(z_logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);

    let z_sample = match mode {
        RunMode::PosteriorMean => z_mean,
        RunMode::PosteriorSample { seed } => {
            let mut rng = stream(seed, "z-eps");
            let eps = tape.constant(Tensor::randn(&[batch, arch.z_dim], 1.0, &mut rng));
            sample_gaussian(tape, z_mean, z_logvar, eps)
        }
    };

    // Per-step controller-input encoding (both directions see the full
    // sequence, so the encoding at t includes x(t)).
    let u_on = arch.u_dim > 0;
    let mut ci_steps: Vec<NodeId> = Vec::new();
    if u_on {
        let mut fwd_states = Vec::with_capacity(t_len);
        let mut h = tape.constant(Tensor::zeros(&[batch, arch.enc_dim]));
        for &xt in &x_steps {
            h = gru_step(tape, &ci_fwd, xt, h);
            fwd_states.push(h);
        }
        let mut bwd_states = Vec::with_capacity(t_len);
        let mut h = tape.constant(Tensor::zeros(&[batch, arch.enc_dim]));
        for t in (0..t_len).rev() {
            h = gru_step(tape, &ci_bwd, x_steps[t], h);
            bwd_states.push(h);
        }
        bwd_states.reverse();
        for t in 0..t_len {
            let mut e = tape.concat_cols(fwd_states[t], bwd_states[t]);
            if let Some((p, seed)) = dropout_cfg {
                e = dropout(tape, e, p, seed, 2_000_000 + t as u64);
            }
            ci_steps.push(e);
        }
    }

    // Decode loop: generator seeded from z, controller injecting u(t).
    let mut g = affine(tape, &g0_map, z_sample);
    let mut f_prev = affine(tape, &fac_map, g);
    let mut con = tape.constant(Tensor::zeros(&[batch, arch.con_dim]));

    let mut rate_nodes = Vec::with_capacity(t_len);
    let mut fac_nodes = Vec::with_capacity(t_len);
    let mut u_mean_nodes = Vec::new();
    let mut u_logvar_nodes = Vec::new();
    let mut u_sample_nodes = Vec::new();

    for t in 0..t_len {
        let u_sample = if u_on {
            let con_in = tape.concat_cols(ci_steps[t], f_prev);
            con = gru_step(tape, &controller, con_in, con);
            let mut con_out = con;
            if let Some((p, seed)) = dropout_cfg {
                con_out = dropout(tape, con_out, p, seed, 3_000_000 + t as u64);
            }
            let u_params = affine(tape, &u_map, con_out);
            let u_mean = tape.slice_cols(u_params, 0, arch.u_dim);
            let u_logvar_raw = tape.slice_cols(u_params, arch.u_dim, arch.u_dim);
            let u_logvar = tape.clamp(u_logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
            u_mean_nodes.push(u_mean);
            u_logvar_nodes.push(u_logvar);
            let s = match mode {
                RunMode::PosteriorMean => u_mean,
                RunMode::PosteriorSample { seed } => {
                    let mut rng = substream(seed, "u-eps", t as u64);
                    let eps = tape.constant(Tensor::randn(&[batch, arch.u_dim], 1.0, &mut rng));
                    sample_gaussian(tape, u_mean, u_logvar, eps)
                }
            };
            u_sample_nodes.push(s);
            s
        } else {
            tape.constant(Tensor::zeros(&[batch, 0]))
        };

        g = gru_step(tape, &generator, u_sample, g);
        let mut g_out = g;
        if let Some((p, seed)) = dropout_cfg {
            g_out = dropout(tape, g_out, p, seed, 4_000_000 + t as u64);
        }
        let f = affine(tape, &fac_map, g_out);
        let log_rates = affine(tape, &rate_map, f);
        let rates = tape.exp(log_rates);
        fac_nodes.push(f);
        rate_nodes.push(rates);
        f_prev = f;
    }

    GraphHandles {
        params: ParamNodes {
            enc_fwd,
            enc_bwd,
            ci_fwd,
            ci_bwd,
            controller,
            generator,
            z_map,
            g0_map,
            u_map,
            fac_map,
            rate_map,
            flat,
        },
        rate_nodes,
        fac_nodes,
        z_mean,
        z_logvar,
        u_mean_nodes,
        u_logvar_nodes,
        z_sample,
        u_sample_nodes,
    }
}

impl LfadsModel {
    /// Evaluation forward pass (no gradients recorded as trainable).
    pub fn run_forward(&self, x: &Tensor, mode: RunMode) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let handles = self.build_graph(&mut tape, x, mode, None, false);
        let out = extract_output(&tape, &self.arch, x.shape()[0], &handles);
        if !out.rates.is_finite() {
            return Err(CoreError::NonFinite("inferred rates".into()));
        }
        Ok(out)
    }

    /// Loss terms computed from a finished forward pass (no tape). This is
    /// the same formula the training path assembles as tape nodes.
    pub fn loss_breakdown(
        &self,
        output: &ModelOutput,
        counts: &SpikeTensor,
        include: &BoolTensor,
        hps: &HyperParams,
        kl_ramp: f64,
    ) -> Result<LossBreakdown> {
        let (nll, n_inc) = crate::masking::masked_poisson_nll(&output.rates, counts, include)?;
        let recon = if n_inc > 0 { nll / n_inc as f64 } else { 0.0 };
        let batch = counts.n_trials() as f64;
        let kl_ic_raw = kl_gaussian(&output.z_mean, &output.z_logvar, 1.0) / batch;
        let kl_co_raw = if self.arch.u_dim > 0 {
            kl_gaussian(&output.u_mean, &output.u_logvar, 1.0) / (batch * self.arch.n_bins as f64)
        } else {
            0.0
        };
        let (gen_sq, gen_n) = self.params.generator.recurrent_l2();
        let (con_sq, con_n) = self.params.controller.recurrent_l2();
        let mut l2 = hps.l2_gen_scale * gen_sq / (2.0 * gen_n as f64);
        if self.arch.u_dim > 0 {
            l2 += hps.l2_con_scale * con_sq / (2.0 * con_n as f64);
        }
        let kl_ic = hps.kl_ic_scale * kl_ramp * kl_ic_raw;
        let kl_co = hps.kl_co_scale * kl_ramp * kl_co_raw;
        Ok(LossBreakdown { recon, kl_ic, kl_co, l2, total: recon + kl_ic + kl_co + l2, n_included: n_inc })
    }
}

/// Assemble [batch, T, d] tensors from per-step nodes.
fn stack_steps(tape: &Tape, nodes: &[NodeId], batch: usize, d: usize) -> Tensor {
    let t_len = nodes.len();
    let mut out = Tensor::zeros(&[batch, t_len, d]);
    for (t, &id) in nodes.iter().enumerate() {
        let v = tape.value(id);
        for b in 0..batch {
            for j in 0..d {
                out[[b, t, j]] = v[[b, j]];
            }
        }
    }
    out
}

pub(crate) fn extract_output(
    tape: &Tape,
    arch: &Architecture,
    batch: usize,
    h: &GraphHandles,
) -> ModelOutput {
    let t_len = arch.n_bins;
    let empty = || Tensor::zeros(&[batch, t_len, 0]);
    ModelOutput {
        rates: stack_steps(tape, &h.rate_nodes, batch, arch.n_neurons),
        factors: stack_steps(tape, &h.fac_nodes, batch, arch.factor_dim),
        z_mean: tape.value(h.z_mean).clone(),
        z_logvar: tape.value(h.z_logvar).clone(),
        u_mean: if arch.u_dim > 0 { stack_steps(tape, &h.u_mean_nodes, batch, arch.u_dim) } else { empty() },
        u_logvar: if arch.u_dim > 0 { stack_steps(tape, &h.u_logvar_nodes, batch, arch.u_dim) } else { empty() },
        z_sample: tape.value(h.z_sample).clone(),
        u_sample: if arch.u_dim > 0 { stack_steps(tape, &h.u_sample_nodes, batch, arch.u_dim) } else { empty() },
    }
}

/// Tape-node ids of the loss terms.
pub(crate) struct LossNodes {
    pub recon: NodeId,
    pub kl_ic: NodeId,
    pub kl_co: NodeId,
    pub l2: NodeId,
    pub total: NodeId,
    pub n_included: usize,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            recon: tape.value(self.recon).item(),
            kl_ic: tape.value(self.kl_ic).item(),
            kl_co: tape.value(self.kl_co).item(),
            l2: tape.value(self.l2).item(),
            total: tape.value(self.total).item(),
            n_included: self.n_included,
        }
    }
}

/// Assemble the composite training loss on the tape:
/// mean masked reconstruction NLL + ramped, scaled KLs + L2 on the recurrent
/// weights (normalized per weight so scales are size-independent).
pub(crate) fn total_loss_nodes(
    tape: &mut Tape,
    arch: &Architecture,
    handles: &GraphHandles,
    counts: &SpikeTensor,
    include: &BoolTensor,
    hps: &HyperParams,
    kl_ramp: f64,
) -> LossNodes {
    let (batch, t_len, n) = (counts.n_trials(), counts.n_bins(), counts.n_neurons());
    assert_eq!(t_len, arch.n_bins);
    assert_eq!(handles.rate_nodes.len(), t_len);

    // Reconstruction: per-step fused NLL summed, then mean per included element.
    let n_included = include.count_true();
    let mut recon_sum: Option<NodeId> = None;
    for t in 0..t_len {
        let mut counts_t = Vec::with_capacity(batch * n);
        let mut inc_t = Vec::with_capacity(batch * n);
        for b in 0..batch {
            for j in 0..n {
                counts_t.push(counts.get(b, t, j));
                inc_t.push(include.data()[(b * t_len + t) * n + j]);
            }
        }
        let inc_mask = BoolTensor::from_vec(&[batch, n], inc_t).unwrap();
        let term = tape.poisson_nll(handles.rate_nodes[t], &counts_t, &inc_mask);
        recon_sum = Some(match recon_sum {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let recon_sum = recon_sum.expect("at least one bin");
    let recon = if n_included > 0 {
        tape.affine_const(recon_sum, 1.0 / n_included as f64, 0.0)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    // KL terms, mean per trial (and per step for u).
    let kl_ic_raw = kl_gaussian_nodes(tape, handles.z_mean, handles.z_logvar, 1.0);
    let kl_ic = tape.affine_const(kl_ic_raw, hps.kl_ic_scale * kl_ramp / batch as f64, 0.0);
    let kl_co = if arch.u_dim > 0 {
        let mut acc: Option<NodeId> = None;
        for t in 0..t_len {
            let term = kl_gaussian_nodes(tape, handles.u_mean_nodes[t], handles.u_logvar_nodes[t], 1.0);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let sum = acc.expect("at least one bin");
        tape.affine_const(sum, hps.kl_co_scale * kl_ramp / (batch as f64 * t_len as f64), 0.0)
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    // L2 on recurrent weights only.
    let l2_of = |tape: &mut Tape, g: &GruNodes, scale: f64| -> NodeId {
        let hru_sq = tape.mul(g.w_hru, g.w_hru);
        let hc_sq = tape.mul(g.w_hc, g.w_hc);
        let s1 = tape.sum_all(hru_sq);
        let s2 = tape.sum_all(hc_sq);
        let s = tape.add(s1, s2);
        let n_w = (tape.value(g.w_hru).numel() + tape.value(g.w_hc).numel()) as f64;
        tape.affine_const(s, scale / (2.0 * n_w), 0.0)
    };
    let l2_gen = l2_of(tape, &handles.params.generator, hps.l2_gen_scale);
    let l2 = if arch.u_dim > 0 {
        let l2_con = l2_of(tape, &handles.params.controller, hps.l2_con_scale);
        tape.add(l2_gen, l2_con)
    } else {
        l2_gen
    };

    let a = tape.add(recon, kl_ic);
    let b = tape.add(a, kl_co);
    let total = tape.add(b, l2);
    LossNodes { recon, kl_ic, kl_co, l2, total, n_included }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::tape::grad_check;

    fn tiny_input(batch: usize, arch: &Architecture, seed: u64) -> Tensor {
        let mut rng = stream(seed, "test-input");
        Tensor::randn(&[batch, arch.n_bins, arch.n_neurons], 1.0, &mut rng).map(f64::abs)
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        // All weights and biases zero: h' = (1 - sigmoid(0)) h + sigmoid(0) tanh(0) = h/2.
        let mut tape = Tape::new();
        let nodes = GruNodes {
            w_x: tape.constant(Tensor::zeros(&[3, 12])),
            w_hru: tape.constant(Tensor::zeros(&[4, 8])),
            w_hc: tape.constant(Tensor::zeros(&[4, 4])),
            b_ru: tape.constant(Tensor::zeros(&[8])),
            b_c: tape.constant(Tensor::zeros(&[4])),
            h: 4,
        };
        let x = tape.constant(Tensor::filled(&[2, 3], 0.7));
        let h0 = Tensor::from_vec(&[2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.1, 0.2, -0.3, 0.4]).unwrap();
        let h = tape.constant(h0.clone());
        let h1 = gru_step(&mut tape, &nodes, x, h);
        for (a, b) in tape.value(h1).data().iter().zip(h0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15, "{a} vs 0.5*{b}");
        }
    }

    #[test]
    fn zero_model_rates_equal_exp_bias() {
        let arch = Architecture::tiny(5, 6);
        let mut model = LfadsModel::new(arch, 3).unwrap();
        // Zero every parameter, then set a recognizable rate bias.
        let zeros: Vec<Tensor> = model.params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        model.params.assign_flat(&zeros);
        model.params.rate_map.b = Tensor::from_vec(&[5], vec![-1.0, 0.0, 1.0, 0.5, -0.5]).unwrap();
        let x = tiny_input(2, &arch, 1);
        let out = model.run_forward(&x, RunMode::PosteriorMean).unwrap();
        for b in 0..2 {
            for t in 0..arch.n_bins {
                for j in 0..5 {
                    let expect = model.params.rate_map.b.data()[j].exp();
                    assert!((out.rates[[b, t, j]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn posterior_mean_mode_is_deterministic() {
        let arch = Architecture::tiny(4, 5);
        let model = LfadsModel::new(arch, 7).unwrap();
        let x = tiny_input(3, &arch, 2);
        let a = model.run_forward(&x, RunMode::PosteriorMean).unwrap();
        let b = model.run_forward(&x, RunMode::PosteriorMean).unwrap();
        assert_eq!(a, b);
        // Sampling mode differs from the mean but is seed-deterministic.
        let s1 = model.run_forward(&x, RunMode::PosteriorSample { seed: 9 }).unwrap();
        let s2 = model.run_forward(&x, RunMode::PosteriorSample { seed: 9 }).unwrap();
        let s3 = model.run_forward(&x, RunMode::PosteriorSample { seed: 10 }).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1.rates, s3.rates);
        assert_ne!(s1.rates, a.rates);
    }

    #[test]
    fn rates_are_strictly_positive() {
        let arch = Architecture::tiny(6, 4);
        let model = LfadsModel::new(arch, 11).unwrap();
        let x = tiny_input(2, &arch, 3);
        let out = model.run_forward(&x, RunMode::PosteriorSample { seed: 5 }).unwrap();
        assert!(out.rates.data().iter().all(|&r| r > 0.0));
    }

    #[test]
    fn autonomous_model_without_controller() {
        let arch = Architecture { u_dim: 0, ..Architecture::tiny(4, 5) };
        let model = LfadsModel::new(arch, 13).unwrap();
        let x = tiny_input(2, &arch, 4);
        let out = model.run_forward(&x, RunMode::PosteriorSample { seed: 1 }).unwrap();
        assert_eq!(out.rates.shape(), &[2, 5, 4]);
        assert_eq!(out.u_mean.shape(), &[2, 5, 0]);
        assert!(out.rates.is_finite());
    }

    #[test]
    fn kl_gaussian_closed_form_examples() {
        let z = Tensor::zeros(&[3]);
        assert!(kl_gaussian(&z, &z, 1.0).abs() < 1e-15);
        let ones = Tensor::filled(&[3], 1.0);
        // mean 1, var 1, prior 1: 0.5 per dimension.
        assert!((kl_gaussian(&ones, &z, 1.0) - 1.5).abs() < 1e-12);
        // KL is nonnegative for random inputs.
        let mut rng = stream(5, "kl-test");
        for _ in 0..50 {
            let m = Tensor::randn(&[4], 2.0, &mut rng);
            let v = Tensor::randn(&[4], 2.0, &mut rng);
            assert!(kl_gaussian(&m, &v, 1.7) >= -1e-12);
        }
    }

    #[test]
    fn kl_gaussian_matches_monte_carlo() {
        // E_q[log q - log p] over many samples, within 3 standard errors.
        let mean = Tensor::from_vec(&[2], vec![0.7, -1.2]).unwrap();
        let logvar = Tensor::from_vec(&[2], vec![0.4, -0.8]).unwrap();
        let prior_var = 1.0;
        let analytic = kl_gaussian(&mean, &logvar, prior_var);

        let mut rng = stream(99, "kl-mc");
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut diff = 0.0;
            for d in 0..2 {
                let (m, v) = (mean.data()[d], logvar.data()[d]);
                let std = (0.5 * v).exp();
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                let xs = m + std * eps;
                let log_q = -0.5 * ((xs - m) / std).powi(2) - std.ln();
                let log_p = -0.5 * xs * xs / prior_var - 0.5 * prior_var.ln();
                diff += log_q - log_p;
            }
            sum += diff;
            sumsq += diff * diff;
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (analytic - mc).abs() < 3.0 * se + 1e-9,
            "analytic {analytic} vs MC {mc} +/- {se}"
        );
    }

    #[test]
    fn kl_nodes_match_plain_function() {
        let mean = Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 0.9, 1.3, 0.0, -2.0]).unwrap();
        let logvar = Tensor::from_vec(&[2, 3], vec![0.2, -0.5, 0.0, 1.0, -1.0, 0.3]).unwrap();
        let mut tape = Tape::new();
        let m = tape.var(mean.clone());
        let v = tape.var(logvar.clone());
        let kl = kl_gaussian_nodes(&mut tape, m, v, 2.5);
        assert!((tape.value(kl).item() - kl_gaussian(&mean, &logvar, 2.5)).abs() < 1e-12);
    }

    fn make_training_pieces(
        arch: Architecture,
        batch: usize,
        seed: u64,
    ) -> (LfadsModel, Tensor, SpikeTensor, BoolTensor) {
        let model = LfadsModel::new(arch, seed).unwrap();
        let mut rng = stream(seed, "spikes");
        let counts_vec: Vec<u32> = (0..batch * arch.n_bins * arch.n_neurons)
            .map(|_| (rng.random::<f64>() * 3.0) as u32)
            .collect();
        let counts = SpikeTensor::from_vec(batch, arch.n_bins, arch.n_neurons, counts_vec).unwrap();
        let x = counts.to_tensor();
        let include_vec: Vec<bool> =
            (0..counts.data().len()).map(|_| rng.random::<f64>() < 0.75).collect();
        let include =
            BoolTensor::from_vec(&[batch, arch.n_bins, arch.n_neurons], include_vec).unwrap();
        (model, x, counts, include)
    }

    #[test]
    fn loss_nodes_match_plain_breakdown() {
        let arch = Architecture::tiny(5, 6);
        let (model, x, counts, include) = make_training_pieces(arch, 2, 21);
        let hps = HyperParams { dropout_prob: 0.0, ..HyperParams::default() };
        let mode = RunMode::PosteriorSample { seed: 4 };

        let mut tape = Tape::new();
        let handles = model.build_graph(&mut tape, &x, mode, None, true);
        let loss = total_loss_nodes(&mut tape, &model.arch, &handles, &counts, &include, &hps, 0.6);
        let out = extract_output(&tape, &model.arch, 2, &handles);
        let plain = model.loss_breakdown(&out, &counts, &include, &hps, 0.6).unwrap();

        assert!((tape.value(loss.recon).item() - plain.recon).abs() < 1e-10);
        assert!((tape.value(loss.kl_ic).item() - plain.kl_ic).abs() < 1e-10);
        assert!((tape.value(loss.kl_co).item() - plain.kl_co).abs() < 1e-10);
        assert!((tape.value(loss.l2).item() - plain.l2).abs() < 1e-10);
        assert!((tape.value(loss.total).item() - plain.total).abs() < 1e-10);
        assert_eq!(loss.n_included, plain.n_included);
    }

    #[test]
    fn loss_scales_act_linearly() {
        let arch = Architecture::tiny(4, 5);
        let (model, x, counts, include) = make_training_pieces(arch, 2, 31);
        let out = model.run_forward(&x, RunMode::PosteriorMean).unwrap();
        let base = HyperParams {
            l2_gen_scale: 0.0,
            l2_con_scale: 0.0,
            kl_ic_scale: 0.0,
            kl_co_scale: 0.0,
            dropout_prob: 0.0,
            ..HyperParams::default()
        };
        // All scales zero: total == recon exactly.
        let lb = model.loss_breakdown(&out, &counts, &include, &base, 1.0).unwrap();
        assert_eq!(lb.total, lb.recon);
        assert_eq!(lb.kl_ic, 0.0);

        let one = HyperParams { kl_ic_scale: 1.0, ..base };
        let two = HyperParams { kl_ic_scale: 2.0, ..base };
        let l1 = model.loss_breakdown(&out, &counts, &include, &one, 1.0).unwrap();
        let l2 = model.loss_breakdown(&out, &counts, &include, &two, 1.0).unwrap();
        assert!((l2.kl_ic - 2.0 * l1.kl_ic).abs() < 1e-12);
        assert_eq!(l1.recon, l2.recon);
        assert_eq!(l1.kl_co, l2.kl_co);
    }

    #[test]
    fn zero_counts_at_floor_rates_cost_floor_per_element() {
        let arch = Architecture::tiny(3, 4);
        let mut model = LfadsModel::new(arch, 41).unwrap();
        let zeros: Vec<Tensor> = model.params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        model.params.assign_flat(&zeros);
        // Bias of -60 underflows exp to ~1e-27, well below the NLL floor.
        model.params.rate_map.b = Tensor::filled(&[3], -60.0);
        let counts = SpikeTensor::zeros(2, 4, 3);
        let x = counts.to_tensor();
        let out = model.run_forward(&x, RunMode::PosteriorMean).unwrap();
        let hps = HyperParams {
            l2_gen_scale: 0.0,
            l2_con_scale: 0.0,
            kl_ic_scale: 0.0,
            kl_co_scale: 0.0,
            dropout_prob: 0.0,
            ..HyperParams::default()
        };
        let include = BoolTensor::filled(&[2, 4, 3], true);
        let lb = model.loss_breakdown(&out, &counts, &include, &hps, 1.0).unwrap();
        assert!((lb.recon - math::RATE_FLOOR).abs() < 1e-12, "recon {}", lb.recon);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Small architecture so the FD loop stays fast; the acceptance suite
        // runs the full-size check.
        let arch = Architecture {
            enc_dim: 4,
            gen_dim: 4,
            con_dim: 4,
            factor_dim: 3,
            z_dim: 3,
            u_dim: 2,
            n_neurons: 3,
            n_bins: 4,
        };
        let (model, x, counts, include) = make_training_pieces(arch, 2, 51);
        let hps = HyperParams { dropout_prob: 0.0, ..HyperParams::default() };
        let mode = RunMode::PosteriorSample { seed: 8 };

        let named = model.params.named();
        let tensors: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
        let arch_c = model.arch;
        let build = move |tape: &mut Tape, ids: &[NodeId]| -> NodeId {
            let params = ParamNodes::from_flat(&arch_c, ids.to_vec());
            let handles = build_graph_with(&arch_c, tape, params, &x, mode, None);
            let loss = total_loss_nodes(tape, &arch_c, &handles, &counts, &include, &hps, 0.7);
            loss.total
        };
        let err = grad_check(build, &tensors, 60, 1e-5, 123).unwrap();
        assert!(err < 1e-4, "end-to-end FD error {err}");
    }
}
