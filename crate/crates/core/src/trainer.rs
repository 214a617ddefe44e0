//! The training loop: Adam over the tape gradients, coordinated-dropout and
//! sample-validation masking composed per step, periodic evaluation (standard
//! validation loss, SV loss, ground-truth rate R^2), checkpointing, and the
//! random hyperparameter sweep.

use crate::container::TensorContainer;
use crate::datagen::GroundTruthDataset;
use crate::error::{CoreError, Result};
use crate::lfads::{
    total_loss_nodes, Architecture, HyperParams, LfadsModel, LfadsParams, RunMode,
};
use crate::masking::{apply_input_mask, make_cd_masks, make_speckle_holdout, masked_poisson_nll, SpeckleHoldout};
use crate::rng::{derive_seed, substream};
use crate::tape::Tape;
use crate::tensor::{select_trials_f64, BoolTensor, SpikeTensor, Tensor};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Gradient global-norm clip.
pub const GRAD_CLIP: f64 = 200.0;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Full specification of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hps: HyperParams,
    pub arch: Architecture,
    pub batch_size: usize,
    pub max_steps: u64,
    pub kl_ramp_steps: u64,
    pub cd_enabled: bool,
    /// Rescale CD-surviving inputs by 1/keep_ratio (inverted dropout).
    pub cd_rescale: bool,
    pub sv_enabled: bool,
    pub sv_frac: f64,
    pub eval_every: u64,
    /// Decode behavior from inferred rates at each evaluation.
    pub eval_decode: bool,
    /// Report R^2 averaged per neuron instead of flattened.
    pub r2_per_neuron: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(arch: Architecture, hps: HyperParams, seed: u64) -> Self {
        TrainConfig {
            hps,
            arch,
            batch_size: 16,
            max_steps: 1000,
            kl_ramp_steps: 500,
            cd_enabled: true,
            cd_rescale: true,
            sv_enabled: false,
            sv_frac: 0.2,
            eval_every: 100,
            eval_decode: false,
            r2_per_neuron: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.hps.validate()?;
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(CoreError::InvalidArgument("eval_every must be >= 1".into()));
        }
        if self.sv_enabled && !(self.sv_frac > 0.0 && self.sv_frac < 1.0) {
            return Err(CoreError::InvalidArgument("sv_frac must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub sv_loss: Option<f64>,
    pub rate_r2: Option<f64>,
    pub decode_r2: Option<f64>,
}

/// Train/validation spike splits plus whatever ground truth is available.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train_spikes: SpikeTensor,
    pub valid_spikes: SpikeTensor,
    /// [valid_trial, bin, neuron] spikes/s, synthetic data only.
    pub true_rates_valid: Option<Tensor>,
    /// [valid_trial, bin, 2], synthetic data only.
    pub behavior_valid: Option<Tensor>,
    pub bin_width: f64,
}

impl TrainData {
    pub fn from_dataset(ds: &GroundTruthDataset, train: &[usize], valid: &[usize]) -> Self {
        TrainData {
            train_spikes: ds.spikes.select_trials(train),
            valid_spikes: ds.spikes.select_trials(valid),
            true_rates_valid: Some(select_trials_f64(&ds.true_rates, valid)),
            behavior_valid: Some(select_trials_f64(&ds.behavior, valid)),
            bin_width: ds.bin_width,
        }
    }

    pub fn from_spikes(train: SpikeTensor, valid: SpikeTensor, bin_width: f64) -> Self {
        TrainData { train_spikes: train, valid_spikes: valid, true_rates_valid: None, behavior_valid: None, bin_width }
    }
}

/// Adam first/second moments aligned with `LfadsParams::for_each` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &LfadsParams) -> Self {
        let mut m = Vec::new();
        params.for_each(|_, t| m.push(Tensor::zeros(t.shape())));
        AdamState { v: m.clone(), m, t: 0 }
    }

    /// One Adam step over flat parameter/gradient lists, with global-norm
    /// clipping. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> f64 {
        debug_assert_eq!(params.len(), grads.len());
        let norm_sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
        let norm = norm_sq.sqrt();
        let scale = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] * scale;
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        norm
    }
}

/// Everything needed to resume or evaluate a run; round-trips byte-exactly
/// through the tensor container.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LfadsModel,
    pub opt: AdamState,
    pub hps: HyperParams,
    pub step: u64,
    /// Top-level seed of the run; together with `step` this reconstructs
    /// every RNG stream, so it is the complete RNG state.
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: LfadsModel, hps: HyperParams, seed: u64) -> Self {
        let opt = AdamState::new(&model.params);
        Checkpoint { model, opt, hps, step: 0, seed }
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let named = self.model.params.named();
        for (i, (name, t)) in named.iter().enumerate() {
            c.put_tensor(&format!("param.{name}"), t);
            c.put_tensor(&format!("adam_m.{name}"), &self.opt.m[i]);
            c.put_tensor(&format!("adam_v.{name}"), &self.opt.v[i]);
        }
        let hv = self.hps.to_vec();
        c.put_f64_slice("hyperparams", &[hv.len()], &hv);
        let a = &self.model.arch;
        let av = [
            a.enc_dim as i64,
            a.gen_dim as i64,
            a.con_dim as i64,
            a.factor_dim as i64,
            a.z_dim as i64,
            a.u_dim as i64,
            a.n_neurons as i64,
            a.n_bins as i64,
        ];
        c.put_i64_slice("architecture", &[8], &av);
        c.put_u64("step", self.step);
        c.put_u64("adam_t", self.opt.t);
        c.put_u64("seed", self.seed);
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let (_, av) = c.get_i64_slice("architecture")?;
        if av.len() != 8 {
            return Err(CoreError::Container("architecture must have 8 entries".into()));
        }
        let arch = Architecture {
            enc_dim: av[0] as usize,
            gen_dim: av[1] as usize,
            con_dim: av[2] as usize,
            factor_dim: av[3] as usize,
            z_dim: av[4] as usize,
            u_dim: av[5] as usize,
            n_neurons: av[6] as usize,
            n_bins: av[7] as usize,
        };
        let proto = LfadsParams::init(&arch, 0);
        let mut names = Vec::new();
        proto.for_each(|name, _| names.push(name));
        let mut tensors = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in &names {
            tensors.push((name.clone(), c.get_tensor(&format!("param.{name}"))?));
            m.push(c.get_tensor(&format!("adam_m.{name}"))?);
            v.push(c.get_tensor(&format!("adam_v.{name}"))?);
        }
        let params = LfadsParams::from_named(&arch, &tensors)?;
        let ht = c.get_tensor("hyperparams")?;
        let hps = HyperParams::from_slice(ht.data())?;
        Ok(Checkpoint {
            model: LfadsModel { arch, params },
            opt: AdamState { m, v, t: c.get_u64("adam_t")? },
            hps,
            step: c.get_u64("step")?,
            seed: c.get_u64("seed")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged { step: u64 },
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub status: RunStatus,
}

impl TrainResult {
    /// Standard validation loss of the last evaluation; +inf for failed runs
    /// so they rank last.
    pub fn fitness(&self) -> f64 {
        match self.status {
            RunStatus::Completed => {
                self.metrics.last().map(|m| m.valid_loss).unwrap_or(f64::INFINITY)
            }
            RunStatus::Diverged { .. } => f64::INFINITY,
        }
    }
}

/// Coefficient of determination, flattened over all elements.
pub fn r2(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "r2: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = target.numel() as f64;
    let mean = target.data().iter().sum::<f64>() / n;
    let ss_tot: f64 = target.data().iter().map(|&t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(CoreError::InvalidArgument("r2: target variance is zero".into()));
    }
    let ss_res: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// R^2 computed per neuron (last axis) and averaged; the alternative
/// aggregation behind `TrainConfig::r2_per_neuron`.
pub fn r2_per_neuron_mean(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 {
        return Err(CoreError::ShapeMismatch("r2_per_neuron: need matching [trial,bin,neuron]".into()));
    }
    let [nt, nb, nn] = [pred.shape()[0], pred.shape()[1], pred.shape()[2]];
    let mut acc = 0.0;
    for j in 0..nn {
        let mut p = Vec::with_capacity(nt * nb);
        let mut t = Vec::with_capacity(nt * nb);
        for a in 0..nt {
            for b in 0..nb {
                p.push(pred[[a, b, j]]);
                t.push(target[[a, b, j]]);
            }
        }
        acc += r2(
            &Tensor::from_vec(&[nt * nb], p)?,
            &Tensor::from_vec(&[nt * nb], t)?,
        )?;
    }
    Ok(acc / nn as f64)
}

/// Posterior-mean rates (spikes/s) for a whole spike tensor, evaluated in
/// batches to bound tape memory.
pub fn infer_rates_hz(
    model: &LfadsModel,
    spikes: &SpikeTensor,
    bin_width: f64,
    batch_size: usize,
) -> Result<Tensor> {
    let n_trials = spikes.n_trials();
    let mut rates = Tensor::zeros(&[n_trials, spikes.n_bins(), spikes.n_neurons()]);
    let mut start = 0;
    while start < n_trials {
        let end = (start + batch_size).min(n_trials);
        let idx: Vec<usize> = (start..end).collect();
        let x = spikes.select_trials(&idx).to_tensor();
        let out = model.run_forward(&x, RunMode::PosteriorMean)?;
        let stride = spikes.n_bins() * spikes.n_neurons();
        rates.data_mut()[start * stride..end * stride].copy_from_slice(out.rates.data());
        start = end;
    }
    // Convert spikes/bin to spikes/s.
    Ok(rates.map(|v| v / bin_width))
}

/// Evaluate a model: standard whole-trial validation loss (full input shown),
/// SV loss on speckle-held-out elements (SV-masked input shown), and R^2
/// against ground-truth rates when available.
pub fn evaluate(
    model: &LfadsModel,
    config: &TrainConfig,
    data: &TrainData,
    sv: Option<&SpeckleHoldout>,
    step: u64,
    train_loss: f64,
) -> Result<MetricRecord> {
    // Standard validation: every element of held-out trials, full input.
    let rates_valid_hz = infer_rates_hz(model, &data.valid_spikes, data.bin_width, config.batch_size)?;
    let rates_valid_bin = rates_valid_hz.map(|v| v * data.bin_width);
    let all = BoolTensor::filled(&rates_valid_bin.shape(), true);
    let (nll, n) = masked_poisson_nll(&rates_valid_bin, &data.valid_spikes, &all)?;
    let valid_loss = nll / n as f64;

    // SV loss: infer with the SV-masked input, score held-out elements only.
    let sv_loss = match sv {
        Some(holdout) => {
            let x = data.train_spikes.to_tensor();
            let x_masked = apply_input_mask(&x, &holdout.kept(), Some(1.0 - holdout.holdout_frac))?;
            let n_train = data.train_spikes.n_trials();
            let mut total = 0.0;
            let mut count = 0usize;
            let mut start = 0;
            while start < n_train {
                let end = (start + config.batch_size).min(n_train);
                let idx: Vec<usize> = (start..end).collect();
                let xb = select_trials_f64(&x_masked, &idx);
                let out = model.run_forward(&xb, RunMode::PosteriorMean)?;
                let counts = data.train_spikes.select_trials(&idx);
                let held = select_mask_rows(&holdout.held_out, &idx);
                let (t, c) = masked_poisson_nll(&out.rates, &counts, &held)?;
                total += t;
                count += c;
                start = end;
            }
            Some(if count > 0 { total / count as f64 } else { 0.0 })
        }
        None => None,
    };

    let rate_r2 = match &data.true_rates_valid {
        Some(true_rates) => Some(if config.r2_per_neuron {
            r2_per_neuron_mean(&rates_valid_hz, true_rates)?
        } else {
            r2(&rates_valid_hz, true_rates)?
        }),
        None => None,
    };

    let decode_r2 = match (&data.behavior_valid, config.eval_decode) {
        (Some(behavior), true) => {
            let res = crate::decode::fit_ole_cv(
                &rates_valid_hz,
                behavior,
                5,
                derive_seed(config.seed, "decode-folds", step),
            )?;
            Some(res.r2_per_dim.iter().sum::<f64>() / res.r2_per_dim.len() as f64)
        }
        _ => None,
    };

    Ok(MetricRecord { step, train_loss, valid_loss, sv_loss, rate_r2, decode_r2 })
}

/// Rows of a mask selected along the trial axis.
fn select_mask_rows(mask: &BoolTensor, trials: &[usize]) -> BoolTensor {
    let shape = mask.shape();
    let stride: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(trials.len() * stride);
    for &t in trials {
        data.extend_from_slice(&mask.data()[t * stride..(t + 1) * stride]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = trials.len();
    BoolTensor::from_vec(&new_shape, data).unwrap()
}

/// Train a fresh model under `config`.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainResult> {
    config.validate()?;
    let model = LfadsModel::new(config.arch, derive_seed(config.seed, "model-init", 0))?;
    let ckpt = Checkpoint::new(model, config.hps, config.seed);
    train_from(ckpt, config, data, config.max_steps)
}

/// Continue training an existing checkpoint for `extra_steps`.
///
/// Per step: draw a batch, zero+rescale SV held-out elements, apply a fresh
/// CD mask pair (zero+rescale input side), forward with dropout, masked loss
/// on grad-side elements, backward, clipped Adam update. All randomness is
/// keyed by (checkpoint seed, purpose, absolute step), so resuming reproduces
/// the uninterrupted run bit-for-bit.
pub fn train_from(
    mut ckpt: Checkpoint,
    config: &TrainConfig,
    data: &TrainData,
    extra_steps: u64,
) -> Result<TrainResult> {
    config.validate()?;
    let n_train = data.train_spikes.n_trials();
    let n_bins = data.train_spikes.n_bins();
    let n_neurons = data.train_spikes.n_neurons();
    if n_bins != config.arch.n_bins || n_neurons != config.arch.n_neurons {
        return Err(CoreError::ShapeMismatch(format!(
            "data [{n_bins} bins, {n_neurons} neurons] vs arch [{}, {}]",
            config.arch.n_bins, config.arch.n_neurons
        )));
    }
    if n_train == 0 || data.valid_spikes.n_trials() == 0 {
        return Err(CoreError::InvalidArgument("empty train or validation split".into()));
    }
    let batch_size = config.batch_size.min(n_train);
    let seed = ckpt.seed;

    // The speckle holdout is fixed for the lifetime of the run.
    let sv = if config.sv_enabled {
        Some(make_speckle_holdout(
            &[n_train, n_bins, n_neurons],
            config.sv_frac,
            derive_seed(seed, "sv-holdout", 0),
        )?)
    } else {
        None
    };

    let hps = &ckpt.hps;
    let mut metrics = Vec::new();
    let mut last_train_loss = f64::NAN;
    let end_step = ckpt.step + extra_steps;

    if extra_steps == 0 {
        // Evaluation-only call: one record at the current step.
        let probe = evaluate(&ckpt.model, config, data, sv.as_ref(), ckpt.step, last_train_loss)?;
        return Ok(TrainResult { checkpoint: ckpt, metrics: vec![probe], status: RunStatus::Completed });
    }

    while ckpt.step < end_step {
        let step = ckpt.step;

        // Batch of distinct train trials.
        let batch = draw_batch(n_train, batch_size, seed, step);
        let counts = data.train_spikes.select_trials(&batch);
        let mut x = counts.to_tensor();
        let shape = [batch_size, n_bins, n_neurons];

        // SV first: held-out elements are invisible to training.
        let mut include = BoolTensor::filled(&shape, true);
        if let Some(holdout) = &sv {
            let kept = select_mask_rows(&holdout.kept(), &batch);
            x = apply_input_mask(&x, &kept, Some(1.0 - holdout.holdout_frac))?;
            include = include.and(&kept);
        }

        // CD second: fresh complementary masks every step.
        if config.cd_enabled {
            let pair = make_cd_masks(&shape, hps.keep_ratio, derive_seed(seed, "cd-mask", step))?;
            let rescale = if config.cd_rescale { Some(hps.keep_ratio) } else { None };
            x = apply_input_mask(&x, &pair.input_keep, rescale)?;
            include = include.and(&pair.grad_keep);
        }

        let kl_ramp = if config.kl_ramp_steps == 0 {
            1.0
        } else {
            ((step as f64 + 1.0) / config.kl_ramp_steps as f64).min(1.0)
        };

        let mut tape = Tape::new();
        let dropout_cfg = (hps.dropout_prob > 0.0)
            .then(|| (hps.dropout_prob, derive_seed(seed, "dropout", step)));
        let handles = ckpt.model.build_graph(
            &mut tape,
            &x,
            RunMode::PosteriorSample { seed: derive_seed(seed, "posterior", step) },
            dropout_cfg,
            true,
        );
        let loss = total_loss_nodes(&mut tape, &config.arch, &handles, &counts, &include, hps, kl_ramp);
        let train_loss = loss.values(&tape).total;
        let param_ids = handles.params.flat.clone();
        let grads_all = tape.backward(loss.total)?;
        let grads: Vec<Tensor> = param_ids.iter().map(|&id| grads_all.get(id)).collect();

        // Divergence check: abort the run, callers rank it last.
        let finite = train_loss.is_finite() && grads.iter().all(|g| g.is_finite());
        if !finite {
            let status = RunStatus::Diverged { step };
            return Ok(TrainResult { checkpoint: ckpt, metrics, status });
        }

        let mut flat: Vec<Tensor> = Vec::with_capacity(grads.len());
        ckpt.model.params.for_each(|_, t| flat.push(t.clone()));
        ckpt.opt.update(&mut flat, &grads, hps.learning_rate);
        ckpt.model.params.assign_flat(&flat);
        if !flat.iter().all(|t| t.is_finite()) {
            let status = RunStatus::Diverged { step };
            return Ok(TrainResult { checkpoint: ckpt, metrics, status });
        }

        last_train_loss = train_loss;
        ckpt.step += 1;

        let done = ckpt.step == end_step;
        if ckpt.step % config.eval_every == 0 || done {
            let rec = evaluate(&ckpt.model, config, data, sv.as_ref(), ckpt.step, last_train_loss)?;
            if !rec.valid_loss.is_finite() {
                let status = RunStatus::Diverged { step: ckpt.step };
                metrics.push(rec);
                return Ok(TrainResult { checkpoint: ckpt, metrics, status });
            }
            metrics.push(rec);
        }
    }

    Ok(TrainResult { checkpoint: ckpt, metrics, status: RunStatus::Completed })
}

fn draw_batch(n_train: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = substream(seed, "batch", step);
    let mut idx: Vec<usize> = (0..n_train).collect();
    // Partial Fisher-Yates: the first batch_size entries are the draw.
    for i in 0..batch_size.min(n_train.saturating_sub(1)) {
        let j = rng.random_range(i..n_train);
        idx.swap(i, j);
    }
    idx.truncate(batch_size);
    idx
}

// ---------------------------------------------------------------------------
// Metric CSV

pub fn metrics_to_csv(metrics: &[MetricRecord]) -> String {
    let mut out = String::from("step,train_loss,valid_loss,sv_loss,rate_r2,decode_r2\n");
    for m in metrics {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.step,
            m.train_loss,
            m.valid_loss,
            opt(&m.sv_loss),
            opt(&m.rate_r2),
            opt(&m.decode_r2)
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[MetricRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_to_csv(metrics).as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Random hyperparameter sweep

/// Which hyperparameters a sweep draws, and from which ranges. Scales draw
/// log-uniformly, dropout uniformly; anything `None` keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRanges {
    pub l2_gen_scale: Option<(f64, f64)>,
    pub l2_con_scale: Option<(f64, f64)>,
    pub kl_ic_scale: Option<(f64, f64)>,
    pub kl_co_scale: Option<(f64, f64)>,
    pub dropout_prob: Option<(f64, f64)>,
}

impl Default for SweepRanges {
    /// The five searched hyperparameters over their full ranges.
    fn default() -> Self {
        SweepRanges {
            l2_gen_scale: Some((5.0, 5e4)),
            l2_con_scale: Some((5.0, 5e4)),
            kl_ic_scale: Some((0.05, 5.0)),
            kl_co_scale: Some((0.05, 5.0)),
            dropout_prob: Some((0.0, 0.7)),
        }
    }
}

impl SweepRanges {
    pub fn draw(&self, base: &HyperParams, seed: u64, model_idx: u64) -> HyperParams {
        let mut rng = substream(seed, "sweep-hp", model_idx);
        let mut log_uniform = |range: Option<(f64, f64)>, base: f64| match range {
            Some((lo, hi)) => {
                let u: f64 = rng.random();
                (lo.ln() + u * (hi.ln() - lo.ln())).exp()
            }
            None => base,
        };
        let l2_gen_scale = log_uniform(self.l2_gen_scale, base.l2_gen_scale);
        let l2_con_scale = log_uniform(self.l2_con_scale, base.l2_con_scale);
        let kl_ic_scale = log_uniform(self.kl_ic_scale, base.kl_ic_scale);
        let kl_co_scale = log_uniform(self.kl_co_scale, base.kl_co_scale);
        let dropout_prob = match self.dropout_prob {
            Some((lo, hi)) => lo + rng.random::<f64>() * (hi - lo),
            None => base.dropout_prob,
        };
        HyperParams {
            l2_gen_scale,
            l2_con_scale,
            kl_ic_scale,
            kl_co_scale,
            dropout_prob,
            ..*base
        }
    }
}

/// One sweep row: drawn hyperparameters plus final metrics.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub model_idx: usize,
    pub hps: HyperParams,
    pub final_metrics: Option<MetricRecord>,
    pub status: RunStatus,
}

/// Train `n_models` with independent HP draws; individual failures are
/// recorded and the sweep continues.
pub fn random_sweep(
    base: &TrainConfig,
    data: &TrainData,
    n_models: usize,
    ranges: &SweepRanges,
    max_workers: usize,
) -> Result<Vec<SweepRow>> {
    if n_models == 0 {
        return Err(CoreError::InvalidArgument("n_models must be >= 1".into()));
    }
    base.validate()?;
    let jobs: Vec<usize> = (0..n_models).collect();
    let rows = crate::worker::run_parallel(jobs, max_workers, |_, model_idx| {
        let hps = ranges.draw(&base.hps, base.seed, model_idx as u64);
        let config = TrainConfig {
            hps,
            seed: derive_seed(base.seed, "sweep-model", model_idx as u64),
            ..base.clone()
        };
        match train(&config, data) {
            Ok(res) => SweepRow {
                model_idx,
                hps,
                final_metrics: res.metrics.last().cloned(),
                status: res.status,
            },
            Err(_) => SweepRow {
                model_idx,
                hps,
                final_metrics: None,
                status: RunStatus::Diverged { step: 0 },
            },
        }
    });
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "model_idx,l2_gen_scale,l2_con_scale,kl_ic_scale,kl_co_scale,dropout_prob,keep_ratio,learning_rate,train_loss,valid_loss,sv_loss,rate_r2,decode_r2,status\n",
    );
    for r in rows {
        let h = &r.hps;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (tl, vl, sv, r2v, dec) = match &r.final_metrics {
            Some(m) => (
                m.train_loss.to_string(),
                m.valid_loss.to_string(),
                opt(m.sv_loss),
                opt(m.rate_r2),
                opt(m.decode_r2),
            ),
            None => Default::default(),
        };
        let status = match r.status {
            RunStatus::Completed => "ok".to_string(),
            RunStatus::Diverged { step } => format!("diverged@{step}"),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.model_idx,
            h.l2_gen_scale,
            h.l2_con_scale,
            h.kl_ic_scale,
            h.kl_co_scale,
            h.dropout_prob,
            h.keep_ratio,
            h.learning_rate,
            tl,
            vl,
            sv,
            r2v,
            dec,
            status
        ));
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CoreError::InvalidArgument("spearman: need two equal-length series".into()));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..ra.len() {
        let xa = ra[i] - mean;
        let xb = rb[i] - mean;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da == 0.0 || db == 0.0 {
        return Err(CoreError::InvalidArgument("spearman: a series is constant".into()));
    }
    Ok(num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}
