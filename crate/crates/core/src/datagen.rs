//! Synthetic benchmark generators: an input-driven chaotic RNN sampled with
//! Poisson noise (with ground-truth rates kept), low-rank noisy data for the
//! linear-autoencoder demonstration, and trial split/subsample utilities.

use crate::container::TensorContainer;
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, stream, substream};
use crate::tape::gemm;
use crate::tensor::{select_trials_f64, SpikeTensor, Tensor};
use rand::RngExt;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// Euler step for the chaotic RNN, well below tau for stability.
pub const EULER_DT: f64 = 1e-3;

/// Configuration of the synthetic chaotic-RNN dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRnnConfig {
    pub n_units: usize,
    /// Gain on the recurrent term; > 1 puts the network in the chaotic regime.
    pub gamma: f64,
    /// Unit time constant, seconds.
    pub tau: f64,
    pub n_inputs: usize,
    pub n_trials: usize,
    pub n_conditions: usize,
    /// Trial length, seconds.
    pub trial_len: f64,
    /// Spike-count bin width, seconds.
    pub bin_width: f64,
    /// Firing-rate range the rescaled rates span, spikes/second.
    pub rate_lo: f64,
    pub rate_hi: f64,
    pub seed: u64,
}

impl SynthRnnConfig {
    /// Small configuration for minutes-scale experiments.
    pub fn desk(seed: u64) -> Self {
        SynthRnnConfig {
            n_units: 50,
            gamma: 2.5,
            tau: 0.025,
            n_inputs: 2,
            n_trials: 400,
            n_conditions: 40,
            trial_len: 1.0,
            bin_width: 0.010,
            rate_lo: 0.0,
            rate_hi: 30.0,
            seed,
        }
    }

    /// Full-size configuration: 4000 one-second trials over 400 conditions.
    pub fn paper(seed: u64) -> Self {
        SynthRnnConfig { n_trials: 4000, n_conditions: 400, ..Self::desk(seed) }
    }

    pub fn n_bins(&self) -> usize {
        (self.trial_len / self.bin_width).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(CoreError::InvalidArgument("n_units must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(CoreError::InvalidArgument("tau must be > 0".into()));
        }
        if self.rate_lo >= self.rate_hi {
            return Err(CoreError::InvalidArgument("rate_lo must be < rate_hi".into()));
        }
        if self.n_conditions == 0 || self.n_conditions > self.n_trials {
            return Err(CoreError::InvalidArgument("need 1 <= n_conditions <= n_trials".into()));
        }
        let bins = self.trial_len / self.bin_width;
        if (bins - bins.round()).abs() > 1e-9 || bins < 1.0 {
            return Err(CoreError::InvalidArgument(
                "trial_len must be an integer number of bins".into(),
            ));
        }
        let steps = self.bin_width / EULER_DT;
        if (steps - steps.round()).abs() > 1e-9 || steps < 1.0 {
            return Err(CoreError::InvalidArgument(
                "bin_width must be an integer number of Euler steps".into(),
            ));
        }
        Ok(())
    }
}

/// A spiking dataset with its generating ground truth attached.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthDataset {
    pub spikes: SpikeTensor,
    /// [trial, bin, neuron], spikes/second.
    pub true_rates: Tensor,
    pub condition_ids: Vec<usize>,
    /// [trial, bin, 2] synthetic velocity, arbitrary units.
    pub behavior: Tensor,
    pub bin_width: f64,
}

impl GroundTruthDataset {
    pub fn n_trials(&self) -> usize {
        self.spikes.n_trials()
    }

    pub fn select(&self, trials: &[usize]) -> GroundTruthDataset {
        GroundTruthDataset {
            spikes: self.spikes.select_trials(trials),
            true_rates: select_trials_f64(&self.true_rates, trials),
            condition_ids: trials.iter().map(|&t| self.condition_ids[t]).collect(),
            behavior: select_trials_f64(&self.behavior, trials),
            bin_width: self.bin_width,
        }
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.put_spikes("spikes", &self.spikes);
        c.put_tensor("true_rates", &self.true_rates);
        c.put_tensor("behavior", &self.behavior);
        let ids: Vec<i64> = self.condition_ids.iter().map(|&v| v as i64).collect();
        c.put_i64_slice("condition_ids", &[ids.len()], &ids);
        c.put_f64("bin_width", self.bin_width);
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let (_, ids) = c.get_i64_slice("condition_ids")?;
        Ok(GroundTruthDataset {
            spikes: c.get_spikes("spikes")?,
            true_rates: c.get_tensor("true_rates")?,
            condition_ids: ids.iter().map(|&v| v as usize).collect(),
            behavior: c.get_tensor("behavior")?,
            bin_width: c.get_f64("bin_width")?,
        })
    }
}

/// Integrate the RNN state for every trial at once, returning per-bin averages
/// of tanh(y): shape [trial, bin, unit]. Exposed with an explicit `dt` so the
/// step-halving convergence check can reuse the exact production path.
pub fn integrate_tanh_trajectories(
    cfg: &SynthRnnConfig,
    w: &Tensor,
    b: &Tensor,
    y0: &Tensor,
    inputs: &Tensor,
    dt: f64,
) -> Result<Tensor> {
    let n = cfg.n_units;
    let n_trials = y0.shape()[0];
    let n_bins = cfg.n_bins();
    let steps_per_bin = (cfg.bin_width / dt).round() as usize;
    let total_steps = n_bins * steps_per_bin;
    assert_eq!(inputs.shape(), &[n_trials, total_steps, cfg.n_inputs]);

    let mut y = y0.data().to_vec(); // [trial, unit]
    let mut tanh_y = vec![0.0; n_trials * n];
    let mut drive = vec![0.0; n_trials * n];
    let mut binned = Tensor::zeros(&[n_trials, n_bins, n]);
    let alpha = dt / cfg.tau;

    for step in 0..total_steps {
        for (t, &v) in tanh_y.iter_mut().zip(&y) {
            *t = v.tanh();
        }
        // drive = gamma * tanh(y) @ W^T + q @ B^T
        gemm(n_trials, n, n, &tanh_y, false, w.data(), true, 0.0, &mut drive);
        for v in drive.iter_mut() {
            *v *= cfg.gamma;
        }
        let q_step: Vec<f64> = (0..n_trials * cfg.n_inputs)
            .map(|i| {
                let trial = i / cfg.n_inputs;
                let j = i % cfg.n_inputs;
                inputs[[trial, step, j]]
            })
            .collect();
        gemm(n_trials, cfg.n_inputs, n, &q_step, false, b.data(), true, 1.0, &mut drive);
        for i in 0..y.len() {
            y[i] += alpha * (-y[i] + drive[i]);
        }
        let bin = step / steps_per_bin;
        let inv = 1.0 / steps_per_bin as f64;
        for trial in 0..n_trials {
            for u in 0..n {
                binned[[trial, bin, u]] += y[trial * n + u].tanh() * inv;
            }
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(CoreError::NonFinite("chaotic RNN state".into()));
    }
    Ok(binned)
}

/// Fixed quantities of a simulation: connectivity, input map, per-condition
/// initial states, and the per-trial input noise.
pub struct SimDraws {
    pub w: Tensor,
    pub b: Tensor,
    pub y0_by_condition: Tensor,
    pub condition_ids: Vec<usize>,
    pub inputs: Tensor,
}

pub fn draw_simulation(cfg: &SynthRnnConfig, dt: f64) -> SimDraws {
    let n = cfg.n_units;
    let mut rng = stream(cfg.seed, "rnn-weights");
    // W entries ~ N(0, 1/N); B entries ~ N(0, 1).
    let w = Tensor::randn(&[n, n], 1.0 / (n as f64).sqrt(), &mut rng);
    let b = Tensor::randn(&[n, cfg.n_inputs], 1.0, &mut rng);

    let mut init_rng = stream(cfg.seed, "rnn-init");
    let y0_by_condition = Tensor::randn(&[cfg.n_conditions, n], 1.0, &mut init_rng);
    let condition_ids: Vec<usize> = (0..cfg.n_trials).map(|t| t % cfg.n_conditions).collect();

    let total_steps = cfg.n_bins() * (cfg.bin_width / dt).round() as usize;
    let mut inputs = Tensor::zeros(&[cfg.n_trials, total_steps, cfg.n_inputs]);
    for trial in 0..cfg.n_trials {
        let mut trial_rng = substream(cfg.seed, "rnn-input", trial as u64);
        for step in 0..total_steps {
            for j in 0..cfg.n_inputs {
                inputs[[trial, step, j]] = trial_rng.sample(StandardNormal);
            }
        }
    }
    SimDraws { w, b, y0_by_condition, condition_ids, inputs }
}

/// Simulate the input-driven chaotic RNN and sample Poisson spikes from its
/// rescaled unit activations. Trials of one condition share the initial state
/// but receive fresh input noise.
pub fn simulate_chaotic_rnn(cfg: &SynthRnnConfig) -> Result<GroundTruthDataset> {
    cfg.validate()?;
    let draws = draw_simulation(cfg, EULER_DT);
    let y0 = select_trials_f64(&draws.y0_by_condition, &draws.condition_ids);
    let binned = integrate_tanh_trajectories(cfg, &draws.w, &draws.b, &y0, &draws.inputs, EULER_DT)?;

    // One affine rescale for the whole dataset, so the binned activations
    // span [rate_lo, rate_hi] exactly and relative amplitudes are preserved.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in binned.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(CoreError::NonFinite("degenerate activation range".into()));
    }
    let true_rates = binned.map(|v| (v - lo) / span * (cfg.rate_hi - cfg.rate_lo) + cfg.rate_lo);

    let spikes = sample_poisson(&true_rates, cfg.bin_width, derive_seed(cfg.seed, "poisson", 0))?;

    // Synthetic behavior channel: fixed 2-D linear readout of the binned unit
    // activations plus N(0, 0.1^2) noise, so the decoder has a known target.
    let n = cfg.n_units;
    let mut beh_rng = stream(cfg.seed, "behavior-readout");
    let readout = Tensor::randn(&[2, n], 1.0 / (n as f64).sqrt(), &mut beh_rng);
    let mut noise_rng = stream(cfg.seed, "behavior-noise");
    let n_bins = cfg.n_bins();
    let mut behavior = Tensor::zeros(&[cfg.n_trials, n_bins, 2]);
    for trial in 0..cfg.n_trials {
        for bin in 0..n_bins {
            for d in 0..2 {
                let mut acc = 0.0;
                for u in 0..n {
                    acc += readout[[d, u]] * binned[[trial, bin, u]];
                }
                let noise: f64 = noise_rng.sample(StandardNormal);
                behavior[[trial, bin, d]] = acc + 0.1 * noise;
            }
        }
    }

    Ok(GroundTruthDataset {
        spikes,
        true_rates,
        condition_ids: draws.condition_ids,
        behavior,
        bin_width: cfg.bin_width,
    })
}

/// Independent Poisson draws with mean rate*bin_width per element.
pub fn sample_poisson(rates_hz: &Tensor, bin_width: f64, seed: u64) -> Result<SpikeTensor> {
    let shape = rates_hz.shape();
    if shape.len() != 3 {
        return Err(CoreError::ShapeMismatch("rates must be [trial, bin, neuron]".into()));
    }
    let mut rng = stream(seed, "poisson-samples");
    let mut counts = Vec::with_capacity(rates_hz.numel());
    for &r in rates_hz.data() {
        if r < 0.0 || !r.is_finite() {
            return Err(CoreError::InvalidArgument(format!("negative or non-finite rate {r}")));
        }
        let mean = r * bin_width;
        if mean == 0.0 {
            counts.push(0);
        } else {
            let draw: f64 = Poisson::new(mean)
                .map_err(|e| CoreError::InvalidArgument(format!("poisson: {e}")))?
                .sample(&mut rng);
            counts.push(draw as u32);
        }
    }
    SpikeTensor::from_vec(shape[0], shape[1], shape[2], counts)
}

/// Noisy low-rank data for the linear-autoencoder demonstration:
/// y = f W^T + noise with f ~ N(0,I_D), W ~ N(0,1) entries, noise ~ N(0,1).
#[derive(Debug, Clone)]
pub struct LinearDemoDataset {
    /// [n, D] latent factors; training rows first.
    pub factors: Tensor,
    /// [M, D] readout.
    pub readout: Tensor,
    /// [n, M] noise-free data.
    pub y_true: Tensor,
    /// [n, M] observed noisy data.
    pub y: Tensor,
    pub n_train: usize,
}

impl LinearDemoDataset {
    fn rows(&self, t: &Tensor, start: usize, end: usize) -> Tensor {
        let idx: Vec<usize> = (start..end).collect();
        select_trials_f64(t, &idx)
    }

    pub fn y_train(&self) -> Tensor {
        self.rows(&self.y, 0, self.n_train)
    }

    pub fn y_val(&self) -> Tensor {
        self.rows(&self.y, self.n_train, self.y.shape()[0])
    }

    pub fn y_true_val(&self) -> Tensor {
        self.rows(&self.y_true, self.n_train, self.y_true.shape()[0])
    }
}

pub fn gen_linear_demo(
    d: usize,
    m: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<LinearDemoDataset> {
    if d >= m {
        return Err(CoreError::InvalidArgument(format!("need D < M, got D={d}, M={m}")));
    }
    if n_train == 0 || n_val == 0 {
        return Err(CoreError::InvalidArgument("need nonempty train and validation".into()));
    }
    let n = n_train + n_val;
    let mut rng = stream(seed, "linear-demo");
    let factors = Tensor::randn(&[n, d], 1.0, &mut rng);
    let readout = Tensor::randn(&[m, d], 1.0, &mut rng);
    let mut y_true = Tensor::zeros(&[n, m]);
    gemm(n, d, m, factors.data(), false, readout.data(), true, 0.0, y_true.data_mut());
    let noise = Tensor::randn(&[n, m], 1.0, &mut rng);
    let y_data: Vec<f64> = y_true.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    let y = Tensor::from_vec(&[n, m], y_data)?;
    Ok(LinearDemoDataset { factors, readout, y_true, y, n_train })
}

/// Disjoint random trial partition; sizes are round(frac*n) and n - that.
pub fn split_trials(n_trials: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(CoreError::InvalidArgument("train_frac must be in (0,1)".into()));
    }
    let n_train = ((n_trials as f64 * train_frac).round() as usize).clamp(1, n_trials.saturating_sub(1));
    if n_trials < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 trials to split".into()));
    }
    let mut idx: Vec<usize> = (0..n_trials).collect();
    let mut rng = stream(seed, "trial-split");
    shuffle(&mut idx, &mut rng);
    let mut train = idx[..n_train].to_vec();
    let mut valid = idx[n_train..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}

/// `n_draws` independent random trial subsets of size round(fraction*n).
pub fn subsample_trials(
    n_trials: usize,
    fraction: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::InvalidArgument("fraction must be in (0,1]".into()));
    }
    let size = (n_trials as f64 * fraction).round() as usize;
    if size < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "subsample of {n_trials} trials at {fraction} leaves {size} < 2"
        )));
    }
    let mut draws = Vec::with_capacity(n_draws);
    for i in 0..n_draws {
        let mut idx: Vec<usize> = (0..n_trials).collect();
        let mut rng = substream(seed, "trial-subsample", i as u64);
        shuffle(&mut idx, &mut rng);
        let mut take = idx[..size].to_vec();
        take.sort_unstable();
        draws.push(take);
    }
    Ok(draws)
}

/// Fisher-Yates on our own stream type.
fn shuffle<R: RngExt>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> SynthRnnConfig {
        SynthRnnConfig {
            n_units: 8,
            gamma: 2.5,
            tau: 0.025,
            n_inputs: 2,
            n_trials: 6,
            n_conditions: 3,
            trial_len: 0.2,
            bin_width: 0.01,
            rate_lo: 0.0,
            rate_hi: 30.0,
            seed,
        }
    }

    #[test]
    fn pure_decay_matches_exponential() {
        // W = 0, B = 0: tau y' = -y, so y(t) = y0 exp(-t/tau).
        let cfg = SynthRnnConfig { n_trials: 1, n_conditions: 1, ..tiny_cfg(1) };
        let n = cfg.n_units;
        let w = Tensor::zeros(&[n, n]);
        let b = Tensor::zeros(&[n, cfg.n_inputs]);
        let y0 = Tensor::filled(&[1, n], 1.0);
        let steps = cfg.n_bins() * 10;
        let inputs = Tensor::zeros(&[1, steps, cfg.n_inputs]);
        let binned = integrate_tanh_trajectories(&cfg, &w, &b, &y0, &inputs, EULER_DT).unwrap();
        // Compare the average of tanh(y) in the first bin (t in (0, 10ms])
        // against the analytic value; Euler at dt = tau/25 is ~2% accurate
        // over one time constant.
        let dt = EULER_DT;
        let mut exact = 0.0;
        for s in 1..=10 {
            exact += (1.0f64 * (-(s as f64) * dt / cfg.tau).exp()).tanh() / 10.0;
        }
        let got = binned[[0, 0, 0]];
        assert!((got - exact).abs() / exact < 0.03, "decay {got} vs {exact}");
    }

    #[test]
    fn constant_input_reaches_fixed_point() {
        // W = 0, constant q: steady state y* = B q.
        let cfg = SynthRnnConfig { n_trials: 1, n_conditions: 1, trial_len: 0.5, ..tiny_cfg(2) };
        let n = cfg.n_units;
        let w = Tensor::zeros(&[n, n]);
        let mut rng = stream(3, "fixed-point-test");
        let b = Tensor::randn(&[n, cfg.n_inputs], 1.0, &mut rng);
        let q = [0.7, -0.4];
        let steps = cfg.n_bins() * 10;
        let mut inputs = Tensor::zeros(&[1, steps, cfg.n_inputs]);
        for s in 0..steps {
            inputs[[0, s, 0]] = q[0];
            inputs[[0, s, 1]] = q[1];
        }
        let y0 = Tensor::zeros(&[1, n]);
        let binned = integrate_tanh_trajectories(&cfg, &w, &b, &y0, &inputs, EULER_DT).unwrap();
        // Compare tanh-space fixed point at the final bin (T = 20 tau).
        let last = cfg.n_bins() - 1;
        for u in 0..n {
            let target = (b[[u, 0]] * q[0] + b[[u, 1]] * q[1]).tanh();
            let got = binned[[0, last, u]];
            assert!((got - target).abs() < 1e-3, "unit {u}: {got} vs {target}");
        }
    }

    #[test]
    fn rates_span_configured_range_exactly() {
        let cfg = tiny_cfg(4);
        let ds = simulate_chaotic_rnn(&cfg).unwrap();
        let lo = ds.true_rates.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ds.true_rates.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - cfg.rate_lo).abs() < 1e-12, "min {lo}");
        assert!((hi - cfg.rate_hi).abs() < 1e-12, "max {hi}");
        assert_eq!(ds.spikes.shape(), [6, 20, 8]);
        assert_eq!(ds.true_rates.shape(), &[6, 20, 8]);
    }

    #[test]
    fn conditions_share_initial_state() {
        let cfg = tiny_cfg(5);
        let draws = draw_simulation(&cfg, EULER_DT);
        assert_eq!(draws.condition_ids, vec![0, 1, 2, 0, 1, 2]);
        // Same-condition trials index the same initial-state row.
        let y0 = select_trials_f64(&draws.y0_by_condition, &draws.condition_ids);
        assert_eq!(y0.row(0), y0.row(3));
        assert_ne!(y0.row(0), y0.row(1));
        // ...but receive different inputs.
        assert_ne!(
            draws.inputs[[0, 0, 0]].to_bits(),
            draws.inputs[[3, 0, 0]].to_bits()
        );
    }

    #[test]
    fn poisson_zero_rate_gives_zero_counts() {
        let rates = Tensor::zeros(&[2, 3, 4]);
        let s = sample_poisson(&rates, 0.01, 9).unwrap();
        assert!(s.data().iter().all(|&c| c == 0));
    }

    #[test]
    fn poisson_rejects_negative_rates() {
        let rates = Tensor::filled(&[1, 1, 1], -1.0);
        assert!(sample_poisson(&rates, 0.01, 9).is_err());
    }

    #[test]
    fn poisson_is_deterministic_and_mean_matches() {
        // rate 30 Hz, 10 ms bins, 1e5 draws: sample mean within 0.3 +/- 0.005
        // (99% CI from Poisson variance: 2.58 * sqrt(0.3/1e5) ~ 0.0045).
        let rates = Tensor::filled(&[10, 100, 100], 30.0);
        let a = sample_poisson(&rates, 0.010, 42).unwrap();
        let b = sample_poisson(&rates, 0.010, 42).unwrap();
        assert_eq!(a, b);
        let mean = a.data().iter().map(|&c| c as f64).sum::<f64>() / a.data().len() as f64;
        assert!((mean - 0.3).abs() < 0.005, "sample mean {mean}");
        // Variance ~ mean for Poisson.
        let var = a
            .data()
            .iter()
            .map(|&c| (c as f64 - mean).powi(2))
            .sum::<f64>()
            / (a.data().len() - 1) as f64;
        assert!((var - 0.3).abs() < 0.02, "sample variance {var}");
    }

    #[test]
    fn linear_demo_shapes_and_noise_level() {
        let ds = gen_linear_demo(5, 40, 1000, 200, 7).unwrap();
        assert_eq!(ds.y_train().shape(), &[1000, 40]);
        assert_eq!(ds.y_val().shape(), &[200, 40]);
        // Mean per-element squared deviation of y - y_true ~ 1 within the
        // chi^2 CI for n*M = 48000 elements (4 sigma ~ 0.026).
        let mse: f64 = ds
            .y
            .data()
            .iter()
            .zip(ds.y_true.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / ds.y.numel() as f64;
        assert!((mse - 1.0).abs() < 0.03, "noise mse {mse}");
    }

    #[test]
    fn linear_demo_y_true_has_rank_d() {
        let ds = gen_linear_demo(5, 40, 200, 50, 8).unwrap();
        let n = ds.y_true.shape()[0];
        let m = ds.y_true.shape()[1];
        let mat = nalgebra::DMatrix::from_row_slice(n, m, ds.y_true.data());
        let svd = mat.svd(false, false);
        let smax = svd.singular_values[0];
        let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-8).count();
        assert_eq!(rank, 5);
    }

    #[test]
    fn linear_demo_rejects_d_ge_m() {
        assert!(gen_linear_demo(5, 5, 10, 10, 1).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let (train, valid) = split_trials(4000, 0.8, 3).unwrap();
        assert_eq!(train.len(), 3200);
        assert_eq!(valid.len(), 800);
        let (t2, v2) = split_trials(10, 0.8, 3).unwrap();
        assert_eq!((t2.len(), v2.len()), (8, 2));
        let mut all: Vec<usize> = t2.iter().chain(&v2).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // Determinism.
        assert_eq!(split_trials(10, 0.8, 3).unwrap(), (t2, v2));
        assert_ne!(split_trials(10, 0.8, 4).unwrap().0, split_trials(10, 0.8, 3).unwrap().0);
    }

    #[test]
    fn subsample_sizes_and_variety() {
        let draws = subsample_trials(2296, 0.05, 5, 1).unwrap();
        assert_eq!(draws.len(), 5);
        assert!(draws.iter().all(|d| d.len() == 115));
        assert!(draws.windows(2).any(|w| w[0] != w[1]), "draws should differ");
        let full = subsample_trials(100, 1.0, 1, 1).unwrap();
        assert_eq!(full[0], (0..100).collect::<Vec<_>>());
        assert!(subsample_trials(20, 0.01, 1, 1).is_err());
    }

    #[test]
    fn dataset_container_roundtrip() {
        let ds = simulate_chaotic_rnn(&tiny_cfg(11)).unwrap();
        let c = ds.to_container();
        let ds2 = GroundTruthDataset::from_container(&c).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(c.to_bytes(), ds2.to_container().to_bytes());
    }
}
