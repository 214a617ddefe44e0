//! Unconstrained linear autoencoder on noisy low-rank data, trained with and
//! without coordinated dropout. Without CD, gradient descent drives the [M,M]
//! weight matrix to the identity and overfits the noise; with CD, the
//! diagonal receives exactly zero gradient and the network is forced to model
//! shared structure.

use crate::datagen::LinearDemoDataset;
use crate::error::{CoreError, Result};
use crate::masking::{apply_input_mask, make_cd_masks};
use crate::rng::{derive_seed, stream};
use crate::tape::gemm;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAeConfig {
    pub cd_enabled: bool,
    pub keep_ratio: f64,
    /// Rescale surviving inputs by 1/keep_ratio.
    pub cd_rescale: bool,
    pub steps: usize,
    pub learning_rate: f64,
    /// Record validation curves every this many steps (and at the end).
    pub record_every: usize,
    /// Start from U = 0 so the blocked diagonal is directly observable;
    /// otherwise a small random init.
    pub zero_init: bool,
    pub seed: u64,
}

impl LinearAeConfig {
    pub fn new(cd_enabled: bool, seed: u64) -> Self {
        LinearAeConfig {
            cd_enabled,
            keep_ratio: 0.8,
            cd_rescale: true,
            steps: 5000,
            learning_rate: 0.01,
            record_every: 10,
            zero_init: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    /// Reconstruction MSE on training data, full input.
    pub loss_recon_train: f64,
    /// Reconstruction MSE on validation data against noisy observations.
    pub loss_recon: f64,
    /// Reconstruction MSE on validation data against the noise-free truth.
    pub loss_true: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAeState {
    /// [M, M] learned weights.
    pub u: Tensor,
    pub step: usize,
    pub curves: Vec<CurvePoint>,
}

impl LinearAeState {
    pub fn diag_abs_mean_dev_from_identity(&self) -> f64 {
        let m = self.u.shape()[0];
        (0..m).map(|i| (self.u[[i, i]] - 1.0).abs()).sum::<f64>() / m as f64
    }

    pub fn diag_abs_max(&self) -> f64 {
        let m = self.u.shape()[0];
        (0..m).map(|i| self.u[[i, i]].abs()).fold(0.0, f64::max)
    }

    pub fn curves_to_csv(&self) -> String {
        let mut out = String::from("step,loss_recon_train,loss_recon,loss_true\n");
        for c in &self.curves {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.step, c.loss_recon_train, c.loss_recon, c.loss_true
            ));
        }
        out
    }

    pub fn weights_to_csv(&self) -> String {
        let m = self.u.shape()[0];
        let mut out = String::new();
        for i in 0..m {
            let row: Vec<String> = (0..m).map(|j| self.u[[i, j]].to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, curves_path: &Path, weights_path: &Path) -> Result<()> {
        for (path, content) in [(curves_path, self.curves_to_csv()), (weights_path, self.weights_to_csv())] {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::File::create(path)?.write_all(content.as_bytes())?;
        }
        Ok(())
    }
}

/// y_hat = U y, [n,M] rows of samples: Y U^T via gemm.
fn predict(u: &Tensor, y: &Tensor) -> Tensor {
    let (n, m) = (y.shape()[0], y.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    gemm(n, m, m, y.data(), false, u.data(), true, 0.0, out.data_mut());
    out
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    d / a.numel() as f64
}

/// Full-batch gradient descent on mean squared reconstruction of the
/// observed data; with CD, a fresh complementary mask pair per step masks
/// the input and restricts the loss to the complement.
pub fn train_linear_ae(data: &LinearDemoDataset, cfg: &LinearAeConfig) -> Result<LinearAeState> {
    if cfg.steps == 0 {
        return Err(CoreError::InvalidArgument("steps must be >= 1".into()));
    }
    if cfg.cd_enabled && !(cfg.keep_ratio > 0.0 && cfg.keep_ratio < 1.0) {
        return Err(CoreError::InvalidArgument("keep_ratio must be in (0,1)".into()));
    }
    let y_train = data.y_train();
    let y_val = data.y_val();
    let y_true_val = data.y_true_val();
    let (n, m) = (y_train.shape()[0], y_train.shape()[1]);

    let mut u = if cfg.zero_init {
        Tensor::zeros(&[m, m])
    } else {
        Tensor::randn(&[m, m], 0.01, &mut stream(cfg.seed, "linear-ae-init"))
    };

    let mut curves = Vec::new();
    let mut record = |u: &Tensor, step: usize, curves: &mut Vec<CurvePoint>| {
        let pred_train = predict(u, &y_train);
        let pred_val = predict(u, &y_val);
        curves.push(CurvePoint {
            step,
            loss_recon_train: mse(&pred_train, &y_train),
            loss_recon: mse(&pred_val, &y_val),
            loss_true: mse(&pred_val, &y_true_val),
        });
    };
    record(&u, 0, &mut curves);

    let mut grad = vec![0.0; m * m];
    for step in 0..cfg.steps {
        let (x_in, err, count) = if cfg.cd_enabled {
            let pair = make_cd_masks(&[n, m], cfg.keep_ratio, derive_seed(cfg.seed, "linear-ae-cd", step as u64))?;
            let rescale = if cfg.cd_rescale { Some(cfg.keep_ratio) } else { None };
            let x_in = apply_input_mask(&y_train, &pair.input_keep, rescale)?;
            let pred = predict(&u, &x_in);
            let mut err = Tensor::zeros(&[n, m]);
            let mut count = 0usize;
            for i in 0..n * m {
                if pair.grad_keep.data()[i] {
                    err.data_mut()[i] = pred.data()[i] - y_train.data()[i];
                    count += 1;
                }
            }
            (x_in, err, count)
        } else {
            let pred = predict(&u, &y_train);
            let mut err = Tensor::zeros(&[n, m]);
            for i in 0..n * m {
                err.data_mut()[i] = pred.data()[i] - y_train.data()[i];
            }
            (y_train.clone(), err, n * m)
        };

        // dL/dU = (2 / count) E^T X_in for L = (1/count) sum_included E^2.
        if count > 0 {
            gemm(m, n, m, err.data(), true, x_in.data(), false, 0.0, &mut grad);
            let scale = 2.0 / count as f64;
            for (ug, g) in u.data_mut().iter_mut().zip(&grad) {
                *ug -= cfg.learning_rate * scale * g;
            }
        }
        if !u.is_finite() {
            return Err(CoreError::Diverged { step: step as u64 });
        }
        let s = step + 1;
        if s % cfg.record_every == 0 || s == cfg.steps {
            record(&u, s, &mut curves);
        }
    }

    Ok(LinearAeState { u, step: cfg.steps, curves })
}

/// Validation true-loss of the best rank-D linear reconstruction: project the
/// noisy observations onto the top-D right-singular subspace of the noise-free
/// data. This is the floor the CD-trained autoencoder is judged against.
pub fn oracle_true_loss(data: &LinearDemoDataset) -> Result<f64> {
    let d = data.factors.shape()[1];
    let (n, m) = (data.y_true.shape()[0], data.y_true.shape()[1]);
    let yt = nalgebra::DMatrix::from_row_slice(n, m, data.y_true.data());
    let svd = yt.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| CoreError::InvalidArgument("svd failed".into()))?;
    // Projector P = V_D V_D^T onto the top-D right singular subspace.
    let v_d = v_t.rows(0, d.min(v_t.nrows())).transpose(); // [M, D]
    let p = &v_d * v_d.transpose(); // [M, M]

    let y_val = data.y_val();
    let y_true_val = data.y_true_val();
    let n_val = y_val.shape()[0];
    let yv = nalgebra::DMatrix::from_row_slice(n_val, m, y_val.data());
    let proj = &yv * &p; // rows are P y_s since P is symmetric
    let mut loss = 0.0;
    for i in 0..n_val {
        for j in 0..m {
            let diff = proj[(i, j)] - y_true_val[[i, j]];
            loss += diff * diff;
        }
    }
    Ok(loss / (n_val * m) as f64)
}
