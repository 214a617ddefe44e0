//! Behavioral decoding evaluation: optimal linear estimation from per-bin
//! rate features to velocity with trial-disjoint k-fold cross validation,
//! a Gaussian-smoothed-spikes baseline, and trajectory integration.

use crate::error::{CoreError, Result};
use crate::rng::stream;
use crate::tensor::{SpikeTensor, Tensor};
use nalgebra::DMatrix;
use rand::RngExt;

/// Cross-validated decode outcome.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Pooled held-out R^2 per velocity dimension.
    pub r2_per_dim: Vec<f64>,
    /// Fold index per trial.
    pub fold_assignments: Vec<usize>,
    /// Per fold, the fitted [n_features + 1, dims] weights (bias row first).
    pub weights_per_fold: Vec<Tensor>,
    /// Least-norm fallback was needed for at least one fold.
    pub rank_deficient: bool,
}

/// Least-squares decode of `velocity` from per-bin `features`, fit and scored
/// with trial-level folds so no timepoint of a trial leaks across the split.
pub fn fit_ole_cv(
    features: &Tensor,
    velocity: &Tensor,
    k_folds: usize,
    seed: u64,
) -> Result<DecodeResult> {
    let fs = features.shape();
    let vs = velocity.shape();
    if fs.len() != 3 || vs.len() != 3 || fs[0] != vs[0] || fs[1] != vs[1] {
        return Err(CoreError::ShapeMismatch(format!(
            "features {fs:?} vs velocity {vs:?}"
        )));
    }
    let (n_trials, n_bins, n_feat) = (fs[0], fs[1], fs[2]);
    let dims = vs[2];
    if k_folds < 2 {
        return Err(CoreError::InvalidArgument("k_folds must be >= 2".into()));
    }
    if n_trials < k_folds {
        return Err(CoreError::InvalidArgument(format!(
            "need at least {k_folds} trials, got {n_trials}"
        )));
    }

    // Balanced random fold assignment by trial.
    let mut order: Vec<usize> = (0..n_trials).collect();
    let mut rng = stream(seed, "ole-folds");
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut fold_assignments = vec![0usize; n_trials];
    for (pos, &trial) in order.iter().enumerate() {
        fold_assignments[trial] = pos % k_folds;
    }

    let cols = n_feat + 1;
    let mut weights_per_fold = Vec::with_capacity(k_folds);
    let mut rank_deficient = false;
    let mut pred = Tensor::zeros(&[n_trials, n_bins, dims]);

    for fold in 0..k_folds {
        // Normal equations over training-fold timepoints.
        let mut xtx = DMatrix::<f64>::zeros(cols, cols);
        let mut xty = DMatrix::<f64>::zeros(cols, dims);
        let mut row = vec![0.0; cols];
        for trial in 0..n_trials {
            if fold_assignments[trial] == fold {
                continue;
            }
            for bin in 0..n_bins {
                row[0] = 1.0;
                for f in 0..n_feat {
                    row[1 + f] = features[[trial, bin, f]];
                }
                for i in 0..cols {
                    for j in i..cols {
                        xtx[(i, j)] += row[i] * row[j];
                    }
                    for d in 0..dims {
                        xty[(i, d)] += row[i] * velocity[[trial, bin, d]];
                    }
                }
            }
        }
        for i in 0..cols {
            for j in 0..i {
                xtx[(i, j)] = xtx[(j, i)];
            }
        }

        let beta = match xtx.clone().cholesky() {
            Some(chol) => chol.solve(&xty),
            None => {
                // Rank-deficient design: least-norm solution via SVD.
                rank_deficient = true;
                eprintln!("fit_ole_cv: rank-deficient design in fold {fold}, using least-norm solution");
                let svd = xtx.clone().svd(true, true);
                svd.pseudo_inverse(1e-12)
                    .map_err(|e| CoreError::InvalidArgument(format!("svd: {e}")))?
                    * &xty
            }
        };

        let mut w = Tensor::zeros(&[cols, dims]);
        for i in 0..cols {
            for d in 0..dims {
                w[[i, d]] = beta[(i, d)];
            }
        }
        weights_per_fold.push(w);

        // Predict the held-out fold.
        for trial in 0..n_trials {
            if fold_assignments[trial] != fold {
                continue;
            }
            for bin in 0..n_bins {
                for d in 0..dims {
                    let mut acc = beta[(0, d)];
                    for f in 0..n_feat {
                        acc += features[[trial, bin, f]] * beta[(1 + f, d)];
                    }
                    pred[[trial, bin, d]] = acc;
                }
            }
        }
    }

    // Pooled R^2 per dimension over all held-out predictions.
    let mut r2_per_dim = Vec::with_capacity(dims);
    for d in 0..dims {
        let n = n_trials * n_bins;
        let mut p = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        for trial in 0..n_trials {
            for bin in 0..n_bins {
                p.push(pred[[trial, bin, d]]);
                t.push(velocity[[trial, bin, d]]);
            }
        }
        r2_per_dim.push(crate::trainer::r2(
            &Tensor::from_vec(&[n], p)?,
            &Tensor::from_vec(&[n], t)?,
        )?);
    }

    Ok(DecodeResult { r2_per_dim, fold_assignments, weights_per_fold, rank_deficient })
}

/// Per neuron per trial, convolve binned counts with a truncated (+/- 4 sigma)
/// normalized Gaussian; zero padding at the edges.
pub fn gaussian_smooth_baseline(spikes: &SpikeTensor, sigma_s: f64, bin_width: f64) -> Result<Tensor> {
    if !(sigma_s > 0.0) {
        return Err(CoreError::InvalidArgument("sigma must be > 0".into()));
    }
    let sigma_bins = sigma_s / bin_width;
    let half = (4.0 * sigma_bins).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    for k in -half..=half {
        kernel.push((-0.5 * (k as f64 / sigma_bins).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= norm;
    }

    let [n_trials, n_bins, n_neurons] = spikes.shape();
    let mut out = Tensor::zeros(&[n_trials, n_bins, n_neurons]);
    for trial in 0..n_trials {
        for neuron in 0..n_neurons {
            for bin in 0..n_bins as i64 {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let src = bin + (ki as i64 - half);
                    if src >= 0 && src < n_bins as i64 {
                        acc += kv * spikes.get(trial, src as usize, neuron) as f64;
                    }
                }
                out[[trial, bin as usize, neuron]] = acc;
            }
        }
    }
    Ok(out)
}

/// Cumulative sum times bin width, from the origin: positions[k] is the
/// location after integrating k bins, so the path has n_bins + 1 points.
pub fn integrate_trajectory(velocity: &Tensor, bin_width: f64) -> Result<Tensor> {
    let vs = velocity.shape();
    if vs.len() != 2 {
        return Err(CoreError::ShapeMismatch("velocity must be [bin, dims]".into()));
    }
    let (n_bins, dims) = (vs[0], vs[1]);
    let mut path = Tensor::zeros(&[n_bins + 1, dims]);
    for bin in 0..n_bins {
        for d in 0..dims {
            path[[bin + 1, d]] = path[[bin, d]] + velocity[[bin, d]] * bin_width;
        }
    }
    Ok(path)
}
