//! Element-level masking: coordinated dropout (fresh complementary mask pair
//! per training step) and sample validation (one persistent speckled holdout
//! per run), plus input rescaling and masked Poisson NLL evaluation.

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::substream;
use crate::tensor::{BoolTensor, SpikeTensor, Tensor};
use rand::RngExt;

/// Complementary input/gradient masks for one training step: every element is
/// shown at the input or graded at the output, never both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub input_keep: BoolTensor,
    pub grad_keep: BoolTensor,
}

/// A fixed random subset of [trial, bin, neuron] elements withheld from
/// training; reconstruction loss on them is the sample-validation metric.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleHoldout {
    /// true = held out.
    pub held_out: BoolTensor,
    pub holdout_frac: f64,
}

impl SpeckleHoldout {
    pub fn kept(&self) -> BoolTensor {
        self.held_out.not()
    }
}

/// Fresh coordinated-dropout masks for one step: each element lands in
/// `input_keep` with probability `keep_ratio`, `grad_keep` is the exact
/// complement. A keep_ratio of 1.0 would block every gradient, so only the
/// open interval is accepted.
pub fn make_cd_masks(shape: &[usize], keep_ratio: f64, step_seed: u64) -> Result<MaskPair> {
    if !(keep_ratio > 0.0 && keep_ratio < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "keep_ratio must be in (0,1), got {keep_ratio}"
        )));
    }
    let n: usize = shape.iter().product();
    let mut rng = substream(step_seed, "cd-mask", 0);
    let input: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < keep_ratio).collect();
    let grad: Vec<bool> = input.iter().map(|&b| !b).collect();
    Ok(MaskPair {
        input_keep: BoolTensor::from_vec(shape, input)?,
        grad_keep: BoolTensor::from_vec(shape, grad)?,
    })
}

/// Element-wise i.i.d. Bernoulli(holdout_frac) holdout set, generated once per
/// training run and fixed thereafter.
pub fn make_speckle_holdout(shape: &[usize], holdout_frac: f64, seed: u64) -> Result<SpeckleHoldout> {
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "holdout_frac must be in (0,1), got {holdout_frac}"
        )));
    }
    let n: usize = shape.iter().product();
    let mut rng = substream(seed, "speckle-holdout", 0);
    let held: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < holdout_frac).collect();
    Ok(SpeckleHoldout { held_out: BoolTensor::from_vec(shape, held)?, holdout_frac })
}

/// Zero masked elements; optionally rescale survivors by 1/keep (the
/// inverted-dropout convention), with `keep` the mask's design parameter
/// rather than its empirical fraction.
pub fn apply_input_mask(x: &Tensor, keep: &BoolTensor, rescale: Option<f64>) -> Result<Tensor> {
    if x.shape() != keep.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "input {:?} vs mask {:?}",
            x.shape(),
            keep.shape()
        )));
    }
    let gain = match rescale {
        Some(k) if k > 0.0 => 1.0 / k,
        Some(k) => {
            return Err(CoreError::InvalidArgument(format!("rescale parameter {k} must be > 0")));
        }
        None => 1.0,
    };
    let data = x
        .data()
        .iter()
        .zip(keep.data())
        .map(|(&v, &keep)| if keep { v * gain } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Poisson NLL summed over included elements, plus the element count so
/// callers can mean-normalize. Excluding an element here is mathematically
/// identical to blocking its output gradient.
pub fn masked_poisson_nll(
    rates_per_bin: &Tensor,
    counts: &SpikeTensor,
    include: &BoolTensor,
) -> Result<(f64, usize)> {
    let shape = counts.shape();
    if rates_per_bin.shape() != shape || include.shape() != shape {
        return Err(CoreError::ShapeMismatch(format!(
            "rates {:?} / include {:?} vs counts {:?}",
            rates_per_bin.shape(),
            include.shape(),
            shape
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((&r, &k), &inc) in rates_per_bin.data().iter().zip(counts.data()).zip(include.data()) {
        if !inc {
            continue;
        }
        if r < 0.0 || !r.is_finite() {
            return Err(CoreError::InvalidArgument(format!(
                "rate {r} on an included element"
            )));
        }
        total += math::poisson_nll_term(r, k);
        n += 1;
    }
    Ok((total, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cd_masks_are_exact_complements() {
        let pair = make_cd_masks(&[7, 9, 3], 0.6, 123).unwrap();
        let xor = pair.input_keep.xor(&pair.grad_keep);
        assert_eq!(xor.count_true(), xor.numel());
        assert_eq!(pair.input_keep.and(&pair.grad_keep).count_true(), 0);
        assert_eq!(pair.input_keep.or(&pair.grad_keep).count_true(), xor.numel());
    }

    #[test]
    fn cd_keep_fraction_near_ratio() {
        // keep 0.7 over 1e5 elements: binomial 99% CI is +/- 0.0037.
        let pair = make_cd_masks(&[100, 100, 10], 0.7, 7).unwrap();
        let frac = pair.input_keep.count_true() as f64 / pair.input_keep.numel() as f64;
        assert!((frac - 0.7).abs() < 0.005, "kept fraction {frac}");
    }

    #[test]
    fn cd_masks_deterministic_per_step_seed() {
        let a = make_cd_masks(&[4, 5, 6], 0.5, 99).unwrap();
        let b = make_cd_masks(&[4, 5, 6], 0.5, 99).unwrap();
        let c = make_cd_masks(&[4, 5, 6], 0.5, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn cd_rejects_degenerate_ratios() {
        assert!(make_cd_masks(&[2, 2, 2], 0.0, 1).is_err());
        assert!(make_cd_masks(&[2, 2, 2], 1.0, 1).is_err());
    }

    #[test]
    fn speckle_fraction_and_determinism() {
        // 20% of 1e5 elements: binomial 99.8% CI is ~ +/- 0.004.
        let h = make_speckle_holdout(&[100, 100, 10], 0.2, 5).unwrap();
        let frac = h.held_out.count_true() as f64 / h.held_out.numel() as f64;
        assert!((frac - 0.2).abs() < 0.004, "held-out fraction {frac}");
        assert_eq!(h, make_speckle_holdout(&[100, 100, 10], 0.2, 5).unwrap());
        // Holdout and its complement cover all elements exactly once.
        assert_eq!(h.held_out.and(&h.kept()).count_true(), 0);
        assert_eq!(h.held_out.or(&h.kept()).count_true(), h.held_out.numel());
        assert!(make_speckle_holdout(&[2], 0.0, 1).is_err());
        assert!(make_speckle_holdout(&[2], 1.0, 1).is_err());
    }

    #[test]
    fn input_mask_identity_zero_and_rescale() {
        let x = Tensor::from_vec(&[4], vec![3.0, 2.0, -1.0, 0.5]).unwrap();
        let all = BoolTensor::filled(&[4], true);
        assert_eq!(apply_input_mask(&x, &all, None).unwrap(), x);

        let mut one_off = all.clone();
        one_off.data_mut()[0] = false;
        let masked = apply_input_mask(&x, &one_off, None).unwrap();
        assert_eq!(masked.data()[0], 0.0);
        assert_eq!(&masked.data()[1..], &x.data()[1..]);

        // keep_ratio 0.8 with rescale: surviving 2 -> 2.5.
        let rescaled = apply_input_mask(&x, &one_off, Some(0.8)).unwrap();
        assert_eq!(rescaled.data()[1], 2.5);
        assert_eq!(rescaled.data()[0], 0.0);
    }

    #[test]
    fn masked_nll_values_and_empty_mask() {
        let counts = SpikeTensor::from_vec(1, 1, 2, vec![0, 2]).unwrap();
        let rates = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let all = BoolTensor::filled(&[1, 1, 2], true);
        let (total, n) = masked_poisson_nll(&rates, &counts, &all).unwrap();
        assert_eq!(n, 2);
        // 1.0 (lambda=1,k=0) + 2 - ln 2 (lambda=2,k=2)
        assert!((total - (1.0 + 2.0 - 2.0f64.ln())).abs() < 1e-12);

        let none = BoolTensor::filled(&[1, 1, 2], false);
        let (t0, n0) = masked_poisson_nll(&rates, &counts, &none).unwrap();
        assert_eq!((t0, n0), (0.0, 0));
    }

    #[test]
    fn masked_nll_full_mask_equals_unmasked_sum() {
        let counts = SpikeTensor::from_vec(2, 3, 4, (0..24).map(|v| (v % 4) as u32).collect()).unwrap();
        let rates = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| 0.1 + v as f64 * 0.05).collect()).unwrap();
        let all = BoolTensor::filled(&[2, 3, 4], true);
        let (total, n) = masked_poisson_nll(&rates, &counts, &all).unwrap();
        assert_eq!(n, 24);
        let direct: f64 = rates
            .data()
            .iter()
            .zip(counts.data())
            .map(|(&r, &k)| math::poisson_nll_term(r, k))
            .sum();
        assert!((total - direct).abs() < 1e-12);
    }

    #[test]
    fn masked_nll_rejects_negative_rate_only_when_included() {
        let counts = SpikeTensor::from_vec(1, 1, 2, vec![1, 1]).unwrap();
        let rates = Tensor::from_vec(&[1, 1, 2], vec![-0.5, 1.0]).unwrap();
        let all = BoolTensor::filled(&[1, 1, 2], true);
        assert!(masked_poisson_nll(&rates, &counts, &all).is_err());
        let second_only = BoolTensor::from_vec(&[1, 1, 2], vec![false, true]).unwrap();
        assert!(masked_poisson_nll(&rates, &counts, &second_only).is_ok());
    }
}
