//! Dense row-major tensors: `f64` values, boolean masks, and integer spike counts.

use crate::error::{CoreError, Result};
use rand::RngExt;
use rand_distr::StandardNormal;

/// Dense real-valued tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Standard-normal entries drawn from `rng`, scaled by `std`.
    pub fn randn<R: RngExt>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a [1]-shaped tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

impl std::ops::Index<[usize; 2]> for Tensor {
    type Output = f64;
    fn index(&self, [i, j]: [usize; 2]) -> &f64 {
        &self.data[i * self.shape[1] + j]
    }
}

impl std::ops::Index<[usize; 3]> for Tensor {
    type Output = f64;
    fn index(&self, [i, j, k]: [usize; 3]) -> &f64 {
        &self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }
}

impl std::ops::IndexMut<[usize; 2]> for Tensor {
    fn index_mut(&mut self, [i, j]: [usize; 2]) -> &mut f64 {
        &mut self.data[i * self.shape[1] + j]
    }
}

impl std::ops::IndexMut<[usize; 3]> for Tensor {
    fn index_mut(&mut self, [i, j, k]: [usize; 3]) -> &mut f64 {
        &mut self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }
}

/// Boolean mask over a tensor's elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolTensor {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolTensor {
    pub fn filled(shape: &[usize], value: bool) -> Self {
        let n = shape.iter().product();
        BoolTensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(BoolTensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> BoolTensor {
        BoolTensor { shape: self.shape.clone(), data: self.data.iter().map(|&b| !b).collect() }
    }

    pub fn and(&self, other: &BoolTensor) -> BoolTensor {
        debug_assert_eq!(self.shape, other.shape);
        BoolTensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn or(&self, other: &BoolTensor) -> BoolTensor {
        debug_assert_eq!(self.shape, other.shape);
        BoolTensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn xor(&self, other: &BoolTensor) -> BoolTensor {
        debug_assert_eq!(self.shape, other.shape);
        BoolTensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a ^ b).collect(),
        }
    }

    /// 0.0/1.0 representation for arithmetic with `Tensor`s.
    pub fn to_f64(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Observed spike counts, indexed `[trial, bin, neuron]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    n_trials: usize,
    n_bins: usize,
    n_neurons: usize,
    data: Vec<u32>,
}

impl SpikeTensor {
    pub fn zeros(n_trials: usize, n_bins: usize, n_neurons: usize) -> Self {
        SpikeTensor { n_trials, n_bins, n_neurons, data: vec![0; n_trials * n_bins * n_neurons] }
    }

    pub fn from_vec(n_trials: usize, n_bins: usize, n_neurons: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != n_trials * n_bins * n_neurons {
            return Err(CoreError::ShapeMismatch(format!(
                "[{},{},{}] implies {} counts, got {}",
                n_trials,
                n_bins,
                n_neurons,
                n_trials * n_bins * n_neurons,
                data.len()
            )));
        }
        Ok(SpikeTensor { n_trials, n_bins, n_neurons, data })
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_trials, self.n_bins, self.n_neurons]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, trial: usize, bin: usize, neuron: usize) -> u32 {
        self.data[(trial * self.n_bins + bin) * self.n_neurons + neuron]
    }

    /// Counts of one trial as a flat `[bin, neuron]` slice.
    pub fn trial(&self, trial: usize) -> &[u32] {
        let stride = self.n_bins * self.n_neurons;
        &self.data[trial * stride..(trial + 1) * stride]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.n_trials, self.n_bins, self.n_neurons],
            data: self.data.iter().map(|&c| c as f64).collect(),
        }
    }

    /// New tensor containing only the given trials, in the given order.
    pub fn select_trials(&self, trials: &[usize]) -> SpikeTensor {
        let stride = self.n_bins * self.n_neurons;
        let mut data = Vec::with_capacity(trials.len() * stride);
        for &t in trials {
            data.extend_from_slice(self.trial(t));
        }
        SpikeTensor { n_trials: trials.len(), n_bins: self.n_bins, n_neurons: self.n_neurons, data }
    }
}

/// Select trials along axis 0 of a `[trial, bin, ...]` tensor.
pub fn select_trials_f64(t: &Tensor, trials: &[usize]) -> Tensor {
    let shape = t.shape();
    assert!(!shape.is_empty());
    let stride: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(trials.len() * stride);
    for &tr in trials {
        data.extend_from_slice(&t.data()[tr * stride..(tr + 1) * stride]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = trials.len();
    Tensor { shape: new_shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t[[0, 2]], 2.0);
        assert_eq!(t[[1, 0]], 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn bool_ops() {
        let a = BoolTensor::from_vec(&[4], vec![true, true, false, false]).unwrap();
        let b = a.not();
        assert_eq!(a.and(&b).count_true(), 0);
        assert_eq!(a.or(&b).count_true(), 4);
        assert_eq!(a.xor(&b).count_true(), 4);
    }

    #[test]
    fn spike_trial_selection() {
        let s = SpikeTensor::from_vec(3, 2, 1, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let sub = s.select_trials(&[2, 0]);
        assert_eq!(sub.data(), &[4, 5, 0, 1]);
        assert_eq!(sub.n_trials(), 2);
    }
}
