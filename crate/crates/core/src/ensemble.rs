//! Weighted averaging of adapters into a fine-tuning initialization.
//!
//! Factors are averaged separately: the merged `B` is the weighted mean of
//! the `B`s and the merged `A` the weighted mean of the `A`s, which keeps the
//! result a rank-`r` adapter that can be trained further. Each weight is
//! normalized by the total first, then entries are summed in input order.

use crate::lora::{Adapter, Factors};
use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EnsembleError {
    #[error("nothing to merge")]
    Empty,
    #[error("{adapters} adapters but {weights} weights")]
    Length { adapters: usize, weights: usize },
    #[error("adapter {0} has a different spec from adapter 0")]
    SpecMismatch(usize),
    #[error("weight error: {0}")]
    Weight(String),
}

/// Adapters paired with nonnegative weights, validated on construction.
#[derive(Clone, Copy, Debug)]
pub struct MergeInput<'a> {
    adapters: &'a [&'a Adapter],
    weights: &'a [f64],
}

impl<'a> MergeInput<'a> {
    pub fn new(adapters: &'a [&'a Adapter], weights: &'a [f64]) -> Result<Self, EnsembleError> {
        if adapters.is_empty() {
            return Err(EnsembleError::Empty);
        }
        if adapters.len() != weights.len() {
            return Err(EnsembleError::Length { adapters: adapters.len(), weights: weights.len() });
        }
        if let Some(i) = adapters.iter().position(|a| a.spec() != adapters[0].spec()) {
            return Err(EnsembleError::SpecMismatch(i));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(EnsembleError::Weight(format!("{w} is not a finite nonnegative weight")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(EnsembleError::Weight("weights sum to zero".into()));
        }
        Ok(MergeInput { adapters, weights })
    }
}

fn weighted_mean(parts: &[&Tensor], coeffs: &[f64]) -> Tensor {
    let mut data: Vec<f64> = parts[0].data().iter().map(|v| coeffs[0] * v).collect();
    for (t, &c) in parts.iter().zip(coeffs).skip(1) {
        for (acc, v) in data.iter_mut().zip(t.data()) {
            *acc += c * v;
        }
    }
    Tensor::from_parts(parts[0].rows(), parts[0].cols(), data)
}

pub fn merge(input: &MergeInput) -> Result<Adapter, EnsembleError> {
    let total: f64 = input.weights.iter().sum();
    let coeffs: Vec<f64> = input.weights.iter().map(|w| w / total).collect();
    let spec = input.adapters[0].spec().clone();
    let factors = (0..spec.targets().len())
        .map(|t| {
            let bs: Vec<&Tensor> = input.adapters.iter().map(|a| &a.factors()[t].b).collect();
            let as_: Vec<&Tensor> = input.adapters.iter().map(|a| &a.factors()[t].a).collect();
            Factors { b: weighted_mean(&bs, &coeffs), a: weighted_mean(&as_, &coeffs) }
        })
        .collect();
    Ok(Adapter::from_factors(spec, factors).expect("merged factors keep the common shapes"))
}

/// Convenience wrapper validating and merging in one call.
pub fn merge_weighted(adapters: &[&Adapter], weights: &[f64]) -> Result<Adapter, EnsembleError> {
    merge(&MergeInput::new(adapters, weights)?)
}
