//! Batch-normalization running state and eval-mode folding.

use super::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Running statistics of one batch-normalization site.
///
/// The affine scale/shift are ordinary parameters held by the owning layer;
/// this struct carries only the non-learnable buffers.
#[derive(Clone, Debug)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Fold one batch of statistics into the running estimates.
    ///
    /// The running variance stores the unbiased estimate, matching the usual
    /// train/eval convention.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], n_per_channel: usize) {
        let n = n_per_channel as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum as f64;
        for c in 0..self.channels() {
            self.running_mean[c] =
                ((1.0 - m) * self.running_mean[c] as f64 + m * mean[c]) as f32;
            self.running_var[c] =
                ((1.0 - m) * self.running_var[c] as f64 + m * var[c] * correction) as f32;
        }
    }
}

/// Per-channel multiplier and shift equivalent to an eval-mode BN.
fn bn_affine(gamma: &[f32], beta: &[f32], state: &BnState) -> (Vec<f32>, Vec<f32>) {
    let mut mult = vec![0.0f32; state.channels()];
    let mut shift = vec![0.0f32; state.channels()];
    for c in 0..state.channels() {
        let inv = 1.0 / (state.running_var[c] + state.eps).sqrt();
        mult[c] = gamma[c] * inv;
        shift[c] = beta[c] - state.running_mean[c] * gamma[c] * inv;
    }
    (mult, shift)
}

/// Fold eval-mode BN into a linear weight `[in, out]`, returning the fused
/// weight and bias so the pair counts as one layer.
pub fn fold_linear_bn(
    weight: &Tensor,
    bias: Option<&Tensor>,
    gamma: &[f32],
    beta: &[f32],
    state: &BnState,
) -> (Tensor, Tensor) {
    let (mult, shift) = bn_affine(gamma, beta, state);
    let out_features = *weight.shape().last().expect("rank-2 weight");
    let mut w = weight.clone();
    for row in w.data_mut().chunks_exact_mut(out_features) {
        for (v, &m) in row.iter_mut().zip(&mult) {
            *v *= m;
        }
    }
    let mut b = vec![0.0f32; out_features];
    for (o, bv) in b.iter_mut().enumerate() {
        let prior = bias.map_or(0.0, |t| t.data()[o]);
        *bv = prior * mult[o] + shift[o];
    }
    (w, Tensor::new(vec![out_features], b).expect("sized"))
}

/// Fold eval-mode BN into a conv1d weight `[C_out, C_in/groups, K]`.
pub fn fold_conv_bn(
    weight: &Tensor,
    bias: Option<&Tensor>,
    gamma: &[f32],
    beta: &[f32],
    state: &BnState,
) -> (Tensor, Tensor) {
    let (mult, shift) = bn_affine(gamma, beta, state);
    let c_out = weight.shape()[0];
    let per_filter = weight.len() / c_out;
    let mut w = weight.clone();
    for (co, filter) in w.data_mut().chunks_exact_mut(per_filter).enumerate() {
        for v in filter.iter_mut() {
            *v *= mult[co];
        }
    }
    let mut b = vec![0.0f32; c_out];
    for (co, bv) in b.iter_mut().enumerate() {
        let prior = bias.map_or(0.0, |t| t.data()[co]);
        *bv = prior * mult[co] + shift[co];
    }
    (w, Tensor::new(vec![c_out], b).expect("sized"))
}
