//! {Linear-BN} and {Conv1D-BN} building blocks shared by the stack.

use rand_chacha::ChaCha8Rng;

use crate::compute::{BnState, ComputeError, ParamId, ParamStore, Tape, TensorId};

/// Learnable weight of a {Linear-BN} pair acting on `[B, T, in] -> [B, T, out]`.
pub struct LinearBn {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: BnState,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearBn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let w = store.add_fan_in(
            format!("{name}.w"),
            &[in_features, out_features],
            in_features,
            rng,
        );
        let gamma = store.add(
            format!("{name}.bn.gamma"),
            crate::compute::Tensor::full(&[out_features], 1.0),
        );
        let beta = store.add(
            format!("{name}.bn.beta"),
            crate::compute::Tensor::zeros(&[out_features]),
        );
        Self {
            w,
            gamma,
            beta,
            bn: BnState::new(out_features),
            in_features,
            out_features,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId, ComputeError> {
        let w = tape.param(store, self.w);
        let h = tape.matmul(x, w)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let axis = tape.shape(h).len() - 1;
        tape.batchnorm(h, gamma, beta, &mut self.bn, axis, training)
    }
}

/// Learnable weight of a {Conv1D-BN} pair acting on `[B, C_in, L]`.
pub struct ConvBn {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub bn: BnState,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        let fan_in = c_in / groups * kernel;
        let w = store.add_fan_in(
            format!("{name}.w"),
            &[c_out, c_in / groups, kernel],
            fan_in,
            rng,
        );
        let gamma = store.add(
            format!("{name}.bn.gamma"),
            crate::compute::Tensor::full(&[c_out], 1.0),
        );
        let beta = store.add(
            format!("{name}.bn.beta"),
            crate::compute::Tensor::zeros(&[c_out]),
        );
        Self {
            w,
            gamma,
            beta,
            bn: BnState::new(c_out),
            stride: 1,
            padding,
            groups,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
        training: bool,
    ) -> Result<TensorId, ComputeError> {
        let w = tape.param(store, self.w);
        let h = tape.conv1d(x, w, self.stride, self.padding, self.groups)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.batchnorm(h, gamma, beta, &mut self.bn, 1, training)
    }
}

/// `[B, T, C] -> [B, C, T]` and back.
pub fn time_major(tape: &mut Tape, x: TensorId) -> Result<TensorId, ComputeError> {
    tape.permute(x, &[0, 2, 1])
}

/// `[B, T, d] -> [B, heads, T, d_h]`.
pub fn to_heads(
    tape: &mut Tape,
    x: TensorId,
    heads: usize,
) -> Result<TensorId, ComputeError> {
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = tape.reshape(x, &[b, t, heads, dh])?;
    tape.permute(split, &[0, 2, 1, 3])
}

/// `[B, heads, T, d_h] -> [B, T, d]`.
pub fn from_heads(tape: &mut Tape, x: TensorId) -> Result<TensorId, ComputeError> {
    let shape = tape.shape(x).to_vec();
    let (b, h, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let merged = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(merged, &[b, t, h * dh])
}
