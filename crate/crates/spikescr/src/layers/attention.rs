//! Spiking self-attention with rotary position encoding.
//!
//! Q, K, V come from per-branch {Linear-BN-LIF}. Rotary rotations are applied
//! to Q and K, which are then re-spiked by dedicated neurons so the attention
//! products stay products of binary matrices: integer accumulations scaled by
//! a factor before the output neuron.

use rand_chacha::ChaCha8Rng;

use super::common::{from_heads, to_heads, LinearBn};
use super::trace::ForwardTrace;
use super::ModelConfig;
use crate::compute::{BnState, ComputeError, ParamId, ParamStore, Tape, Tensor, TensorId};
use crate::neuron::{lif_sequence, NeuronConfig};

/// Per-position, per-pair rotation table.
///
/// Position 0 is the identity rotation, and every 2-pair rotation preserves
/// the Euclidean norm of the pair.
#[derive(Clone, Debug)]
pub struct RotaryTable {
    cos: Vec<f32>,
    sin: Vec<f32>,
    positions: usize,
    pairs: usize,
    base: f32,
}

impl RotaryTable {
    /// Build a table for `positions` steps of `head_dim`-wide heads.
    pub fn new(positions: usize, head_dim: usize, base: f32) -> Result<Self, ComputeError> {
        if head_dim % 2 != 0 {
            return Err(ComputeError::InvalidGeometry {
                op: "rotary_table",
                detail: format!("head dimension {head_dim} must be even"),
            });
        }
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * pairs);
        let mut sin = Vec::with_capacity(positions * pairs);
        for t in 0..positions {
            for i in 0..pairs {
                let theta = Self::angle(t as f64, i, pairs, base);
                cos.push(theta.cos() as f32);
                sin.push(theta.sin() as f32);
            }
        }
        Ok(Self { cos, sin, positions, pairs, base })
    }

    fn angle(position: f64, pair: usize, pairs: usize, base: f32) -> f64 {
        let exponent = -(2.0 * pair as f64) / (2.0 * pairs as f64);
        position * (base as f64).powf(exponent)
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn head_dim(&self) -> usize {
        self.pairs * 2
    }

    fn cos_sin(&self, t: usize, pair: usize) -> (f32, f32) {
        let idx = t * self.pairs + pair;
        (self.cos[idx], self.sin[idx])
    }

    /// Rotate a single head vector at a (possibly negative) position.
    pub fn rotate_vector_signed(&self, v: &[f32], position: i64) -> Vec<f32> {
        assert_eq!(v.len(), self.head_dim());
        let mut out = vec![0.0f32; v.len()];
        for i in 0..self.pairs {
            let theta = Self::angle(position as f64, i, self.pairs, self.base);
            let (c, s) = (theta.cos() as f32, theta.sin() as f32);
            let (x0, x1) = (v[2 * i], v[2 * i + 1]);
            out[2 * i] = x0 * c - x1 * s;
            out[2 * i + 1] = x0 * s + x1 * c;
        }
        out
    }
}

/// Rotate adjacent pairs of `x[B, heads, T, d_h]` by their position angles.
pub fn rope_rotate(
    tape: &mut Tape,
    x: TensorId,
    table: &RotaryTable,
) -> Result<TensorId, ComputeError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(ComputeError::InvalidGeometry {
            op: "rope_rotate",
            detail: format!("expected [B, heads, T, d_h], got {shape:?}"),
        });
    }
    let (b, h, t_steps, dh) = (shape[0], shape[1], shape[2], shape[3]);
    if dh != table.head_dim() || t_steps > table.positions() {
        return Err(ComputeError::InvalidGeometry {
            op: "rope_rotate",
            detail: format!(
                "table covers {} positions of width {}, input is {t_steps} of {dh}",
                table.positions(),
                table.head_dim()
            ),
        });
    }
    let pairs = table.pairs;
    let xv = tape.value(x);
    let mut out = vec![0.0f32; xv.len()];
    for panel in 0..b * h {
        for t in 0..t_steps {
            let base = (panel * t_steps + t) * dh;
            for i in 0..pairs {
                let (c, s) = table.cos_sin(t, i);
                let x0 = xv.data()[base + 2 * i];
                let x1 = xv.data()[base + 2 * i + 1];
                out[base + 2 * i] = x0 * c - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    let value = Tensor::new(shape, out).expect("sized");
    let table = table.clone();
    Ok(tape.custom(&[x], value, move |g, _o, _ps| {
        // The inverse rotation (by −θ) is the transpose, so the backward
        // rotates the gradient the other way.
        let mut gx = Tensor::zeros(g.shape());
        let gd = gx.data_mut();
        for panel in 0..b * h {
            for t in 0..t_steps {
                let base = (panel * t_steps + t) * dh;
                for i in 0..pairs {
                    let (c, s) = table.cos_sin(t, i);
                    let g0 = g.data()[base + 2 * i];
                    let g1 = g.data()[base + 2 * i + 1];
                    gd[base + 2 * i] = g0 * c + g1 * s;
                    gd[base + 2 * i + 1] = -g0 * s + g1 * c;
                }
            }
        }
        vec![gx]
    }))
}

/// Per-head product (Q'·K'ᵀ)·V of spike tensors shaped `[B, T, d]`.
///
/// Returns `(scores [B,heads,T,T], merged [B,T,d])`. With binary operands
/// both products are non-negative integer accumulations.
pub fn attention_product(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
) -> Result<(TensorId, TensorId), ComputeError> {
    let qh = to_heads(tape, q, heads)?;
    let kh = to_heads(tape, k, heads)?;
    let vh = to_heads(tape, v, heads)?;
    let kt = tape.permute(kh, &[0, 1, 3, 2])?;
    let scores = tape.matmul(qh, kt)?;
    let mixed = tape.matmul(scores, vh)?;
    let merged = from_heads(tape, mixed)?;
    Ok((scores, merged))
}

/// One spiking self-attention sub-layer.
pub struct SsaLayer {
    wq: LinearBn,
    wk: LinearBn,
    wv: LinearBn,
    proj: Option<LinearBn>,
    attn_bn: Option<(ParamId, ParamId, BnState)>,
    neuron: NeuronConfig,
    heads: usize,
    scale: f32,
    rope_base: f32,
}

impl SsaLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let d = cfg.hidden;
        let dh = d / cfg.n_heads;
        let scale = cfg.attn_scale.unwrap_or(1.0 / (dh as f32).sqrt());
        let attn_bn = cfg.attn_bn.then(|| {
            let gamma = store.add(format!("{name}.attn_bn.gamma"), Tensor::full(&[d], 1.0));
            let beta = store.add(format!("{name}.attn_bn.beta"), Tensor::zeros(&[d]));
            (gamma, beta, BnState::new(d))
        });
        Self {
            wq: LinearBn::new(store, rng, &format!("{name}.wq"), d, d),
            wk: LinearBn::new(store, rng, &format!("{name}.wk"), d, d),
            wv: LinearBn::new(store, rng, &format!("{name}.wv"), d, d),
            proj: cfg
                .attn_proj
                .then(|| LinearBn::new(store, rng, &format!("{name}.proj"), d, d)),
            attn_bn,
            neuron: cfg.neuron,
            heads: cfg.n_heads,
            scale,
            rope_base: cfg.rope_base,
        }
    }

    /// Runs the sub-layer up to the output neuron's input current.
    ///
    /// The caller adds the residual and spikes, so the returned tensor is the
    /// pre-activation of the block's output neuron.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
        training: bool,
        trace: &mut ForwardTrace,
        name: &str,
    ) -> Result<TensorId, ComputeError> {
        let shape = tape.shape(x).to_vec();
        let (_b, t_steps, d) = (shape[0], shape[1], shape[2]);
        let dh = d / self.heads;
        let table = RotaryTable::new(t_steps, dh, self.rope_base)?;

        let q_pre = self.wq.forward(tape, store, x, training)?;
        let q = lif_sequence(tape, q_pre, &self.neuron)?;
        trace.record(tape, format!("{name}.sn_q"), q);
        let k_pre = self.wk.forward(tape, store, x, training)?;
        let k = lif_sequence(tape, k_pre, &self.neuron)?;
        trace.record(tape, format!("{name}.sn_k"), k);
        let v_pre = self.wv.forward(tape, store, x, training)?;
        let v = lif_sequence(tape, v_pre, &self.neuron)?;
        trace.record(tape, format!("{name}.sn_v"), v);

        // Rotate, then re-spike through dedicated neurons.
        let qh = to_heads(tape, q, self.heads)?;
        let q_rot = rope_rotate(tape, qh, &table)?;
        let q_rot = from_heads(tape, q_rot)?;
        let q_rot = lif_sequence(tape, q_rot, &self.neuron)?;
        trace.record(tape, format!("{name}.sn_rq"), q_rot);
        let kh = to_heads(tape, k, self.heads)?;
        let k_rot = rope_rotate(tape, kh, &table)?;
        let k_rot = from_heads(tape, k_rot)?;
        let k_rot = lif_sequence(tape, k_rot, &self.neuron)?;
        trace.record(tape, format!("{name}.sn_rk"), k_rot);

        // Integer-valued attention products of binary operands.
        let (scores, product) = attention_product(tape, q_rot, k_rot, v, self.heads)?;
        trace.record_aux(tape, format!("{name}.scores"), scores);
        let merged = tape.scale(product, self.scale);
        let merged = match &mut self.attn_bn {
            Some((gamma, beta, bn)) => {
                let g = tape.param(store, *gamma);
                let b = tape.param(store, *beta);
                tape.batchnorm(merged, g, b, bn, 2, training)?
            }
            None => merged,
        };
        match &mut self.proj {
            Some(proj) => {
                let attn = lif_sequence(tape, merged, &self.neuron)?;
                trace.record(tape, format!("{name}.sn_attn"), attn);
                proj.forward(tape, store, attn, training)
            }
            // Without a merge projection the block's output neuron is the
            // post-product one; hand its input current to the caller.
            None => Ok(merged),
        }
    }

    /// BN sites of this layer, for checkpointing.
    pub fn bn_states(&mut self, name: &str) -> Vec<(String, &mut BnState)> {
        let mut out = vec![
            (format!("{name}.wq.bn"), &mut self.wq.bn),
            (format!("{name}.wk.bn"), &mut self.wk.bn),
            (format!("{name}.wv.bn"), &mut self.wv.bn),
        ];
        if let Some(proj) = &mut self.proj {
            out.push((format!("{name}.proj.bn"), &mut proj.bn));
        }
        if let Some((_, _, bn)) = &mut self.attn_bn {
            out.push((format!("{name}.attn_bn"), bn));
        }
        out
    }
}
