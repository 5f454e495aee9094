//! Leaky integrate-and-fire dynamics with a surrogate-gradient backward path.
//!
//! The membrane update, spike generation, and hard reset are
//!
//! ```text
//! H[t] = V[t-1] + (X[t] - (V[t-1] - V_reset)) / τ
//! S[t] = Θ(H[t] - V_th)          Θ(v) = 1 iff v ≥ 0
//! V[t] = H[t]·(1 - S[t]) + V_reset·S[t]
//! ```
//!
//! [`lif_step`] composes the update from tape primitives; [`lif_sequence`]
//! runs the whole time axis as one fused node with a hand-written
//! backpropagation-through-time rule, which is what every layer uses.

use thiserror::Error;

use crate::compute::tape::surrogate_derivative;
use crate::compute::{ComputeError, Tape, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum NeuronError {
    #[error("invalid neuron config: {0}")]
    InvalidConfig(String),
}

/// LIF parameters shared by every neuron of a layer.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronConfig {
    /// Membrane time constant τ (dimensionless).
    pub tau: f32,
    /// Firing threshold V_th.
    pub v_threshold: f32,
    /// Reset potential V_reset; also the initial state.
    pub v_reset: f32,
    /// Sharpness α of the arctangent surrogate.
    pub surrogate_alpha: f32,
    /// Treat the reset term as a constant in the backward pass.
    pub detach_reset: bool,
    /// Replace Θ by its smooth surrogate primitive in the forward pass.
    /// Exists solely so finite-difference gradient checks are meaningful;
    /// never used for reported training.
    pub soft: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_threshold: 1.0,
            v_reset: 0.0,
            surrogate_alpha: 5.0,
            detach_reset: true,
            soft: false,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(self.tau >= 1.0) {
            return Err(NeuronError::InvalidConfig(format!(
                "tau must be ≥ 1, got {}",
                self.tau
            )));
        }
        if !(self.v_threshold > self.v_reset) {
            return Err(NeuronError::InvalidConfig(format!(
                "v_threshold {} must exceed v_reset {}",
                self.v_threshold, self.v_reset
            )));
        }
        Ok(())
    }

    /// Differentiable stand-in used by gradient checks.
    pub fn softened(mut self) -> Self {
        self.soft = true;
        self.detach_reset = false;
        self
    }

    fn spike_value(&self, h: f32) -> f32 {
        let x = h - self.v_threshold;
        if self.soft {
            0.5 + (std::f32::consts::PI * self.surrogate_alpha * x / 2.0).atan()
                / std::f32::consts::PI
        } else if x >= 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Potentials and spikes of one step: H (pre-reset), V (post-reset), S.
#[derive(Clone, Debug)]
pub struct MembraneState {
    pub h: Tensor,
    pub v: Tensor,
    pub s: Tensor,
}

/// One LIF step on plain tensors (no differentiation).
pub fn lif_step_values(
    x_t: &Tensor,
    v_prev: &Tensor,
    cfg: &NeuronConfig,
) -> Result<MembraneState, ComputeError> {
    if x_t.shape() != v_prev.shape() {
        return Err(ComputeError::ShapeMismatch {
            op: "lif_step",
            left: x_t.shape().to_vec(),
            right: v_prev.shape().to_vec(),
        });
    }
    // Same association as the tape paths so all three agree bit-exactly:
    // h = v·(1-1/τ) + (x·(1/τ) + V_reset·(1/τ)).
    let inv_tau = 1.0 / cfg.tau;
    let decay = 1.0 - inv_tau;
    let vr_drive = cfg.v_reset * inv_tau;
    let h = x_t.zip(v_prev, |x, v| v * decay + (x * inv_tau + vr_drive))?;
    let s = h.map(|hv| cfg.spike_value(hv));
    let v = h.zip(&s, |hv, sv| hv * (1.0 - sv) + cfg.v_reset * sv)?;
    Ok(MembraneState { h, v, s })
}

/// One differentiable LIF step composed from tape primitives.
///
/// Returns `(spikes, membrane)`. The surrogate derivative stands in for Θ';
/// with `detach_reset` the reset multiplication is constant in the backward.
pub fn lif_step(
    tape: &mut Tape,
    x_t: TensorId,
    v_prev: TensorId,
    cfg: &NeuronConfig,
) -> Result<(TensorId, TensorId), ComputeError> {
    if tape.shape(x_t) != tape.shape(v_prev) {
        return Err(ComputeError::ShapeMismatch {
            op: "lif_step",
            left: tape.shape(x_t).to_vec(),
            right: tape.shape(v_prev).to_vec(),
        });
    }
    let inv_tau = 1.0 / cfg.tau;
    let decayed = tape.scale(v_prev, 1.0 - inv_tau);
    let driven = tape.scale(x_t, inv_tau);
    let driven = tape.add_scalar(driven, cfg.v_reset * inv_tau);
    let h = tape.add(decayed, driven)?;
    let centered = tape.add_scalar(h, -cfg.v_threshold);
    let s = tape.spike(centered, cfg.surrogate_alpha, cfg.soft);
    let s_reset = if cfg.detach_reset { tape.detach(s) } else { s };
    let neg = tape.scale(s_reset, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let kept = tape.mul(h, one_minus)?;
    let reset_part = tape.scale(s_reset, cfg.v_reset);
    let v = tape.add(kept, reset_part)?;
    Ok((s, v))
}

/// LIF over the time axis of `x[B, T, C]` as one fused tape node.
///
/// State starts at V_reset and threads through the sequence, so gradients
/// flow through time. Output spikes share the input shape.
pub fn lif_sequence(
    tape: &mut Tape,
    x: TensorId,
    cfg: &NeuronConfig,
) -> Result<TensorId, ComputeError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(ComputeError::InvalidGeometry {
            op: "lif_sequence",
            detail: format!("expected [B, T, C], got {shape:?}"),
        });
    }
    let (b, t_steps, c) = (shape[0], shape[1], shape[2]);
    if t_steps < 1 {
        return Err(ComputeError::InvalidGeometry {
            op: "lif_sequence",
            detail: "T must be ≥ 1".into(),
        });
    }

    let xv = tape.value(x);
    let mut h_buf = vec![0.0f32; xv.len()];
    let mut s_buf = vec![0.0f32; xv.len()];
    let mut v_state = vec![cfg.v_reset; b * c];
    let inv_tau = 1.0 / cfg.tau;
    let decay = 1.0 - inv_tau;
    let vr_drive = cfg.v_reset * inv_tau;
    for bi in 0..b {
        let vrow = &mut v_state[bi * c..(bi + 1) * c];
        for t in 0..t_steps {
            let base = (bi * t_steps + t) * c;
            let xrow = &xv.data()[base..base + c];
            let hrow = &mut h_buf[base..base + c];
            let srow = &mut s_buf[base..base + c];
            for j in 0..c {
                let h = vrow[j] * decay + (xrow[j] * inv_tau + vr_drive);
                let s = cfg.spike_value(h);
                vrow[j] = h * (1.0 - s) + cfg.v_reset * s;
                hrow[j] = h;
                srow[j] = s;
            }
        }
    }

    let spikes = Tensor::new(shape.clone(), s_buf).expect("sized");
    let h_saved = Tensor::new(shape.clone(), h_buf).expect("sized");
    let cfg = *cfg;
    let out = tape.custom(&[x], spikes, move |g, s_out, _parents| {
        // Reverse-time sweep: λ carries dL/dV_t into earlier steps.
        let mut gx = Tensor::zeros(g.shape());
        let gxd = gx.data_mut();
        let decay = 1.0 - 1.0 / cfg.tau;
        for bi in 0..b {
            let mut lambda = vec![0.0f32; c];
            for t in (0..t_steps).rev() {
                let base = (bi * t_steps + t) * c;
                for j in 0..c {
                    let h = h_saved.data()[base + j];
                    let s = s_out.data()[base + j];
                    let mut ds = g.data()[base + j];
                    if !cfg.detach_reset {
                        ds += lambda[j] * (cfg.v_reset - h);
                    }
                    let phi = surrogate_derivative(h - cfg.v_threshold, cfg.surrogate_alpha);
                    let dh = ds * phi + lambda[j] * (1.0 - s);
                    gxd[base + j] = dh / cfg.tau;
                    lambda[j] = dh * decay;
                }
            }
        }
        vec![gx]
    });
    Ok(out)
}

/// Closed-form membrane trajectory under constant subthreshold input from
/// rest: V_t = V_reset + X·(1 − (1 − 1/τ)^t).
pub fn constant_input_trajectory(x: f64, cfg: &NeuronConfig, steps: usize) -> Vec<f64> {
    let decay = 1.0 - 1.0 / cfg.tau as f64;
    (1..=steps)
        .map(|t| cfg.v_reset as f64 + x * (1.0 - decay.powi(t as i32)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::fd_gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(NeuronConfig::default().validate().is_ok());
        assert!(NeuronConfig { tau: 0.5, ..Default::default() }.validate().is_err());
        assert!(NeuronConfig { v_threshold: 0.0, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn threshold_equality_fires() {
        // τ=2, V_reset=0, V_th=1, v_prev=0, x=2 → H=1.0, s=1, v=0
        let cfg = NeuronConfig::default();
        let st = lif_step_values(&t(&[1], &[2.0]), &t(&[1], &[0.0]), &cfg).unwrap();
        assert_eq!(st.h.data(), &[1.0]);
        assert_eq!(st.s.data(), &[1.0]);
        assert_eq!(st.v.data(), &[0.0]);
    }

    #[test]
    fn resting_neuron_stays_at_rest() {
        let cfg = NeuronConfig::default();
        let st = lif_step_values(&t(&[1], &[0.0]), &t(&[1], &[0.0]), &cfg).unwrap();
        assert_eq!(st.h.data(), &[0.0]);
        assert_eq!(st.s.data(), &[0.0]);
        assert_eq!(st.v.data(), &[0.0]);
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let cfg = NeuronConfig::default();
        assert!(lif_step_values(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), &cfg).is_err());
    }

    #[test]
    fn subthreshold_trajectory_matches_closed_form() {
        let cfg = NeuronConfig::default();
        let expect = constant_input_trajectory(0.6, &cfg, 50);
        let mut v = t(&[1], &[0.0]);
        for (t_idx, &e) in expect.iter().enumerate() {
            let st = lif_step_values(&t(&[1], &[0.6]), &v, &cfg).unwrap();
            assert_eq!(st.s.data()[0], 0.0, "fired at step {t_idx}");
            assert!(
                (st.v.data()[0] as f64 - e).abs() < 1e-6,
                "step {}: {} vs {}",
                t_idx,
                st.v.data()[0],
                e
            );
            v = st.v;
        }
    }

    #[test]
    fn reset_identity_holds_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = NeuronConfig::default();
        let x = Tensor::rand_uniform(&[32], -2.0, 3.0, &mut rng);
        let v_prev = Tensor::rand_uniform(&[32], -0.5, 0.9, &mut rng);
        let st = lif_step_values(&x, &v_prev, &cfg).unwrap();
        for j in 0..32 {
            let (h, s, v) = (st.h.data()[j], st.s.data()[j], st.v.data()[j]);
            assert!(s == 0.0 || s == 1.0);
            assert_eq!(v, h * (1.0 - s) + cfg.v_reset * s);
            if s == 1.0 {
                assert_eq!(v, cfg.v_reset);
            } else {
                assert_eq!(v, h);
            }
        }
    }

    #[test]
    fn sequence_of_one_step_reduces_to_lif_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = NeuronConfig::default();
        let x = Tensor::rand_uniform(&[2, 1, 4], -1.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let s = lif_sequence(&mut tape, xi, &cfg).unwrap();
        let flat = x.reshaped(&[2, 4]).unwrap();
        let rest = Tensor::full(&[2, 4], cfg.v_reset);
        let st = lif_step_values(&flat, &rest, &cfg).unwrap();
        assert_eq!(tape.value(s).data(), st.s.data());
    }

    #[test]
    fn strong_constant_drive_fires_every_step() {
        // x = 2·ones, τ=2: each step from rest reaches H=1 and fires.
        let cfg = NeuronConfig::default();
        let x = Tensor::full(&[1, 8, 3], 2.0);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let s = lif_sequence(&mut tape, xi, &cfg).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn spike_output_is_binary_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = NeuronConfig::default();
        let x = Tensor::rand_uniform(&[3, 7, 5], -2.0, 4.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let s = lif_sequence(&mut tape, xi, &cfg).unwrap();
        assert!(tape.value(s).is_binary());
        let total = tape.value(s).sum_f64();
        assert!(total <= (3 * 7 * 5) as f64);
    }

    #[test]
    fn one_step_monotone_in_input() {
        let cfg = NeuronConfig::default();
        let mut fired = false;
        for i in 0..200 {
            let x = -1.0 + i as f32 * 0.02;
            let st = lif_step_values(&t(&[1], &[x]), &t(&[1], &[0.0]), &cfg).unwrap();
            let s = st.s.data()[0];
            if fired {
                assert_eq!(s, 1.0, "spike turned off as input grew (x={x})");
            }
            fired = s == 1.0;
        }
        assert!(fired, "sweep never reached threshold");
    }

    #[test]
    fn fused_sequence_matches_composed_steps() {
        // Same values and same gradients, hard and soft mode.
        for cfg in [
            NeuronConfig::default(),
            NeuronConfig { detach_reset: false, ..Default::default() },
            NeuronConfig::default().softened(),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let (b, t_steps, c) = (2, 4, 3);
            let x = Tensor::rand_uniform(&[b, t_steps, c], -1.0, 3.0, &mut rng);
            let r = Tensor::rand_uniform(&[b, t_steps, c], 0.5, 1.5, &mut rng);

            // fused
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let s = lif_sequence(&mut tape, xi, &cfg).unwrap();
            let rc = tape.constant(r.clone());
            let weighted = tape.mul(s, rc).unwrap();
            let loss = tape.sum(weighted);
            let grads = tape.backward(loss);
            let fused_value = tape.value(s).clone();
            let fused_grad = grads.get(xi).unwrap().clone();

            // composed from lif_step
            let step_of = |src: &Tensor, t_idx: usize| -> Tensor {
                let mut out = Vec::with_capacity(b * c);
                for bi in 0..b {
                    let base = (bi * t_steps + t_idx) * c;
                    out.extend_from_slice(&src.data()[base..base + c]);
                }
                Tensor::new(vec![b, c], out).unwrap()
            };
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let mut v = tape.constant(Tensor::full(&[b, c], cfg.v_reset));
            let mut per_step_losses = Vec::new();
            for t_idx in 0..t_steps {
                let slice = tape.narrow(xi, 1, t_idx, 1).unwrap();
                let x_t = tape.reshape(slice, &[b, c]).unwrap();
                let (s_t, v_t) = lif_step(&mut tape, x_t, v, &cfg).unwrap();
                v = v_t;
                let r_t = tape.constant(step_of(&r, t_idx));
                let w = tape.mul(s_t, r_t).unwrap();
                per_step_losses.push(tape.sum(w));
                assert_eq!(
                    tape.value(s_t).data(),
                    step_of(&fused_value, t_idx).data(),
                    "step {t_idx} values"
                );
            }
            let mut loss = per_step_losses[0];
            for &l in &per_step_losses[1..] {
                loss = tape.add(loss, l).unwrap();
            }
            let grads = tape.backward(loss);
            let composed_grad = grads.get(xi).unwrap();
            for (a, b2) in fused_grad.data().iter().zip(composed_grad.data()) {
                assert!(
                    (a - b2).abs() < 1e-5,
                    "gradient mismatch {a} vs {b2} (cfg {cfg:?})"
                );
            }
        }
    }

    #[test]
    fn soft_mode_bptt_matches_finite_differences() {
        // 2-step, 4-neuron chain in soft mode.
        let cfg = NeuronConfig::default().softened();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[1, 2, 4], -0.5, 1.5, &mut rng);
        let r = Tensor::rand_uniform(&[1, 2, 4], 0.5, 1.5, &mut rng);
        let report = fd_gradient_check(
            "soft-mode lif bptt",
            &[x],
            move |tape, ids| {
                let s = lif_sequence(tape, ids[0], &cfg).unwrap();
                let rc = tape.constant(r.clone());
                let w = tape.mul(s, rc).unwrap();
                tape.sum(w)
            },
            1e-3,
            1e-3,
        );
        assert!(report.pass, "{}", report.json_line());
    }

    #[test]
    fn surrogate_shape() {
        assert!((surrogate_derivative(0.0, 5.0) - 2.5).abs() < 1e-7);
        assert!(surrogate_derivative(1e6, 5.0) < 1e-10);
        assert!(surrogate_derivative(-1e6, 5.0) < 1e-10);
        for x in [0.1f32, 0.7, 3.0] {
            assert_eq!(surrogate_derivative(x, 5.0), surrogate_derivative(-x, 5.0));
        }
    }
}
