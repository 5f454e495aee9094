//! Separable gated convolution: pointwise expansion, depthwise mixing, and a
//! spiking gated unit controlling the contracting pointwise stage.

use rand_chacha::ChaCha8Rng;

use super::common::{time_major, ConvBn, LinearBn};
use super::trace::ForwardTrace;
use super::ModelConfig;
use crate::compute::{BnState, ComputeError, ParamStore, Tape, TensorId};
use crate::neuron::{lif_sequence, NeuronConfig};

/// Spiking gated unit: `x2 ⊙ SN₂(W(SN₁(x1)))`.
///
/// Both the gate and `x2` are binary, so the product is a binary elementwise
/// AND — an accumulate-only selection of `x2`.
pub struct SguLayer {
    w: LinearBn,
    neuron: NeuronConfig,
}

impl SguLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        neuron: NeuronConfig,
    ) -> Self {
        Self {
            w: LinearBn::new(store, rng, &format!("{name}.w"), width, width),
            neuron,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x1: TensorId,
        x2: TensorId,
        training: bool,
        trace: &mut ForwardTrace,
        name: &str,
    ) -> Result<TensorId, ComputeError> {
        if tape.shape(x1) != tape.shape(x2) {
            return Err(ComputeError::ShapeMismatch {
                op: "sgu",
                left: tape.shape(x1).to_vec(),
                right: tape.shape(x2).to_vec(),
            });
        }
        let s1 = lif_sequence(tape, x1, &self.neuron)?;
        trace.record(tape, format!("{name}.sn1"), s1);
        let h = self.w.forward(tape, store, s1, training)?;
        let gate = lif_sequence(tape, h, &self.neuron)?;
        trace.record(tape, format!("{name}.gate"), gate);
        let gated = tape.mul(x2, gate)?;
        trace.record(tape, format!("{name}.gated"), gated);
        Ok(gated)
    }

    pub fn bn_states(&mut self, name: &str) -> Vec<(String, &mut BnState)> {
        vec![(format!("{name}.w.bn"), &mut self.w.bn)]
    }
}

/// Separable gated convolution sub-layer.
pub struct SgcLayer {
    pub(crate) pw: ConvBn,
    pub(crate) dw: ConvBn,
    pub(crate) sgu: SguLayer,
    pub(crate) pwg: ConvBn,
    neuron: NeuronConfig,
    expanded: usize,
}

impl SgcLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let d = cfg.hidden;
        let expanded = d * cfg.sgc_expansion;
        let half = expanded / 2;
        let k = cfg.sgc_kernel;
        Self {
            pw: ConvBn::new(store, rng, &format!("{name}.pw"), d, expanded, 1, 0, 1),
            dw: ConvBn::new(
                store,
                rng,
                &format!("{name}.dw"),
                expanded,
                expanded,
                k,
                k / 2,
                expanded,
            ),
            sgu: SguLayer::new(store, rng, &format!("{name}.sgu"), half, cfg.neuron),
            pwg: ConvBn::new(store, rng, &format!("{name}.pwg"), half, d, 1, 0, 1),
            neuron: cfg.neuron,
            expanded,
        }
    }

    /// Runs the sub-layer up to the output neuron's input current; the caller
    /// adds the residual and spikes.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
        training: bool,
        trace: &mut ForwardTrace,
        name: &str,
    ) -> Result<TensorId, ComputeError> {
        if tape.shape(x)[1] < 1 {
            return Err(ComputeError::InvalidGeometry {
                op: "sgc",
                detail: "T must be ≥ 1".into(),
            });
        }
        // Pointwise expansion.
        let xc = time_major(tape, x)?;
        let h = self.pw.forward(tape, store, xc, training)?;
        let h = time_major(tape, h)?;
        let s_pw = lif_sequence(tape, h, &self.neuron)?;
        trace.record(tape, format!("{name}.sn_pw"), s_pw);

        // Depthwise temporal mixing.
        let hc = time_major(tape, s_pw)?;
        let h = self.dw.forward(tape, store, hc, training)?;
        let h = time_major(tape, h)?;
        let s_dw = lif_sequence(tape, h, &self.neuron)?;
        trace.record(tape, format!("{name}.sn_dw"), s_dw);

        // Gated contraction: split channels, gate one half with the other.
        let half = self.expanded / 2;
        let x1 = tape.narrow(s_dw, 2, 0, half)?;
        let x2 = tape.narrow(s_dw, 2, half, half)?;
        let sgu_name = name.replace(".sgc", ".sgu");
        let gated = self
            .sgu
            .forward(tape, store, x1, x2, training, trace, &sgu_name)?;
        let gc = time_major(tape, gated)?;
        let h = self.pwg.forward(tape, store, gc, training)?;
        time_major(tape, h)
    }

    pub fn bn_states(&mut self, name: &str) -> Vec<(String, &mut BnState)> {
        let sgu_name = name.replace(".sgc", ".sgu");
        let mut out = vec![
            (format!("{name}.pw.bn"), &mut self.pw.bn),
            (format!("{name}.dw.bn"), &mut self.dw.bn),
            (format!("{name}.pwg.bn"), &mut self.pwg.bn),
        ];
        out.extend(self.sgu.bn_states(&sgu_name));
        out
    }
}
