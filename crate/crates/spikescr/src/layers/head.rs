//! Classification head: linear synaptic potentials read per step, softmaxed
//! over classes, and summed over time.

use rand_chacha::ChaCha8Rng;

use crate::compute::{ComputeError, ParamId, ParamStore, Tape, TensorId};

pub struct Head {
    w: ParamId,
    b: ParamId,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        hidden: usize,
        classes: usize,
    ) -> Self {
        Self {
            w: store.add_fan_in(format!("{name}.w"), &[hidden, classes], hidden, rng),
            b: store.add(
                format!("{name}.b"),
                crate::compute::Tensor::zeros(&[classes]),
            ),
        }
    }

    /// `(per-step potentials [B,T,Y], per-step softmax [B,T,Y], ŷ [B,Y])`.
    ///
    /// The head reads potentials — no spiking, no reset. ŷ_i sums the
    /// per-step class probabilities, so Σ_i ŷ_i = T.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId), ComputeError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let potentials = tape.matmul(x, w)?;
        let potentials = tape.add_bias(potentials, b)?;
        let per_step = tape.softmax(potentials, 2)?;
        let y_hat = tape.sum_axis(per_step, 1)?;
        Ok((potentials, per_step, y_hat))
    }
}

/// Aggregate given per-step potentials: softmax over classes, sum over time.
///
/// Standalone path for analytic checks on hand-set potentials.
pub fn aggregate_potentials(
    tape: &mut Tape,
    potentials: TensorId,
) -> Result<(TensorId, TensorId), ComputeError> {
    let per_step = tape.softmax(potentials, 2)?;
    let y_hat = tape.sum_axis(per_step, 1)?;
    Ok((per_step, y_hat))
}
