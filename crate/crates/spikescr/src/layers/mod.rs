//! The spiking encoder stack: embedding, global-local encoder blocks, and the
//! softmax-over-time classification head.
//!
//! Every inter-layer tensor between the embedding output and the head input
//! is binary; floating-point values exist only inside sub-layers, between a
//! {Linear/Conv-BN} and the neuron that re-spikes it.

pub mod attention;
pub mod checkpoint;
pub mod common;
pub mod head;
pub mod sgc;
pub mod trace;

pub use attention::{rope_rotate, RotaryTable, SsaLayer};
pub use checkpoint::{load_model, save_model, CheckpointError};
pub use sgc::{SgcLayer, SguLayer};
pub use trace::{ForwardTrace, MonitorEntry};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{BnState, ComputeError, ParamStore, Tape, Tensor, TensorId};
use crate::neuron::{lif_sequence, NeuronConfig};
use common::{time_major, ConvBn};
use head::Head;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
}

/// How residual connections are folded back into the spike stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualStyle {
    /// Residual spikes are injected into the output neuron's input current,
    /// scaled by τ·V_th so that one residual spike alone reaches threshold in
    /// exactly one step: with zero sub-layer contribution the block is the
    /// identity on spikes.
    SpikeAdd,
    /// Residual adds pre-activation currents: the sub-layer output current
    /// plus the incoming current feed the output neuron.
    MembraneShortcut,
}

/// The (nL-m-d) architecture descriptor plus every sub-layer hyperparameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder block count (n in nL-m-d).
    pub n_blocks: usize,
    /// Attention heads (m).
    pub n_heads: usize,
    /// Model width d.
    pub hidden: usize,
    /// Input channels N.
    pub input_channels: usize,
    /// Class count Y.
    pub n_classes: usize,
    /// Embedding convolution kernel size (odd, same-padding).
    pub sem_kernel: usize,
    /// Number of stacked {Conv1D-BN-LIF} embedding stages.
    pub sem_depth: usize,
    /// Pointwise expansion factor of the gated convolution.
    pub sgc_expansion: usize,
    /// Depthwise kernel size of the gated convolution.
    pub sgc_kernel: usize,
    /// Attention product scale; `None` means 1/√(d/heads).
    pub attn_scale: Option<f32>,
    /// Apply BN to the scaled attention product before its neuron.
    pub attn_bn: bool,
    /// Merge heads through a {Linear-BN}-LIF projection.
    pub attn_proj: bool,
    pub residual_style: ResidualStyle,
    /// Rotary position base frequency.
    pub rope_base: f32,
    pub neuron: NeuronConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 1,
            n_heads: 8,
            hidden: 128,
            input_channels: 140,
            n_classes: 20,
            sem_kernel: 3,
            sem_depth: 2,
            sgc_expansion: 4,
            sgc_kernel: 31,
            attn_scale: None,
            attn_bn: false,
            attn_proj: true,
            residual_style: ResidualStyle::SpikeAdd,
            rope_base: 10000.0,
            neuron: NeuronConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Parse an `nL-m-d` descriptor, e.g. `1L-16-256`.
    pub fn from_descriptor(
        desc: &str,
        input_channels: usize,
        n_classes: usize,
    ) -> Result<Self, ConfigError> {
        let parts: Vec<&str> = desc.split('-').collect();
        let bad = || ConfigError::Invalid(format!("descriptor `{desc}` is not of the form nL-m-d"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n_blocks: usize = parts[0]
            .strip_suffix(['L', 'l'])
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        let n_heads: usize = parts[1].parse().map_err(|_| bad())?;
        let hidden: usize = parts[2].parse().map_err(|_| bad())?;
        let cfg = Self {
            n_blocks,
            n_heads,
            hidden,
            input_channels,
            n_classes,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n_blocks < 1 {
            return fail("n_blocks must be ≥ 1".into());
        }
        if self.hidden == 0 || self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return fail(format!(
                "hidden {} must be divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if (self.hidden / self.n_heads) % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even for rotary pairs",
                self.hidden / self.n_heads
            ));
        }
        if self.sem_kernel % 2 == 0 || self.sem_kernel == 0 {
            return fail(format!("sem_kernel {} must be odd", self.sem_kernel));
        }
        if self.sgc_kernel % 2 == 0 || self.sgc_kernel == 0 {
            return fail(format!("sgc_kernel {} must be odd", self.sgc_kernel));
        }
        if self.sem_depth < 1 {
            return fail("sem_depth must be ≥ 1".into());
        }
        if self.sgc_expansion < 1 || (self.hidden * self.sgc_expansion) % 2 != 0 {
            return fail(format!(
                "sgc_expansion {} must expand to an even width",
                self.sgc_expansion
            ));
        }
        if self.input_channels == 0 || self.n_classes < 2 {
            return fail("need ≥ 1 input channel and ≥ 2 classes".into());
        }
        self.neuron
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Variant with every neuron softened for gradient checks.
    pub fn softened(mut self) -> Self {
        self.neuron = self.neuron.softened();
        self
    }
}

/// Spiking embedding: stacked {Conv1D-BN-LIF} stages mixing N into d.
struct Sem {
    convs: Vec<ConvBn>,
    neuron: NeuronConfig,
}

impl Sem {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let mut convs = Vec::new();
        for i in 0..cfg.sem_depth {
            let c_in = if i == 0 { cfg.input_channels } else { cfg.hidden };
            convs.push(ConvBn::new(
                store,
                rng,
                &format!("sem.conv{}", i + 1),
                c_in,
                cfg.hidden,
                cfg.sem_kernel,
                cfg.sem_kernel / 2,
                1,
            ));
        }
        Self { convs, neuron: cfg.neuron }
    }

    /// `x[B, T, N] -> (spikes[B, T, d], final pre-activation)`.
    fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
        training: bool,
        trace: &mut ForwardTrace,
    ) -> Result<(TensorId, TensorId), ComputeError> {
        let mut spikes = x;
        let mut pre = x;
        for (i, conv) in self.convs.iter_mut().enumerate() {
            let xc = time_major(tape, spikes)?;
            let h = conv.forward(tape, store, xc, training)?;
            pre = time_major(tape, h)?;
            spikes = lif_sequence(tape, pre, &self.neuron)?;
            trace.record(tape, format!("sem.sn{}", i + 1), spikes);
        }
        Ok((spikes, pre))
    }
}

/// One encoder block: attention sub-layer plus gated-convolution sub-layer,
/// each wrapped in a residual that re-spikes through the output neuron.
pub(crate) struct SgleBlock {
    ssa: SsaLayer,
    pub(crate) sgc: SgcLayer,
    neuron: NeuronConfig,
    residual: ResidualStyle,
}

/// Spike stream plus the pre-activation current that produced it.
#[derive(Clone, Copy)]
struct StreamState {
    spikes: TensorId,
    pre: TensorId,
}

impl SgleBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig, idx: usize) -> Self {
        Self {
            ssa: SsaLayer::new(store, rng, &format!("blk{idx}.ssa"), cfg),
            sgc: SgcLayer::new(store, rng, &format!("blk{idx}.sgc"), cfg),
            neuron: cfg.neuron,
            residual: cfg.residual_style,
        }
    }

    fn residual_spike(
        &self,
        tape: &mut Tape,
        sub_pre: TensorId,
        input: StreamState,
    ) -> Result<StreamState, ComputeError> {
        let current = match self.residual {
            ResidualStyle::SpikeAdd => {
                // One residual spike must reach threshold from rest in one
                // step: H = (c·s)/τ ≥ V_th requires c = τ·V_th.
                let c = self.neuron.tau * self.neuron.v_threshold;
                let boosted = tape.scale(input.spikes, c);
                tape.add(sub_pre, boosted)?
            }
            ResidualStyle::MembraneShortcut => tape.add(sub_pre, input.pre)?,
        };
        let spikes = lif_sequence(tape, current, &self.neuron)?;
        Ok(StreamState { spikes, pre: current })
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        input: StreamState,
        training: bool,
        trace: &mut ForwardTrace,
        idx: usize,
    ) -> Result<StreamState, ComputeError> {
        let p1 = self.ssa.forward(
            tape,
            store,
            input.spikes,
            training,
            trace,
            &format!("blk{idx}.ssa"),
        )?;
        let mid = self.residual_spike(tape, p1, input)?;
        trace.record(tape, format!("blk{idx}.ssa.out"), mid.spikes);
        let p2 = self.sgc.forward(
            tape,
            store,
            mid.spikes,
            training,
            trace,
            &format!("blk{idx}.sgc"),
        )?;
        let out = self.residual_spike(tape, p2, mid)?;
        trace.record(tape, format!("blk{idx}.sgc.out"), out.spikes);
        Ok(out)
    }
}

/// Everything the head produced for one batch.
pub struct ForwardOutput {
    /// Per-step synaptic potentials `[B, T, Y]`.
    pub potentials: TensorId,
    /// Per-step class probabilities `[B, T, Y]`.
    pub per_step: TensorId,
    /// Time-summed output ŷ `[B, Y]`.
    pub y_hat: TensorId,
    /// Monitored spike tensors of this pass.
    pub trace: ForwardTrace,
}

/// The full spiking classifier.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    sem: Sem,
    pub(crate) blocks: Vec<SgleBlock>,
    head: Head,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sem = Sem::new(&mut store, &mut rng, &cfg);
        let blocks = (0..cfg.n_blocks)
            .map(|i| SgleBlock::new(&mut store, &mut rng, &cfg, i))
            .collect();
        let head = Head::new(&mut store, &mut rng, "head", cfg.hidden, cfg.n_classes);
        Ok(Self { cfg, store, sem, blocks, head })
    }

    /// Total learnable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Forward on raw input `[B, T, N]` (spike counts or spectrogram frames).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        training: bool,
    ) -> Result<ForwardOutput, ComputeError> {
        let shape = x.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.input_channels {
            return Err(ComputeError::ShapeMismatch {
                op: "model_forward",
                left: shape,
                right: vec![self.cfg.input_channels],
            });
        }
        let mut trace = ForwardTrace::new();
        let xid = tape.constant(x.clone());
        trace.record_aux(tape, "input".into(), xid);
        let (spikes, pre) = self.sem.forward(tape, &self.store, xid, training, &mut trace)?;
        let mut stream = StreamState { spikes, pre };
        for (i, block) in self.blocks.iter_mut().enumerate() {
            stream = block.forward(tape, &self.store, stream, training, &mut trace, i)?;
        }
        let (potentials, per_step, y_hat) = self.head.forward(tape, &self.store, stream.spikes)?;
        Ok(ForwardOutput { potentials, per_step, y_hat, trace })
    }

    /// All BN sites by name, for checkpointing and freezing.
    pub fn bn_states(&mut self) -> Vec<(String, &mut BnState)> {
        let mut out = Vec::new();
        for (i, conv) in self.sem.convs.iter_mut().enumerate() {
            out.push((format!("sem.conv{}.bn", i + 1), &mut conv.bn));
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.extend(block.ssa.bn_states(&format!("blk{i}.ssa")));
            let sgc_name = format!("blk{i}.sgc");
            out.extend(block.sgc.bn_states(&sgc_name));
        }
        out
    }

    /// Copy parameters and BN buffers from a congruent model.
    pub fn copy_state_from(&mut self, src: &mut Model) {
        self.store.copy_values_from(&src.store);
        let mut dst_bn = self.bn_states();
        let src_bn = src.bn_states();
        assert_eq!(dst_bn.len(), src_bn.len(), "BN site mismatch");
        for ((dn, d), (sn, s)) in dst_bn.iter_mut().zip(src_bn) {
            assert_eq!(*dn, sn, "BN name mismatch");
            d.running_mean = s.running_mean.clone();
            d.running_var = s.running_var.clone();
        }
    }
}
