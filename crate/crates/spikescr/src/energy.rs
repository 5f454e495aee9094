//! Synaptic-operation energy accounting.
//!
//! Every FLOP-bearing layer is billed as accumulate-only work gated by the
//! firing rate of the spiking layer feeding it: SOPs = fr · FLOPs. A model
//! with spike-form input costs E_AC per SOP throughout; a real-valued input
//! bills the first convolution at E_MAC per FLOP instead. BN sites fold into
//! their preceding linear operation and add nothing. The elementwise gate
//! product, neuron state updates, rotary rotations, and the attention scale
//! cost zero by default; a flag bills the float ops at MAC price instead.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::compute::Tensor;
use crate::data::DenseDataset;
use crate::layers::{Model, ModelConfig};
use crate::train::TrainError;

/// 45nm per-operation energies in picojoules.
pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

const PJ_TO_MJ: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("no firing rate recorded for input `{rate_key}` of layer `{layer}`")]
    MissingRate { layer: String, rate_key: String },
    #[error("event-count oracle requires binary input, found {value}")]
    NonBinaryInput { value: f32 },
}

/// Shapes of the supported FLOP-bearing layers.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDescriptor {
    Linear {
        in_features: usize,
        out_features: usize,
        tokens: usize,
    },
    Conv1d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        l_out: usize,
        groups: usize,
        batch: usize,
    },
    AttnProduct {
        batch: usize,
        heads: usize,
        t_steps: usize,
        head_dim: usize,
    },
    /// Elementwise float work (rotations, scaling) billed only on request.
    FloatOp { count: u64 },
}

/// Multiply-accumulate count of one layer.
pub fn count_flops(layer: &LayerDescriptor) -> u64 {
    match *layer {
        LayerDescriptor::Linear { in_features, out_features, tokens } => {
            (in_features * out_features * tokens) as u64
        }
        LayerDescriptor::Conv1d { c_in, c_out, kernel, l_out, groups, batch } => {
            (c_in / groups * c_out * kernel * l_out * batch) as u64
        }
        LayerDescriptor::AttnProduct { batch, heads, t_steps, head_dim } => {
            (batch * heads * t_steps * t_steps * head_dim) as u64
        }
        LayerDescriptor::FloatOp { count } => count,
    }
}

/// Which monitored spike tensor gates a layer's accumulates.
#[derive(Clone, Debug, Serialize)]
pub enum RateRef {
    One(String),
    /// Products of two spike operands use the mean of both rates.
    Mean(String, String),
    /// Always billed at full FLOPs (float work, when enabled).
    Dense,
}

/// One FLOP-bearing layer of the cost model.
#[derive(Clone, Debug, Serialize)]
pub struct CostItem {
    pub name: String,
    pub descriptor: LayerDescriptor,
    pub flops: u64,
    pub rate: RateRef,
    /// First layer: billed at E_MAC when the input is real-valued.
    pub first_layer: bool,
}

fn item(name: String, descriptor: LayerDescriptor, rate: RateRef, first_layer: bool) -> CostItem {
    let flops = count_flops(&descriptor);
    CostItem { name, descriptor, flops, rate, first_layer }
}

/// The cost model of a configuration at one batch size and resolution.
///
/// Rate keys name the monitors recorded by `Model::forward`; BN sites are
/// folded and contribute no items.
pub fn cost_items(cfg: &ModelConfig, batch: usize, t_steps: usize) -> Vec<CostItem> {
    cost_items_with_options(cfg, batch, t_steps, false)
}

pub fn cost_items_with_options(
    cfg: &ModelConfig,
    batch: usize,
    t_steps: usize,
    include_float_ops: bool,
) -> Vec<CostItem> {
    let d = cfg.hidden;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let expanded = d * cfg.sgc_expansion;
    let half = expanded / 2;
    let tokens = batch * t_steps;
    let mut items = Vec::new();

    for i in 0..cfg.sem_depth {
        let c_in = if i == 0 { cfg.input_channels } else { d };
        let rate_key = if i == 0 {
            "input".to_string()
        } else {
            format!("sem.sn{i}")
        };
        items.push(item(
            format!("sem.conv{}", i + 1),
            LayerDescriptor::Conv1d {
                c_in,
                c_out: d,
                kernel: cfg.sem_kernel,
                l_out: t_steps,
                groups: 1,
                batch,
            },
            RateRef::One(rate_key),
            i == 0,
        ));
    }

    let mut prev_out = format!("sem.sn{}", cfg.sem_depth);
    for b in 0..cfg.n_blocks {
        for branch in ["wq", "wk", "wv"] {
            items.push(item(
                format!("blk{b}.ssa.{branch}"),
                LayerDescriptor::Linear { in_features: d, out_features: d, tokens },
                RateRef::One(prev_out.clone()),
                false,
            ));
        }
        if include_float_ops {
            // Two rotary rotations (4 multiplies per pair) and the product
            // scaling, billed as dense float work.
            let rotation = (2 * tokens * d * 2) as u64;
            let scaling = (batch * heads * t_steps * dh) as u64;
            items.push(item(
                format!("blk{b}.ssa.float"),
                LayerDescriptor::FloatOp { count: rotation + scaling },
                RateRef::Dense,
                false,
            ));
        }
        items.push(item(
            format!("blk{b}.ssa.qk"),
            LayerDescriptor::AttnProduct { batch, heads, t_steps, head_dim: dh },
            RateRef::Mean(
                format!("blk{b}.ssa.sn_rq"),
                format!("blk{b}.ssa.sn_rk"),
            ),
            false,
        ));
        items.push(item(
            format!("blk{b}.ssa.av"),
            LayerDescriptor::AttnProduct { batch, heads, t_steps, head_dim: dh },
            RateRef::One(format!("blk{b}.ssa.sn_v")),
            false,
        ));
        if cfg.attn_proj {
            items.push(item(
                format!("blk{b}.ssa.proj"),
                LayerDescriptor::Linear { in_features: d, out_features: d, tokens },
                RateRef::One(format!("blk{b}.ssa.sn_attn")),
                false,
            ));
        }
        items.push(item(
            format!("blk{b}.sgc.pw"),
            LayerDescriptor::Conv1d {
                c_in: d,
                c_out: expanded,
                kernel: 1,
                l_out: t_steps,
                groups: 1,
                batch,
            },
            RateRef::One(format!("blk{b}.ssa.out")),
            false,
        ));
        items.push(item(
            format!("blk{b}.sgc.dw"),
            LayerDescriptor::Conv1d {
                c_in: expanded,
                c_out: expanded,
                kernel: cfg.sgc_kernel,
                l_out: t_steps,
                groups: expanded,
                batch,
            },
            RateRef::One(format!("blk{b}.sgc.sn_pw")),
            false,
        ));
        items.push(item(
            format!("blk{b}.sgu.w"),
            LayerDescriptor::Linear { in_features: half, out_features: half, tokens },
            RateRef::One(format!("blk{b}.sgu.sn1")),
            false,
        ));
        items.push(item(
            format!("blk{b}.sgc.pwg"),
            LayerDescriptor::Conv1d {
                c_in: half,
                c_out: d,
                kernel: 1,
                l_out: t_steps,
                groups: 1,
                batch,
            },
            RateRef::One(format!("blk{b}.sgu.gated")),
            false,
        ));
        prev_out = format!("blk{b}.sgc.out");
    }

    items.push(item(
        "head".to_string(),
        LayerDescriptor::Linear { in_features: d, out_features: cfg.n_classes, tokens },
        RateRef::One(prev_out),
        false,
    ));
    items
}

/// Exact activity ratio of one monitored site.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct RateStat {
    pub active: u64,
    pub total: u64,
}

impl RateStat {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.active as f64 / self.total as f64
        }
    }
}

/// Mean spike probability per monitored neuron layer over a dataset.
#[derive(Clone, Debug, Default, Serialize)]
pub struct FiringRateLog {
    pub rates: BTreeMap<String, RateStat>,
}

impl FiringRateLog {
    pub fn rate(&self, key: &str) -> Option<f64> {
        self.rates.get(key).map(|s| s.rate())
    }
}

/// Eval-mode pass over a dataset accumulating per-monitor activity.
pub fn measure_firing_rates(
    model: &mut Model,
    data: &DenseDataset,
    batch_size: usize,
) -> Result<FiringRateLog, TrainError> {
    let mut log = FiringRateLog::default();
    let all: Vec<usize> = (0..data.samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (t, n) = (data.t_steps, data.n_neurons);
        let mut x = Vec::with_capacity(chunk.len() * t * n);
        for &idx in chunk {
            x.extend_from_slice(&data.samples[idx].data);
        }
        let x = Tensor::new(vec![chunk.len(), t, n], x).expect("sized");
        let mut tape = crate::compute::Tape::new();
        let out = model.forward(&mut tape, &x, false)?;
        for e in &out.trace.entries {
            let slot = log.rates.entry(e.name.clone()).or_default();
            slot.active += e.active;
            slot.total += e.total;
        }
    }
    Ok(log)
}

/// Whether the model ingests spike counts or real-valued frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Spike,
    Real,
}

/// Per-operation energy constants in picojoules.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self { e_mac_pj: E_MAC_PJ, e_ac_pj: E_AC_PJ }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerEnergy {
    pub name: String,
    pub flops: u64,
    pub firing_rate: f64,
    pub sops: f64,
    /// True when billed at E_MAC (first layer of a real-valued model, or
    /// float work when enabled).
    pub mac_billed: bool,
    pub energy_mj: f64,
}

/// Full energy accounting of one profiled model.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    pub input_kind: InputKind,
    pub constants: EnergyConstants,
    pub layers: Vec<LayerEnergy>,
    pub total_flops: u64,
    pub total_sops: f64,
    pub e_mac_mj: f64,
    pub e_ac_mj: f64,
    pub e_total_mj: f64,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,flops,firing_rate,sops,mac_billed,energy_mj\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.name, l.flops, l.firing_rate, l.sops, l.mac_billed, l.energy_mj
            ));
        }
        out.push_str(&format!(
            "total,{},,{},,{}\n",
            self.total_flops, self.total_sops, self.e_total_mj
        ));
        out
    }
}

/// Assemble the energy report from a cost model and measured rates.
pub fn compute_energy(
    items: &[CostItem],
    rates: &FiringRateLog,
    input_kind: InputKind,
    constants: EnergyConstants,
) -> Result<EnergyReport, EnergyError> {
    let mut layers = Vec::with_capacity(items.len());
    let (mut e_mac_pj, mut e_ac_pj) = (0.0f64, 0.0f64);
    let (mut total_flops, mut total_sops) = (0u64, 0.0f64);
    for it in items {
        let missing = |key: &str| EnergyError::MissingRate {
            layer: it.name.clone(),
            rate_key: key.to_string(),
        };
        let fr = match &it.rate {
            RateRef::One(key) => rates.rate(key).ok_or_else(|| missing(key))?,
            RateRef::Mean(a, b) => {
                let ra = rates.rate(a).ok_or_else(|| missing(a))?;
                let rb = rates.rate(b).ok_or_else(|| missing(b))?;
                0.5 * (ra + rb)
            }
            RateRef::Dense => 1.0,
        };
        let sops = fr * it.flops as f64;
        let mac_billed = matches!(it.rate, RateRef::Dense)
            || (it.first_layer && input_kind == InputKind::Real);
        let energy_mj = if mac_billed {
            constants.e_mac_pj * it.flops as f64 * PJ_TO_MJ
        } else {
            constants.e_ac_pj * sops * PJ_TO_MJ
        };
        if mac_billed {
            e_mac_pj += constants.e_mac_pj * it.flops as f64;
        } else {
            e_ac_pj += constants.e_ac_pj * sops;
        }
        total_flops += it.flops;
        total_sops += sops;
        layers.push(LayerEnergy {
            name: it.name.clone(),
            flops: it.flops,
            firing_rate: fr,
            sops,
            mac_billed,
            energy_mj,
        });
    }
    Ok(EnergyReport {
        input_kind,
        constants,
        layers,
        total_flops,
        total_sops,
        e_mac_mj: e_mac_pj * PJ_TO_MJ,
        e_ac_mj: e_ac_pj * PJ_TO_MJ,
        e_total_mj: (e_mac_pj + e_ac_pj) * PJ_TO_MJ,
    })
}

/// Count the accumulates a linear layer actually performs on a binary batch:
/// every input spike fans out to every output feature.
///
/// For a linear layer this equals fr·FLOPs exactly as an integer identity.
pub fn event_count_oracle(spikes: &Tensor, out_features: usize) -> Result<u64, EnergyError> {
    let mut active = 0u64;
    for &v in spikes.data() {
        if v == 1.0 {
            active += 1;
        } else if v != 0.0 {
            return Err(EnergyError::NonBinaryInput { value: v });
        }
    }
    Ok(active * out_features as u64)
}
