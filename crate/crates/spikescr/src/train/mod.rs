//! Losses, optimizer, schedules, direct training, and the curriculum
//! knowledge-distillation loop.

pub mod direct;
pub mod kdcl;

pub use direct::{evaluate, train_direct, EvalReport, TrainOptions};
pub use kdcl::{kdcl_run, KdclOutcome, StageReport};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{ComputeError, ParamStore, Tape, Tensor, TensorId};
use crate::data::DataError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: u32, loss: f32 },
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config error: {0}")]
    Config(String),
}

/// Distillation temperature, loss weights, and warmup.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Softening temperature τ of both probability distributions.
    pub temperature: f32,
    /// Cross-entropy weight λ1.
    pub lambda1: f32,
    /// Distillation weight λ2.
    pub lambda2: f32,
    /// Epochs over which λ2 ramps from 0 to its full value.
    pub warmup_epochs: u32,
    /// Ramp λ2 linearly during warmup; otherwise hold it at zero and switch.
    pub ramp_warmup: bool,
    /// Distill on raw pooled potentials instead of per-step-softmax sums.
    pub kd_on_potentials: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            lambda1: 1.0,
            lambda2: 0.5,
            warmup_epochs: 10,
            ramp_warmup: true,
            kd_on_potentials: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature > 0.0) {
            return Err(TrainError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(TrainError::Config("lambdas must be ≥ 0".into()));
        }
        Ok(())
    }

    /// λ2 at `epoch`, with the warmup ramp applied.
    pub fn effective_lambda2(&self, epoch: u32) -> f32 {
        if self.warmup_epochs == 0 {
            return self.lambda2;
        }
        if self.ramp_warmup {
            self.lambda2 * (epoch as f32 / self.warmup_epochs as f32).min(1.0)
        } else if epoch < self.warmup_epochs {
            0.0
        } else {
            self.lambda2
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f32,
    /// Decoupled weight decay.
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Cosine-annealing period in epochs.
    pub t_max: u32,
    pub eta_min: f32,
    pub epochs: u32,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t_max: 40,
            eta_min: 0.0,
            epochs: 30,
            batch_size: 256,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be > 0".into()));
        }
        if self.t_max < 1 {
            return Err(TrainError::Config("t_max must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate at `epoch`: η(0)=η_max, η(T_max)=η_min,
    /// monotone between, held at η_min afterwards.
    pub fn lr_at(&self, epoch: u32) -> f32 {
        let t = epoch.min(self.t_max) as f64 / self.t_max as f64;
        let span = (self.learning_rate - self.eta_min) as f64;
        (self.eta_min as f64 + span * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }
}

/// softmax(logits / τ) by row.
pub fn softened_probs(logits: &Tensor, temperature: f32) -> Tensor {
    let y = *logits.shape().last().expect("rank ≥ 1");
    let scaled = logits.map(|v| v / temperature);
    let mut out = vec![0.0f32; scaled.len()];
    crate::compute::kernels::softmax_rows(scaled.data(), &mut out, y);
    Tensor::new(logits.shape().to_vec(), out).expect("sized")
}

/// Mean KL(P_T ‖ P_S) over the batch at temperature τ, as a plain value.
pub fn kd_loss_value(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f32) -> f64 {
    let y = *teacher_logits.shape().last().expect("rank ≥ 1");
    let pt = softened_probs(teacher_logits, temperature);
    let ps = softened_probs(student_logits, temperature);
    let batch = pt.len() / y;
    let mut total = 0.0f64;
    for (trow, srow) in pt.data().chunks_exact(y).zip(ps.data().chunks_exact(y)) {
        for (&p, &q) in trow.iter().zip(srow) {
            if p > 0.0 {
                total += p as f64 * (p as f64 / (q as f64).max(1e-30)).ln();
            }
        }
    }
    total / batch as f64
}

/// Mean KL(P_T ‖ P_S) on the tape; gradients flow to the student only.
pub fn kd_loss(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: TensorId,
    temperature: f32,
) -> Result<TensorId, ComputeError> {
    let shape = tape.shape(student_logits).to_vec();
    if shape != teacher_logits.shape() {
        return Err(ComputeError::ShapeMismatch {
            op: "kd_loss",
            left: teacher_logits.shape().to_vec(),
            right: shape,
        });
    }
    let batch = shape[0];
    let pt = softened_probs(teacher_logits, temperature);
    // Σ P_T log P_T, the constant part of the divergence.
    let entropy_term: f64 = pt
        .data()
        .iter()
        .map(|&p| {
            if p > 0.0 {
                p as f64 * (p as f64).ln()
            } else {
                0.0
            }
        })
        .sum();
    let scaled = tape.scale(student_logits, 1.0 / temperature);
    let log_ps = tape.log_softmax(scaled, shape.len() - 1)?;
    let pt_const = tape.constant(pt);
    let weighted = tape.mul(pt_const, log_ps)?;
    let cross = tape.sum(weighted);
    let neg_cross = tape.scale(cross, -1.0 / batch as f32);
    Ok(tape.add_scalar(neg_cross, (entropy_term / batch as f64) as f32))
}

/// Softmax cross-entropy of ŷ against labels (a second softmax on top of the
/// per-step-softmax sum, applied literally).
pub fn ce_loss(
    tape: &mut Tape,
    y_hat: TensorId,
    labels: &[u32],
) -> Result<TensorId, ComputeError> {
    tape.cross_entropy(y_hat, labels)
}

/// L_MT = λ1·L_CE + λ2(epoch)·L_KD.
pub fn mt_loss(
    tape: &mut Tape,
    ce: TensorId,
    kd: TensorId,
    cfg: &DistillConfig,
    epoch: u32,
) -> Result<TensorId, ComputeError> {
    let weighted_ce = tape.scale(ce, cfg.lambda1);
    let weighted_kd = tape.scale(kd, cfg.effective_lambda2(epoch));
    tape.add(weighted_ce, weighted_kd)
}

/// Decoupled-weight-decay Adam over a parameter store.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
    cfg: OptimConfig,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { m, v, step: 0, cfg }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = store.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps))
                    + lr * self.cfg.weight_decay * w[j];
            }
        }
    }
}

/// One row of the training metric log.
#[derive(Clone, Debug, Serialize)]
pub struct MetricRow {
    pub epoch: u32,
    pub stage: u32,
    pub lr: f32,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean firing rate per monitored neuron layer.
    pub firing_rates: BTreeMap<String, f64>,
}

/// Render metric rows as CSV with one `fr_<layer>` column per monitor.
pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    let monitors: Vec<String> = rows
        .first()
        .map(|r| r.firing_rates.keys().cloned().collect())
        .unwrap_or_default();
    out.push_str("epoch,stage,lr,loss_ce,loss_kd,train_acc,val_acc");
    for m in &monitors {
        out.push_str(&format!(",fr_{m}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            r.epoch, r.stage, r.lr, r.loss_ce, r.loss_kd, r.train_acc, r.val_acc
        ));
        for m in &monitors {
            out.push_str(&format!(",{}", r.firing_rates.get(m).copied().unwrap_or(0.0)));
        }
        out.push('\n');
    }
    out
}
