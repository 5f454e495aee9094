//! Direct backpropagation-through-time training at a single resolution.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ce_loss, AdamW, MetricRow, OptimConfig, TrainError};
use crate::augment::{derive_seed, event_drop, spec_augment, AugmentConfig};
use crate::compute::{Tape, Tensor};
use crate::data::DenseDataset;
use crate::layers::Model;

/// Which augmentation family applies to a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Frequency/time masking for real-valued inputs.
    Spec,
    /// Drop-by-time / drop-by-neuron for spike counts.
    EventDrop,
}

/// Everything `train_direct` needs besides model and data.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub optim: OptimConfig,
    pub augment: Option<(AugmentConfig, AugmentKind)>,
    pub seed: u64,
    /// Stage index stamped into metric rows.
    pub stage: u32,
    /// First epoch number (for resumed runs).
    pub start_epoch: u32,
}

impl TrainOptions {
    pub fn new(optim: OptimConfig, seed: u64) -> Self {
        Self { optim, augment: None, seed, stage: 0, start_epoch: 0 }
    }
}

/// Gather dataset rows into a `[B, T, N]` batch, augmenting in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble_batch(
    data: &DenseDataset,
    indices: &[usize],
    augment: Option<&(AugmentConfig, AugmentKind)>,
    seed: u64,
    epoch: u32,
) -> (Tensor, Vec<u32>) {
    let (t, n) = (data.t_steps, data.n_neurons);
    let mut x = Vec::with_capacity(indices.len() * t * n);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let s = &data.samples[idx];
        let start = x.len();
        x.extend_from_slice(&s.data);
        if let Some((cfg, kind)) = augment {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as usize, idx));
            match kind {
                AugmentKind::Spec => spec_augment(&mut x[start..], t, n, cfg, &mut rng),
                AugmentKind::EventDrop => event_drop(&mut x[start..], t, n, cfg, &mut rng),
            }
        }
        labels.push(s.label);
    }
    (
        Tensor::new(vec![indices.len(), t, n], x).expect("sized"),
        labels,
    )
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

pub(crate) fn argmax_accuracy(y_hat: &Tensor, labels: &[u32]) -> f64 {
    let y = *y_hat.shape().last().expect("classes");
    let mut correct = 0usize;
    for (row, &label) in y_hat.data().chunks_exact(y).zip(labels) {
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if pred == label as usize {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Evaluation outcome: accuracy plus a row-per-true-class confusion matrix.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n_samples: usize,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<u64>>,
    /// Mean firing rate per monitored layer over the dataset.
    pub firing_rates: BTreeMap<String, f64>,
}

/// Eval-mode pass over a dataset: no augmentation, no statistic updates.
pub fn evaluate(
    model: &mut Model,
    data: &DenseDataset,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let y = model.cfg.n_classes;
    let mut confusion = vec![vec![0u64; y]; y];
    let mut correct = 0usize;
    let mut rate_sums: BTreeMap<String, (f64, u64)> = BTreeMap::new();
    let all: Vec<usize> = (0..data.samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, labels) = assemble_batch(data, chunk, None, 0, 0);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, false)?;
        let y_hat = tape.value(out.y_hat);
        let classes = y;
        for (row, &label) in y_hat.data().chunks_exact(classes).zip(&labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            confusion[label as usize][pred] += 1;
            if pred == label as usize {
                correct += 1;
            }
        }
        for e in &out.trace.entries {
            let slot = rate_sums.entry(e.name.clone()).or_insert((0.0, 0));
            slot.0 += e.active as f64;
            slot.1 += e.total;
        }
    }
    let firing_rates = rate_sums
        .into_iter()
        .map(|(k, (active, total))| (k, if total > 0 { active / total as f64 } else { 0.0 }))
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / data.samples.len().max(1) as f64,
        n_samples: data.samples.len(),
        confusion,
        firing_rates,
    })
}

/// Train by shuffled mini-batch BPTT with AdamW and cosine annealing.
///
/// Deterministic given the seed on a single thread. Aborts with a diagnostic
/// if the loss leaves the reals.
pub fn train_direct(
    model: &mut Model,
    train: &DenseDataset,
    val: Option<&DenseDataset>,
    opts: &TrainOptions,
) -> Result<Vec<MetricRow>, TrainError> {
    opts.optim.validate()?;
    if train.samples.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if train.n_classes as usize > model.cfg.n_classes {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, model has {}",
            train.n_classes, model.cfg.n_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut optimizer = AdamW::new(&model.store, opts.optim);
    let mut rows = Vec::new();
    for e in 0..opts.optim.epochs {
        let epoch = opts.start_epoch + e;
        let lr = opts.optim.lr_at(epoch);
        let order = shuffled_indices(train.samples.len(), &mut rng);
        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut batches = 0usize;
        let mut rate_sums: BTreeMap<String, (f64, u64)> = BTreeMap::new();
        for chunk in order.chunks(opts.optim.batch_size) {
            let (x, labels) =
                assemble_batch(train, chunk, opts.augment.as_ref(), opts.seed, epoch);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &x, true)?;
            let loss = ce_loss(&mut tape, out.y_hat, &labels)?;
            let loss_v = tape.value(loss).item();
            if !loss_v.is_finite() {
                return Err(TrainError::Diverged { epoch, loss: loss_v });
            }
            model.store.zero_grads();
            let grads = tape.backward(loss);
            tape.accumulate_param_grads(&grads, &mut model.store);
            optimizer.step(&mut model.store, lr);

            loss_sum += loss_v as f64;
            acc_sum += argmax_accuracy(tape.value(out.y_hat), &labels);
            batches += 1;
            for entry in out.trace.entries.iter().filter(|e| e.binary) {
                let slot = rate_sums.entry(entry.name.clone()).or_insert((0.0, 0));
                slot.0 += entry.active as f64;
                slot.1 += entry.total;
            }
        }
        let val_acc = match val {
            Some(v) => evaluate(model, v, opts.optim.batch_size)?.accuracy,
            None => f64::NAN,
        };
        rows.push(MetricRow {
            epoch,
            stage: opts.stage,
            lr,
            loss_ce: loss_sum / batches.max(1) as f64,
            loss_kd: 0.0,
            train_acc: acc_sum / batches.max(1) as f64,
            val_acc,
            firing_rates: rate_sums
                .into_iter()
                .map(|(k, (a, t))| (k, if t > 0 { a / t as f64 } else { 0.0 }))
                .collect(),
        });
    }
    Ok(rows)
}
