//! Curriculum knowledge distillation: train a teacher on the longest
//! resolution, then walk the schedule from easy to hard, each stage
//! distilling the frozen previous model into a student initialized from it.
//!
//! Both resolutions of one stage are bins of the same recordings, and one
//! shared index shuffle per epoch drives both, so every mini-batch pairs a
//! teacher view and a student view of the same samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::direct::{argmax_accuracy, assemble_batch, evaluate, train_direct, TrainOptions};
use super::{ce_loss, kd_loss, mt_loss, AdamW, DistillConfig, MetricRow, OptimConfig, TrainError};
use crate::compute::{Tape, Tensor};
use crate::data::{CurriculumSchedule, DenseDataset, EventDataset};
use crate::layers::{Model, ModelConfig};

/// Per-stage summary of a curriculum run.
#[derive(Clone, Debug, Serialize)]
pub struct StageReport {
    pub stage: u32,
    pub t_steps: u32,
    /// Resolution the teacher consumed (none for the first stage).
    pub teacher_t_steps: Option<u32>,
    /// Teacher accuracy on the validation set at its own resolution.
    pub teacher_val_acc: Option<f64>,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub epochs: u32,
}

/// Final student plus the history of every stage.
pub struct KdclOutcome {
    pub model: Model,
    pub stages: Vec<StageReport>,
    pub metrics: Vec<MetricRow>,
    /// Model checkpointed after each stage (same order as `stages`).
    pub stage_models: Vec<Model>,
}

/// Frozen-teacher outputs for every training sample, computed once per stage.
///
/// The teacher is in eval mode and augmentation never touches its inputs, so
/// its logits per sample are constants of the stage.
fn cache_teacher_logits(
    teacher: &mut Model,
    data: &DenseDataset,
    batch_size: usize,
    on_potentials: bool,
) -> Result<Vec<Tensor>, TrainError> {
    let mut out = Vec::with_capacity(data.samples.len());
    let all: Vec<usize> = (0..data.samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, _) = assemble_batch(data, chunk, None, 0, 0);
        let mut tape = Tape::new();
        let fwd = teacher.forward(&mut tape, &x, false)?;
        let logits_id = if on_potentials {
            tape.sum_axis(fwd.potentials, 1)?
        } else {
            fwd.y_hat
        };
        let logits = tape.value(logits_id);
        let y = *logits.shape().last().expect("classes");
        for row in logits.data().chunks_exact(y) {
            out.push(Tensor::new(vec![y], row.to_vec()).expect("sized"));
        }
    }
    Ok(out)
}

fn gather_rows(cache: &[Tensor], indices: &[usize]) -> Tensor {
    let y = cache[0].len();
    let mut data = Vec::with_capacity(indices.len() * y);
    for &i in indices {
        data.extend_from_slice(cache[i].data());
    }
    Tensor::new(vec![indices.len(), y], data).expect("sized")
}

/// One distillation stage: teacher consumes the previous resolution, the
/// student consumes the new one, and L_MT = λ1·CE + λ2·KD drives the student.
#[allow(clippy::too_many_arguments)]
fn distill_stage(
    student: &mut Model,
    teacher: &mut Model,
    train_prev: &DenseDataset,
    train_new: &DenseDataset,
    val_new: Option<&DenseDataset>,
    distill: &DistillConfig,
    optim: &OptimConfig,
    seed: u64,
    stage: u32,
) -> Result<Vec<MetricRow>, TrainError> {
    optim.validate()?;
    distill.validate()?;
    let teacher_cache = cache_teacher_logits(
        teacher,
        train_prev,
        optim.batch_size,
        distill.kd_on_potentials,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = AdamW::new(&student.store, *optim);
    let mut rows = Vec::new();
    for epoch in 0..optim.epochs {
        let lr = optim.lr_at(epoch);
        // One shared shuffle pairs x1 (teacher view) and x2 (student view).
        let mut order: Vec<usize> = (0..train_new.samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut ce_sum = 0.0f64;
        let mut kd_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut batches = 0usize;
        let mut rate_sums: std::collections::BTreeMap<String, (f64, u64)> = Default::default();
        for chunk in order.chunks(optim.batch_size) {
            let (x2, labels) = assemble_batch(train_new, chunk, None, seed, epoch);
            let teacher_logits = gather_rows(&teacher_cache, chunk);
            let mut tape = Tape::new();
            let fwd = student.forward(&mut tape, &x2, true)?;
            let student_logits = if distill.kd_on_potentials {
                tape.sum_axis(fwd.potentials, 1)?
            } else {
                fwd.y_hat
            };
            let ce = ce_loss(&mut tape, fwd.y_hat, &labels)?;
            let kd = kd_loss(&mut tape, &teacher_logits, student_logits, distill.temperature)?;
            let loss = mt_loss(&mut tape, ce, kd, distill, epoch)?;
            let loss_v = tape.value(loss).item();
            if !loss_v.is_finite() {
                return Err(TrainError::Diverged { epoch, loss: loss_v });
            }
            student.store.zero_grads();
            let grads = tape.backward(loss);
            tape.accumulate_param_grads(&grads, &mut student.store);
            optimizer.step(&mut student.store, lr);

            ce_sum += tape.value(ce).item() as f64;
            kd_sum += tape.value(kd).item() as f64;
            acc_sum += argmax_accuracy(tape.value(fwd.y_hat), &labels);
            batches += 1;
            for entry in fwd.trace.entries.iter().filter(|e| e.binary) {
                let slot = rate_sums.entry(entry.name.clone()).or_insert((0.0, 0));
                slot.0 += entry.active as f64;
                slot.1 += entry.total;
            }
        }
        let val_acc = match val_new {
            Some(v) => evaluate(student, v, optim.batch_size)?.accuracy,
            None => f64::NAN,
        };
        rows.push(MetricRow {
            epoch,
            stage,
            lr,
            loss_ce: ce_sum / batches.max(1) as f64,
            loss_kd: kd_sum / batches.max(1) as f64,
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

/// Run the whole curriculum: direct-train the first stage, then distill down
/// the schedule, the trained student of each stage becoming the next teacher.
pub fn kdcl_run(
    schedule: &CurriculumSchedule,
    train_events: &EventDataset,
    val_events: Option<&EventDataset>,
    model_cfg: &ModelConfig,
    distill: &DistillConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<KdclOutcome, TrainError> {
    let stages = schedule.stages();
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    let mut stage_models = Vec::new();

    // Stage 0: the initial teacher learns the easiest curriculum directly.
    let t0 = stages[0];
    let train0 = train_events.to_dense(t0 as usize)?;
    let val0 = val_events.map(|v| v.to_dense(t0 as usize)).transpose()?;
    let mut current = Model::new(model_cfg.clone(), seed).map_err(|e| {
        TrainError::Config(e.to_string())
    })?;
    let rows = train_direct(
        &mut current,
        &train0,
        val0.as_ref(),
        &TrainOptions { stage: 0, ..TrainOptions::new(*optim, seed) },
    )?;
    let last = rows.last().expect("≥ 1 epoch");
    reports.push(StageReport {
        stage: 0,
        t_steps: t0,
        teacher_t_steps: None,
        teacher_val_acc: None,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        epochs: optim.epochs,
    });
    metrics.extend(rows);
    stage_models.push(clone_model(&mut current, model_cfg, seed)?);

    for (k, &t_new) in stages.iter().enumerate().skip(1) {
        let t_prev = stages[k - 1];
        let train_prev = train_events.to_dense(t_prev as usize)?;
        let train_new = train_events.to_dense(t_new as usize)?;
        let val_new = val_events.map(|v| v.to_dense(t_new as usize)).transpose()?;

        // Teacher is the previous stage's model, frozen; the student starts
        // from the teacher's parameters.
        let mut teacher = current;
        let mut student = Model::new(model_cfg.clone(), seed.wrapping_add(k as u64))
            .map_err(|e| TrainError::Config(e.to_string()))?;
        student.copy_state_from(&mut teacher);

        let teacher_val_acc = match val_events {
            Some(v) => {
                let teacher_val = v.to_dense(t_prev as usize)?;
                Some(evaluate(&mut teacher, &teacher_val, optim.batch_size)?.accuracy)
            }
            None => None,
        };

        let rows = distill_stage(
            &mut student,
            &mut teacher,
            &train_prev,
            &train_new,
            val_new.as_ref(),
            distill,
            optim,
            seed.wrapping_add(1000 + k as u64),
            k as u32,
        )?;
        let last = rows.last().expect("≥ 1 epoch");
        reports.push(StageReport {
            stage: k as u32,
            t_steps: t_new,
            teacher_t_steps: Some(t_prev),
            teacher_val_acc,
            final_train_acc: last.train_acc,
            final_val_acc: last.val_acc,
            epochs: optim.epochs,
        });
        metrics.extend(rows);
        stage_models.push(clone_model(&mut student, model_cfg, seed)?);
        current = student;
    }

    Ok(KdclOutcome {
        model: current,
        stages: reports,
        metrics,
        stage_models,
    })
}

fn clone_model(src: &mut Model, cfg: &ModelConfig, seed: u64) -> Result<Model, TrainError> {
    let mut clone = Model::new(cfg.clone(), seed).map_err(|e| TrainError::Config(e.to_string()))?;
    clone.copy_state_from(src);
    Ok(clone)
}
