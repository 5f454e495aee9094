// Scratch KDCL-vs-direct calibration harness (removed before release).

use std::time::Instant;

use spikescr::data::{gen_synthetic_dataset, CurriculumSchedule, SyntheticSpec};
use spikescr::layers::{Model, ModelConfig};
use spikescr::train::{
    evaluate, kdcl_run, train_direct, DistillConfig, OptimConfig, TrainOptions,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(100);
    let epochs: u32 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(12);
    let hidden: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(48);

    let train_spec = SyntheticSpec {
        n_classes: 4,
        n_samples: 2000,
        n_neurons: 140,
        duration: 1.0,
        seed,
    };
    let test_spec = SyntheticSpec { n_samples: 500, seed: seed + 7777, ..train_spec.clone() };
    let train_events = gen_synthetic_dataset(&train_spec).unwrap();
    let test_events = gen_synthetic_dataset(&test_spec).unwrap();

    let cfg = ModelConfig {
        n_blocks: 1,
        n_heads: 4,
        hidden,
        input_channels: 140,
        n_classes: 4,
        sem_depth: 1,
        ..Default::default()
    };
    let optim = OptimConfig {
        epochs,
        batch_size: 64,
        learning_rate: 5e-3,
        weight_decay: 1e-2,
        t_max: 40,
        ..Default::default()
    };
    let distill = DistillConfig { warmup_epochs: 3, ..Default::default() };
    let schedule = CurriculumSchedule::new(vec![40, 20, 10]).unwrap();

    let t0 = Instant::now();
    // Direct baseline at the hardest resolution.
    let train10 = train_events.to_dense(10).unwrap();
    let test10 = test_events.to_dense(10).unwrap();
    let mut direct = Model::new(cfg.clone(), seed).unwrap();
    train_direct(&mut direct, &train10, None, &TrainOptions::new(optim, seed)).unwrap();
    let direct_acc = evaluate(&mut direct, &test10, 64).unwrap().accuracy;
    println!("[{:.0}s] direct T=10: {:.4}", t0.elapsed().as_secs_f64(), direct_acc);

    let out = kdcl_run(&schedule, &train_events, None, &cfg, &distill, &optim, seed).unwrap();
    let mut student = out.model;
    let kdcl_acc = evaluate(&mut student, &test10, 64).unwrap().accuracy;
    for r in &out.stages {
        println!("  stage {} T={} train_acc={:.4}", r.stage, r.t_steps, r.final_train_acc);
    }
    println!(
        "[{:.0}s] seed {seed}: kdcl {:.4} vs direct {:.4} (gap {:+.4})",
        t0.elapsed().as_secs_f64(),
        kdcl_acc,
        direct_acc,
        kdcl_acc - direct_acc
    );
}
