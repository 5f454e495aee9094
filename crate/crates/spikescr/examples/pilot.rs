// Scratch calibration harness (removed before release).

use std::time::Instant;

use spikescr::data::{gen_synthetic_dataset, SyntheticSpec};
use spikescr::layers::{Model, ModelConfig};
use spikescr::train::{train_direct, OptimConfig, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let t_steps: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(40);
    let epochs: u32 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(5);
    let hidden: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(48);
    let n_train: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(2000);
    let lr: f32 = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(5e-3);

    let train_spec = SyntheticSpec {
        n_classes: 4,
        n_samples: n_train,
        n_neurons: 140,
        duration: 1.0,
        seed: 1,
    };
    let test_spec = SyntheticSpec { n_samples: 500, seed: 2, ..train_spec.clone() };
    let t0 = Instant::now();
    let train_events = gen_synthetic_dataset(&train_spec).unwrap();
    let test_events = gen_synthetic_dataset(&test_spec).unwrap();
    println!("gen: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let train = train_events.to_dense(t_steps).unwrap();
    let test = test_events.to_dense(t_steps).unwrap();
    println!("bin: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = ModelConfig {
        n_blocks: 1,
        n_heads: 4,
        hidden,
        input_channels: 140,
        n_classes: 4,
        sem_depth: 1,
        ..Default::default()
    };
    let mut model = Model::new(cfg, 7).unwrap();
    println!("params: {}", model.param_count());
    let optim = OptimConfig {
        epochs,
        batch_size: 64,
        learning_rate: lr,
        weight_decay: 1e-2,
        t_max: 40,
        ..Default::default()
    };
    let t0 = Instant::now();
    let rows = train_direct(
        &mut model,
        &train,
        Some(&test),
        &TrainOptions::new(optim, 7),
    )
    .unwrap();
    for r in &rows {
        println!(
            "epoch {} lr {:.5} loss {:.4} train_acc {:.4} val_acc {:.4} [{:.1}s elapsed]",
            r.epoch,
            r.lr,
            r.loss_ce,
            r.train_acc,
            r.val_acc,
            t0.elapsed().as_secs_f64()
        );
    }
}
