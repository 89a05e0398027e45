use shardmax::data::generate_synthetic;
use shardmax::encoder::EncoderConfig;
use shardmax::memory::{comm_volume, CostScenario, Mode};
use shardmax::trainer::{ClassMode, TrainConfig, Trainer};

fn config(workers: usize, class_mode: ClassMode) -> TrainConfig {
    TrainConfig {
        total_epochs: 2,
        warmup_epochs: 1,
        base_lr: 0.1,
        batch_size: 32,
        k: 3,
        workers,
        class_mode,
        encoder: EncoderConfig { input_dim: 6, hidden_dims: vec![32, 24], embed_dim: 8, ..Default::default() },
        extract_batch_size: 16,
        ..Default::default()
    }
}

#[test]
fn live_step_bytes_match_the_model() {
    let data = generate_synthetic::<f64>(16, 8, 6, 0.3, 5).unwrap().instances;
    for workers in [2usize, 4, 8] {
        for mode in [ClassMode::Full, ClassMode::Sampled { m: 80 }] {
            let mut tr = Trainer::new(config(workers, mode), &data).unwrap();
            tr.refresh_hard_classes(0).unwrap();
            let ids = tr.epoch_batches(0)[0].clone();
            let out = tr.step(&ids, 0, 0).unwrap();
            let enc = tr.encoder();
            let scenario = CostScenario {
                n_classes: data.len() as u64,
                workers: workers as u64,
                embed_dim: 8,
                batch: out.rows as u64,
                bytes_per_scalar: 8,
                encoder_params: enc.num_params() as u64,
                bn_channels: enc.bn_channels() as u64,
                ..Default::default()
            };
            assert_eq!(out.comm_bytes, comm_volume(&scenario, Mode::Dhp).total, "T = {workers}, {mode:?}");
        }
    }
}
