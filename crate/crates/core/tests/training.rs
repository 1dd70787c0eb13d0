use std::fs;
use std::time::Duration;

use morepair::dataprep::{acquire_guidance, synth, MockTeacher, RenderOptions, RepairExample};
use morepair::model::{trainable_fraction, BaseWeight, ModelConfig, ModelWeights, Projection};
use morepair::train::{load_checkpoint, save_checkpoint, TrainConfig, TrainMode, Trainer};
use morepair::Error;

fn corpus() -> Vec<RepairExample> {
    let teacher = MockTeacher::default();
    synth::generate(5, 1)
        .unwrap()
        .iter()
        .map(|p| acquire_guidance(&p.example, &teacher, 0, Duration::ZERO).unwrap())
        .collect()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        adapter_targets: vec![Projection::Q, Projection::V, Projection::FfDown],
        adapter_rank: 4,
        block_size_1: 32,
        block_size_2: 4,
        init_seed: 3,
        ..ModelConfig::default()
    }
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(
        ModelWeights::init(model_config()).unwrap(),
        cfg,
        RenderOptions::default(),
    )
    .unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        batch_size: 2,
        warmup_steps: 3,
        weight_decay: 0.01,
        train_embeddings: true,
        seed: 12,
        ..TrainConfig::default()
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");

    let mut straight = trainer(train_cfg());
    let full: Vec<_> = (0..10).map(|_| straight.step(&data).unwrap()).collect();

    let mut first = trainer(train_cfg());
    let mut resumed_log: Vec<_> = (0..5).map(|_| first.step(&data).unwrap()).collect();
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut second = load_checkpoint(&path, Some(&model_config())).unwrap();
    assert_eq!(second.step_count(), 5);
    resumed_log.extend((0..5).map(|_| second.step(&data).unwrap()));

    for (a, b) in full.iter().zip(&resumed_log) {
        assert_eq!(a.step, b.step);
        assert_eq!(
            a.losses.combined.to_bits(),
            b.losses.combined.to_bits(),
            "step {}",
            a.step
        );
    }
    assert_eq!(second.weights, straight.weights);
    assert_eq!(second.optimizer(), straight.optimizer());
}

#[test]
fn save_load_save_is_byte_stable() {
    let data = corpus();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut t = trainer(train_cfg());
    t.step(&data).unwrap();
    save_checkpoint(&t, &a).unwrap();
    save_checkpoint(&load_checkpoint(&a, None).unwrap(), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn damaged_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c");
    save_checkpoint(&trainer(train_cfg()), &path).unwrap();
    let good = fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x10;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(_))));

    fs::write(&path, &good[..good.len() - 8]).unwrap();
    assert!(load_checkpoint(&path, None).is_err());

    let mut version = good.clone();
    version[4] = 9;
    fs::write(&path, &version).unwrap();
    let err = load_checkpoint(&path, None).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    fs::write(&path, &good).unwrap();
    let other = ModelConfig {
        adapter_rank: 2,
        ..model_config()
    };
    assert!(load_checkpoint(&path, Some(&other)).is_err());
    assert!(load_checkpoint(&path, Some(&model_config())).is_ok());
}

#[test]
fn same_seed_same_trajectory() {
    let data = corpus();
    let run = || {
        let mut t = trainer(train_cfg());
        let log: Vec<u64> = (0..4)
            .map(|_| t.step(&data).unwrap().losses.combined.to_bits())
            .collect();
        (log, t.weights)
    };
    assert_eq!(run(), run());
    let mut other = trainer(TrainConfig {
        seed: 13,
        ..train_cfg()
    });
    let first = other.step(&data).unwrap().losses.combined.to_bits();
    assert_ne!(first, run().0[0]);
}

#[test]
fn only_trainable_tensors_move() {
    let data = corpus();
    let cfg = TrainConfig {
        train_embeddings: false,
        ..train_cfg()
    };
    let mut t = trainer(cfg);
    let before = t.weights.clone();
    let fraction = trainable_fraction(&t.weights);
    for _ in 0..3 {
        t.step(&data).unwrap();
    }
    let after = &t.weights;
    assert_eq!(after.tok_emb, before.tok_emb);
    assert_eq!(after.pos_emb, before.pos_emb);
    assert_eq!(after.head, before.head);
    assert_eq!(after.ln_f, before.ln_f);
    for (a, b) in after.blocks.iter().zip(&before.blocks) {
        assert_eq!((&a.ln1, &a.ln2), (&b.ln1, &b.ln2));
        for p in Projection::ALL {
            assert_eq!(a.linear(p).base, b.linear(p).base);
            assert!(matches!(a.linear(p).base, BaseWeight::Quantized(_)));
            if let (Some(x), Some(y)) = (&a.linear(p).adapter, &b.linear(p).adapter) {
                assert_ne!(x.up, y.up, "adapter {p} did not train");
            }
        }
    }
    assert_eq!(trainable_fraction(after), fraction);
}

#[test]
fn every_mode_lowers_its_loss() {
    let data: Vec<RepairExample> = corpus().into_iter().take(1).collect();
    for mode in [TrainMode::Standard, TrainMode::Morepair, TrainMode::Cot] {
        let mut t = trainer(TrainConfig {
            mode,
            neftune_alpha: 0.0,
            learning_rate: 1e-2,
            batch_size: 1,
            ..train_cfg()
        });
        let first = t.step(&data).unwrap().losses.combined;
        let mut last = first;
        for _ in 0..15 {
            last = t.step(&data).unwrap().losses.combined;
        }
        assert!(last < first, "{mode:?}: {first} -> {last}");
    }
}

#[test]
fn lenient_cot_falls_back_to_code_pairs() {
    let mut data = corpus();
    for ex in &mut data {
        ex.guidance = None;
    }
    let strict = trainer(TrainConfig {
        mode: TrainMode::Cot,
        ..train_cfg()
    })
    .step(&data);
    assert!(strict.is_err());

    let cfg = TrainConfig {
        mode: TrainMode::Cot,
        strict: false,
        ..train_cfg()
    };
    let std_cfg = TrainConfig {
        mode: TrainMode::Standard,
        strict: false,
        ..train_cfg()
    };
    let a = trainer(cfg).step(&data).unwrap().losses;
    let b = trainer(std_cfg).step(&data).unwrap().losses;
    assert_eq!(a.combined.to_bits(), b.combined.to_bits());
}
