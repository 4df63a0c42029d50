//! Train, save, reload and evaluate end to end.

use strelay::checkpoint::Checkpoint;
use strelay::ingest::chrono_split;
use strelay::metrics::{evaluate, grouped_evaluate, Grouping, DEFAULT_KS};
use strelay::relay::Variant;
use strelay::synthgen::{generate, SynthConfig};
use strelay::trainer::{train, TrainConfig};

fn small_task() -> (strelay::ingest::Dataset, strelay::ingest::Dataset) {
    let cfg = SynthConfig {
        num_users: 4,
        events_per_user: 120,
        seed: 9,
        ..SynthConfig::default()
    };
    chrono_split(&generate(&cfg).unwrap().dataset, 0.8).unwrap()
}

#[test]
fn reloaded_checkpoint_scores_identically_for_every_variant() {
    let (train_ds, test_ds) = small_task();
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            d: 6,
            epochs: 2,
            variant,
            ..TrainConfig::default()
        };
        let ckpt = train(&train_ds, &cfg).unwrap().checkpoint;
        let path = dir.path().join(format!("{variant}.strl"));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.rng_state, ckpt.rng_state);
        let a = evaluate(&ckpt, &test_ds, &DEFAULT_KS).unwrap();
        let b = evaluate(&back, &test_ds, &DEFAULT_KS).unwrap();
        assert_eq!(a, b, "{variant}");
        assert!(a.mrr.to_bits() == b.mrr.to_bits());
    }
}

#[test]
fn grouped_overall_matches_plain_evaluation() {
    let (train_ds, test_ds) = small_task();
    let cfg = TrainConfig {
        d: 6,
        epochs: 1,
        ..TrainConfig::default()
    };
    let ckpt = train(&train_ds, &cfg).unwrap().checkpoint;
    let plain = evaluate(&ckpt, &test_ds, &DEFAULT_KS).unwrap();
    let grouped = grouped_evaluate(
        &ckpt,
        &test_ds,
        &Grouping::RogMedian(&train_ds),
        &DEFAULT_KS,
    )
    .unwrap();
    assert_eq!(grouped.overall, plain);
    let n: usize = grouped.groups.values().map(|r| r.n).sum();
    assert_eq!(n, plain.n);
}

#[test]
fn training_continues_to_reduce_loss() {
    let (train_ds, _) = small_task();
    let cfg = TrainConfig {
        d: 6,
        epochs: 5,
        ..TrainConfig::default()
    };
    let losses = train(&train_ds, &cfg).unwrap().epoch_losses;
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}
