use trajmamba::features::{FeatureScaler, Trajectory, TrajectoryPoint};
use trajmamba::mamba::{TrajMamba, TrajMambaConfig};
use trajmamba::tasks::{train_eval_regression, HeadTraining, Mode, Task};
use trajmamba::tensor::rng::Rng;
use trajmamba::tensor::ParamStore;

/// Twelve points at a per-trajectory constant gap. The gap also sets the
/// start longitude; every trajectory departs at the same instant.
fn corpus(seed: u64, count: usize) -> Vec<Trajectory> {
    let mut rng = Rng::new(seed, "tasks");
    (0..count)
        .map(|i| {
            let gap = 5 + rng.below(56) as i64;
            let (mut lng, mut lat, mut t) = (104.0 + 2e-3 * gap as f64, 30.66, 1_538_352_000i64);
            let pts = (0..12)
                .map(|_| {
                    let p = TrajectoryPoint::new(lng, lat, t);
                    lng += rng.uniform(-5e-4, 5e-4);
                    lat += rng.uniform(-5e-4, 5e-4);
                    t += gap;
                    p
                })
                .collect();
            Trajectory::new(i as u64, pts)
        })
        .collect()
}

fn encoder() -> (ParamStore<f64>, TrajMamba) {
    let cfg = TrajMambaConfig {
        embed_dim: 16,
        model_dim: 16,
        state_dim: 4,
        heads: 2,
        layers: 1,
        fourier_freqs: 4,
        ..TrajMambaConfig::default()
    };
    let mut store = ParamStore::new();
    let m = TrajMamba::new(&mut store, &mut Rng::new(1, "init"), cfg).unwrap();
    (store, m)
}

fn hp() -> HeadTraining {
    HeadTraining {
        lr: 3e-2,
        batch_size: 16,
        max_epochs: 150,
        patience: 20,
        seed: 3,
    }
}

#[test]
fn frozen_head_beats_mean_and_leaves_encoder_untouched() {
    let (store, enc) = encoder();
    let (train, val, test) = (corpus(1, 160), corpus(2, 40), corpus(3, 40));
    let scaler = FeatureScaler::fit_trajectories(&train).unwrap();
    let out = train_eval_regression(Task::ArrivalTime, Mode::Frozen, &enc, &store, &scaler, [&train, &val, &test], &hp()).unwrap();
    for id in store.ids() {
        assert_eq!(out.store.get(id), store.get(id), "{} moved", store.name(id));
    }
    let (mae, base) = (out.metrics["mae"], out.metrics["baseline_mae"]);
    assert!(mae < 0.7 * base, "mae {mae} vs mean baseline {base}");
    assert_eq!(out.metrics["n_test"], 40.0);
}

#[test]
fn finetune_moves_encoder_weights() {
    let (store, enc) = encoder();
    let (train, val, test) = (corpus(4, 32), corpus(5, 16), corpus(6, 16));
    let scaler = FeatureScaler::fit_trajectories(&train).unwrap();
    let hp = HeadTraining { max_epochs: 2, ..hp() };
    let out = train_eval_regression(Task::Destination, Mode::Finetune, &enc, &store, &scaler, [&train, &val, &test], &hp).unwrap();
    assert!(store.ids().any(|id| out.store.get(id) != store.get(id)));
    assert!(out.metrics["mae"].is_finite() && out.metrics.contains_key("baseline_mae"));
}

#[test]
fn short_trajectories_are_skipped() {
    let (store, enc) = encoder();
    let mut test = corpus(7, 10);
    test.push(Trajectory::new(99, test[0].points[..6].to_vec()));
    let (train, val) = (corpus(8, 20), corpus(9, 10));
    let scaler = FeatureScaler::fit_trajectories(&train).unwrap();
    let hp = HeadTraining { max_epochs: 1, ..hp() };
    let out = train_eval_regression(Task::ArrivalTime, Mode::Frozen, &enc, &store, &scaler, [&train, &val, &test], &hp).unwrap();
    assert_eq!((out.skipped, out.metrics["n_test"]), (1, 10.0));
}
