use trajmamba::data::{annotate, gen_data, preprocess};
use trajmamba::features::FeatureScaler;
use trajmamba::geo::HashStub;
use trajmamba::mamba::TrajMambaConfig;
use trajmamba::pretrain::*;
use trajmamba::tensor::{Scalar, Tensor};
use trajmamba::Error;

struct Fixture<T: Scalar> {
    ctx: SemanticContext<T>,
    data: Vec<Example>,
    scaler: FeatureScaler,
}

fn fixture<T: Scalar>() -> Fixture<T> {
    let (city, raw) = gen_data(7, 60, 6, 6).unwrap();
    let (kept, _) = preprocess(&raw).unwrap();
    let anns = annotate(&kept, &city.network, &city.pois).unwrap();
    let scaler = FeatureScaler::fit_trajectories(&kept).unwrap();
    let ctx = SemanticContext::build(&HashStub { dim: 8 }, &city.network, &city.pois).unwrap();
    let data = examples(&kept, &anns, &scaler).unwrap();
    Fixture { ctx, data, scaler }
}

fn tiny(use_road: bool, use_poi: bool) -> PretrainConfig {
    PretrainConfig {
        batch_size: 4,
        epochs: 2,
        lr: 1e-2,
        seed: 3,
        use_road,
        use_poi,
        view_heads: 2,
        view_layers: 1,
        encoder: TrajMambaConfig {
            embed_dim: 8,
            model_dim: 8,
            state_dim: 4,
            heads: 2,
            layers: 1,
            fourier_freqs: 2,
            conv_width: 3,
            use_mb: true,
            scan_chunk: 4,
        },
    }
}

#[test]
fn ablation_gate_and_mean_of_views() {
    let f = fixture::<f64>();
    let batch: Vec<&Example> = f.data[..5].iter().collect();
    let both = Trainer::new(tiny(true, true), f.scaler.clone(), &f.ctx).unwrap();
    let poi_only = Trainer::new(tiny(false, true), f.scaler.clone(), &f.ctx).unwrap();
    let road_only = Trainer::new(tiny(true, false), f.scaler.clone(), &f.ctx).unwrap();
    let (lb, gb) = both.batch_gradients(&batch, &f.ctx).unwrap();
    let (lp, gp) = poi_only.batch_gradients(&batch, &f.ctx).unwrap();
    let (lr, gr) = road_only.batch_gradients(&batch, &f.ctx).unwrap();
    assert_eq!(lp.road, None);
    assert_eq!(lp.total, lp.poi.unwrap());
    assert_eq!(lr.total, lr.road.unwrap());
    assert!((lb.total - 0.5 * (lb.road.unwrap() + lb.poi.unwrap())).abs() < 1e-12);
    assert!((lb.road.unwrap() - lr.total).abs() < 1e-12);
    // total gradient is half the sum of the per-view gradients
    for id in both.store.ids() {
        let zero = vec![0.0; both.store.get(id).numel()];
        let g = gb.get(id).unwrap_or(&zero);
        let a = gr.get(id).unwrap_or(&zero);
        let b = gp.get(id).unwrap_or(&zero);
        for ((x, y), z) in g.iter().zip(a).zip(b) {
            assert!((x - 0.5 * (y + z)).abs() <= 1e-10 * (1.0 + x.abs()), "{}", both.store.name(id));
        }
    }
}

#[test]
fn log_tau_gradient_matches_finite_difference() {
    let f = fixture::<f64>();
    let batch: Vec<&Example> = f.data[..6].iter().collect();
    let mut t = Trainer::new(tiny(true, true), f.scaler.clone(), &f.ctx).unwrap();
    let id = t.model.log_tau;
    for lt in [-2.0, -0.5, 0.7] {
        t.store.set(id, Tensor::scalar(lt)).unwrap();
        let (_, g) = t.batch_gradients(&batch, &f.ctx).unwrap();
        let analytic = g.get(id).unwrap()[0];
        let h = 1e-6;
        let mut loss_at = |v: f64| {
            t.store.set(id, Tensor::scalar(v)).unwrap();
            t.batch_gradients(&batch, &f.ctx).unwrap().0.total
        };
        let numeric = (loss_at(lt + h) - loss_at(lt - h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        assert!(rel <= 1e-4, "log_tau {lt}: {analytic} vs {numeric}");
    }
}

#[test]
fn same_seed_same_curve_and_tau_stays_positive() {
    let f = fixture::<f32>();
    let run = || {
        let mut t = Trainer::new(tiny(true, true), f.scaler.clone(), &f.ctx).unwrap();
        t.run(&f.data, &f.ctx, |_, _| Ok(())).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.tau > 0.0 && s.mean_loss.is_finite()));
}

#[test]
fn checkpoint_round_trip_and_continuation() {
    let f = fixture::<f32>();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(true, true);
    cfg.epochs = 1;
    let mut a = Trainer::new(cfg, f.scaler.clone(), &f.ctx).unwrap();
    a.run(&f.data, &f.ctx, |_, _| Ok(())).unwrap();
    a.save(dir.path()).unwrap();
    let mut b = Trainer::<f32>::load(dir.path(), &f.ctx, Some(2)).unwrap();
    assert_eq!(b.epochs_done, 1);
    assert_eq!(b.scaler, a.scaler);
    for id in a.store.ids() {
        assert_eq!(a.store.get(id), b.store.get(id));
    }
    assert_eq!(a.checkpoint().unwrap(), b.checkpoint().unwrap());

    let (enc, store, scaler) = load_encoder::<f32>(dir.path()).unwrap();
    assert_eq!(scaler, a.scaler);
    assert!(store.iter().all(|(id, name, _)| a.store.id(name).map(|j| a.store.get(j)) == Some(store.get(id))));
    assert_eq!(enc.blocks.len(), 1);

    let first = &b.epoch_batches(f.data.len(), 2)[0];
    let batch: Vec<&Example> = first.iter().map(|&i| &f.data[i]).collect();
    let la = a.step(&batch, &f.ctx).unwrap();
    let lb = b.step(&batch, &f.ctx).unwrap();
    assert!((la.total - lb.total).abs() <= 1e-6);
    for id in a.store.ids() {
        assert_eq!(a.store.get(id), b.store.get(id));
    }

}

#[test]
fn missing_annotation_names_the_trajectory() {
    let (city, raw) = gen_data(7, 12, 6, 6).unwrap();
    let (kept, _) = preprocess(&raw).unwrap();
    let mut anns = annotate(&kept, &city.network, &city.pois).unwrap();
    let gone = anns.remove(1).traj_id;
    let scaler = FeatureScaler::fit_trajectories(&kept).unwrap();
    match examples(&kept, &anns, &scaler) {
        Err(Error::Input(msg)) => assert!(msg.contains(&format!("trajectory {gone}")), "{msg}"),
        other => panic!("expected input error, got {other:?}"),
    }
}

#[test]
fn loss_curve_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let curve = vec![
        EpochStats { epoch: 1, mean_loss: 2.5, road_loss: None, poi_loss: Some(2.5), tau: 0.07 },
        EpochStats { epoch: 2, mean_loss: 1.25, road_loss: None, poi_loss: Some(1.25), tau: 0.071 },
    ];
    write_loss_curve(&path, &curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,mean_loss,road_loss,poi_loss,tau\n1,2.5,,2.5,0.07\n"), "{text}");
    assert_eq!(read_loss_curve(&path).unwrap(), curve);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny(false, false);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.use_road = true;
    c.batch_size = 1;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}
