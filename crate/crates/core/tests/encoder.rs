use trajmamba::features::{prepare, FeatureScaler, PackedBatch, PreparedTrajectory, Trajectory, TrajectoryPoint};
use trajmamba::mamba::{TrajMamba, TrajMambaConfig};
use trajmamba::tensor::gradcheck::{check_params, project, DEFAULT_STEP};
use trajmamba::tensor::kernels::SeqLayout;
use trajmamba::tensor::rng::Rng;
use trajmamba::tensor::{ParamStore, Tape, Tensor};

fn tiny_config() -> TrajMambaConfig {
    TrajMambaConfig {
        embed_dim: 8,
        model_dim: 8,
        state_dim: 3,
        heads: 2,
        layers: 2,
        fourier_freqs: 2,
        conv_width: 4,
        use_mb: true,
        scan_chunk: 4,
    }
}

fn random_traj(rng: &mut Rng, id: u64, n: usize) -> Trajectory {
    let (mut lng, mut lat, mut t) = (104.05, 30.65, 1_538_400_000i64 + rng.below(86_400) as i64);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        pts.push(TrajectoryPoint::new(lng, lat, t));
        lng += rng.uniform(-0.001, 0.001);
        lat += rng.uniform(-0.001, 0.001);
        t += 5 + rng.below(20) as i64;
    }
    Trajectory::new(id, pts)
}

fn prepared(rng: &mut Rng, lens: &[usize]) -> Vec<PreparedTrajectory> {
    let trajs: Vec<_> = lens.iter().enumerate().map(|(i, &n)| random_traj(rng, i as u64, n)).collect();
    let scaler = FeatureScaler::fit_trajectories(&trajs).unwrap();
    trajs.iter().map(|t| prepare(t, &scaler).unwrap()).collect()
}

fn model(cfg: TrajMambaConfig, seed: u64) -> (ParamStore<f64>, TrajMamba) {
    let mut store = ParamStore::new();
    let m = TrajMamba::new(&mut store, &mut Rng::new(seed, "init"), cfg).unwrap();
    (store, m)
}

fn zero_prefix(store: &mut ParamStore<f64>, prefix: &str) {
    for id in store.ids_with_prefix(prefix).collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
}

#[test]
fn zero_block_weights_give_zero_embedding() {
    let mut cfg = tiny_config();
    cfg.layers = 1;
    let (mut store, m) = model(cfg, 1);
    zero_prefix(&mut store, "block0.");
    let p = prepared(&mut Rng::new(2, "data"), &[6]);
    let tape = Tape::inference(&store);
    let z = m.encode(&tape, &PackedBatch::single(&p[0]).unwrap()).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_gate_annihilates_block_output() {
    let (mut store, m) = model(tiny_config(), 3);
    let gate = m.blocks[1].gate_proj.weight;
    store.set(gate, Tensor::zeros([8, 8])).unwrap();
    let p = prepared(&mut Rng::new(4, "data"), &[7]);
    let tape = Tape::inference(&store);
    let rows = m.forward_rows(&tape, &PackedBatch::single(&p[0]).unwrap()).unwrap();
    assert!(tape.value(rows).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_movement_projection_gives_ln2_steps() {
    for use_mb in [true, false] {
        let mut cfg = tiny_config();
        cfg.use_mb = use_mb;
        let (mut store, m) = model(cfg, 5);
        let b = &m.blocks[0];
        zero_prefix(&mut store, if use_mb { "block0.mb_proj" } else { "block0.x_proj" });
        zero_prefix(&mut store, "block0.delta_bias");
        let p = prepared(&mut Rng::new(6, "data"), &[5]);
        let batch = PackedBatch::<f64>::single(&p[0]).unwrap();
        let tape = Tape::inference(&store);
        let src = if use_mb {
            tape.constant(batch.movement.clone())
        } else {
            let z = m.embedder.forward(&tape, &batch).unwrap();
            b.block_input(&tape, z, &batch.layout).unwrap()
        };
        let ssm = b.parameterize(&tape, src).unwrap();
        assert_eq!(tape.shape(ssm.dt), vec![5, 2]);
        assert_eq!(tape.shape(ssm.b), vec![5, 3]);
        assert!(tape.value(ssm.dt).data().iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
        assert!(tape.value(ssm.b).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(ssm.c).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn identity_conv_tap_reduces_block_input() {
    let (mut store, m) = model(tiny_config(), 7);
    let b = &m.blocks[0];
    let mut k = vec![0.0; 8 * 4];
    for c in 0..8 {
        k[c * 4 + 3] = 1.0;
    }
    store.set(b.conv, Tensor::new([8, 4], k).unwrap()).unwrap();
    let mut rng = Rng::new(8, "z");
    let z = rng.normal_tensor::<f64>(&[6, 8], 1.0);
    let tape = Tape::inference(&store);
    let zv = tape.constant(z);
    let x = b.block_input(&tape, zv, &SeqLayout::single(6)).unwrap();
    let u = b.in_proj.forward(&tape, zv).unwrap();
    let want = tape.silu(u);
    assert_eq!(tape.shape(x), vec![6, 8]);
    assert_eq!(tape.tensor(x), tape.tensor(want));
}

#[test]
fn equal_movement_rows_get_equal_parameters() {
    let (store, m) = model(tiny_config(), 9);
    let tape = Tape::inference(&store);
    let mv = tape.constant(Tensor::from_f64([3, 3], &[0.2, 0.4, 0.9, 0.5, 0.5, 0.5, 0.2, 0.4, 0.9]).unwrap());
    let ssm = m.blocks[0].parameterize(&tape, mv).unwrap();
    for v in [ssm.b, ssm.c, ssm.dt] {
        let t = tape.tensor(v);
        assert_eq!(t.row(0), t.row(2));
    }
    assert!(tape.value(ssm.dt).data().iter().all(|&v| v > 0.0));
}

#[test]
fn batched_encode_matches_single() {
    let (store, m) = model(tiny_config(), 10);
    let p = prepared(&mut Rng::new(11, "data"), &[9, 4, 13, 2]);
    let refs: Vec<&PreparedTrajectory> = p.iter().collect();
    let batch = PackedBatch::new(&refs).unwrap();
    let tape = Tape::inference(&store);
    let z = tape.tensor(m.encode(&tape, &batch).unwrap());
    let singles = m.embed(&store, &p).unwrap();
    for (b, s) in singles.iter().enumerate() {
        for (a, w) in z.row(b).iter().zip(s) {
            assert!((a - w).abs() <= 1e-5);
        }
    }
}

#[test]
fn block_output_is_causal() {
    let (store, m) = model(tiny_config(), 12);
    let mut rng = Rng::new(13, "z");
    let n = 7;
    let z = rng.normal_tensor::<f64>(&[n, 8], 1.0);
    let mv = rng.uniform_tensor::<f64>(&[n, 3], 1.0);
    let run = |z: Tensor<f64>| {
        let tape = Tape::inference(&store);
        let zv = tape.constant(z);
        let mvv = tape.constant(mv.clone());
        let out = m.blocks[0].forward(&tape, zv, mvv, &SeqLayout::single(n), m.scan_mode()).unwrap();
        tape.tensor(out)
    };
    let base = run(z.clone());
    for k in 0..n {
        let mut zp = z.clone();
        for c in 0..8 {
            zp.data_mut()[k * 8 + c] += 0.5;
        }
        let pert = run(zp);
        for i in 0..k {
            assert_eq!(base.row(i), pert.row(i), "row {i} moved after perturbing {k}");
        }
        assert_ne!(base.row(k), pert.row(k));
    }
}

#[test]
fn encode_gradient_matches_finite_differences() {
    let (store, m) = model(tiny_config(), 14);
    let p = prepared(&mut Rng::new(15, "data"), &[6, 4]);
    let refs: Vec<&PreparedTrajectory> = p.iter().collect();
    let batch = PackedBatch::new(&refs).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let proj = Rng::new(16, "proj");
    let rep = check_params(&store, &ids, 6, DEFAULT_STEP, |tape| {
        let z = m.encode(tape, &batch)?;
        project(tape, z, &mut proj.clone())
    })
    .unwrap();
    assert!(rep.max_rel <= 1e-4, "{rep:?}");
}

#[test]
fn short_trajectory_is_an_input_error() {
    let t = Trajectory::new(1, vec![TrajectoryPoint::new(104.0, 30.6, 100)]);
    let scaler = FeatureScaler {
        min: vec![0.0; 5],
        max: vec![1.0; 5],
    };
    assert!(matches!(prepare(&t, &scaler), Err(trajmamba::Error::Input(_))));
}
