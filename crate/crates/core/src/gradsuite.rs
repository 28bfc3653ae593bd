//! Finite-difference checks of every differentiable operation, the model
//! components built from them, and the full two-phase pre-training loss.

use crate::bench::synthetic_trajectory;
use crate::error::Result;
use crate::features::{prepare, FeatureScaler, PackedBatch, PreparedTrajectory};
use crate::geo::{EntityTexts, HashStub, ViewDims, ViewEncoder};
use crate::mamba::block::MOVEMENT_DIMS;
use crate::mamba::{traj_ssm, BlockDims, ScanMode, TrajMamba, TrajMambaBlock, TrajMambaConfig};
use crate::pretrain::{info_nce_loss, Example, PretrainConfig, SemanticContext, Trainer};
use crate::tensor::gradcheck::{check_inputs, check_params, project, rel_error, DEFAULT_STEP};
use crate::tensor::kernels::SeqLayout;
use crate::tensor::rng::Rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const TRIALS: usize = 20;
/// Entries perturbed per parameter tensor in the model-level checks.
const PARAM_SAMPLES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    /// Worst relative error over all trials.
    pub max_rel: f64,
}

type Trial = fn(&mut Rng, usize) -> Result<f64>;

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

fn positive(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape")
}

/// Relative error of `f` over `inputs` after a random linear projection.
fn inputs_rel<F>(rng: &mut Rng, inputs: Vec<Tensor<f64>>, f: F) -> Result<f64>
where
    F: Fn(&Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let proj = rng.derive("proj");
    let rep = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
        let y = f(t, v)?;
        project(t, y, &mut proj.clone())
    })?;
    Ok(rep.max_rel)
}

fn padded_layout(trial: usize) -> SeqLayout {
    match trial % 3 {
        0 => SeqLayout::single(3 + trial % 4),
        1 => SeqLayout::padded(vec![4, 2]),
        _ => SeqLayout::padded(vec![1, 3, 5]),
    }
}

fn trajectories(rng: &mut Rng, lens: &[usize]) -> Result<Vec<PreparedTrajectory>> {
    let trajs: Vec<_> = lens.iter().map(|&n| synthetic_trajectory(n, rng.below(1 << 30) as u64)).collect();
    let scaler = FeatureScaler::fit_trajectories(&trajs)?;
    trajs.iter().map(|t| prepare(t, &scaler)).collect()
}

fn tiny_encoder() -> TrajMambaConfig {
    TrajMambaConfig {
        embed_dim: 8,
        model_dim: 8,
        state_dim: 3,
        heads: 2,
        layers: 2,
        fourier_freqs: 2,
        conv_width: 3,
        use_mb: true,
        scan_chunk: 0,
    }
}

fn matmul(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (m, k, n) = (1 + trial % 3, 2 + trial % 4, 1 + trial % 5);
    let (ta, tb) = (trial % 2 == 1, trial / 2 % 2 == 1);
    let a = normal(rng, &if ta { [k, m] } else { [m, k] });
    let b = normal(rng, &if tb { [n, k] } else { [k, n] });
    inputs_rel(rng, vec![a, b], |t, v| t.matmul_t(v[0], ta, v[1], tb))
}

fn linear(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (r, i, o) = (1 + trial % 4, 2 + trial % 3, 1 + trial % 3);
    let inputs = vec![normal(rng, &[r, i]), normal(rng, &[i, o]), normal(rng, &[o])];
    let bias = trial.is_multiple_of(2);
    inputs_rel(rng, inputs, move |t, v| t.linear(v[0], v[1], bias.then_some(v[2])))
}

fn add_bias(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (r, c) = (1 + trial % 4, 1 + trial % 5);
    let inputs = vec![normal(rng, &[r, c]), normal(rng, &[c])];
    inputs_rel(rng, inputs, |t, v| t.add_bias(v[0], v[1]))
}

fn binary(rng: &mut Rng, trial: usize, op: fn(&Tape<'_, f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let shape = [1 + trial % 4, 1 + trial % 3];
    let inputs = vec![normal(rng, &shape), normal(rng, &shape)];
    inputs_rel(rng, inputs, move |t, v| op(t, v[0], v[1]))
}

fn unary(rng: &mut Rng, trial: usize, op: fn(&Tape<'_, f64>, Var) -> Var) -> Result<f64> {
    let x = normal(rng, &[1 + trial % 4, 1 + trial % 5]);
    inputs_rel(rng, vec![x], move |t, v| Ok(op(t, v[0])))
}

fn fourier(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (rows, f) = (1 + trial % 5, 1 + trial % 3);
    let inputs = vec![positive(rng, &[rows, 1], -2.0, 2.0), normal(rng, &[f]), normal(rng, &[f])];
    inputs_rel(rng, inputs, |t, v| t.fourier(v[0], v[1], v[2]))
}

fn causal_conv(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (seq, seqs, d, k) = (2 + trial % 4, 1 + trial % 2, 1 + trial % 3, 1 + trial % 4);
    let inputs = vec![normal(rng, &[seq * seqs, d]), normal(rng, &[d, k])];
    inputs_rel(rng, inputs, move |t, v| t.causal_conv(v[0], v[1], seq))
}

fn rmsnorm(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (r, c) = (1 + trial % 3, 2 + trial % 4);
    let inputs = vec![normal(rng, &[r, c]), normal(rng, &[c])];
    inputs_rel(rng, inputs, |t, v| t.rmsnorm(v[0], v[1]))
}

fn layernorm(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (r, c) = (1 + trial % 3, 2 + trial % 4);
    let inputs = vec![normal(rng, &[r, c]), normal(rng, &[c]), normal(rng, &[c])];
    inputs_rel(rng, inputs, |t, v| t.layernorm(v[0], v[1], v[2]))
}

fn slice_cols(rng: &mut Rng, trial: usize) -> Result<f64> {
    let c = 2 + trial % 5;
    let start = trial % (c - 1);
    let len = 1 + (trial / 3) % (c - start);
    let x = normal(rng, &[1 + trial % 3, c]);
    inputs_rel(rng, vec![x], move |t, v| t.slice_cols(v[0], start, len))
}

fn concat_cols(rng: &mut Rng, trial: usize) -> Result<f64> {
    let r = 1 + trial % 3;
    let parts: Vec<_> = (0..2 + trial % 3).map(|i| normal(rng, &[r, 1 + (i + trial) % 3])).collect();
    inputs_rel(rng, parts, |t, v| t.concat_cols(v))
}

fn attention(rng: &mut Rng, trial: usize) -> Result<f64> {
    let layout = padded_layout(trial);
    let heads = 1 + trial % 2;
    let d = heads * (1 + trial % 3);
    let rows = layout.rows();
    let inputs = vec![normal(rng, &[rows, d]), normal(rng, &[rows, d]), normal(rng, &[rows, d])];
    inputs_rel(rng, inputs, move |t, v| {
        let o = t.attention(v[0], v[1], v[2], heads, &layout)?;
        // padding rows are unconstrained; pool over valid rows only
        t.mean_pool(o, &layout)
    })
}

fn mean_pool(rng: &mut Rng, trial: usize) -> Result<f64> {
    let layout = padded_layout(trial);
    let x = normal(rng, &[layout.rows(), 1 + trial % 4]);
    inputs_rel(rng, vec![x], move |t, v| t.mean_pool(v[0], &layout))
}

fn reductions(rng: &mut Rng, trial: usize) -> Result<f64> {
    let x = normal(rng, &[1 + trial % 4, 1 + trial % 3]);
    let mean = trial.is_multiple_of(2);
    inputs_rel(rng, vec![x], move |t, v| Ok(if mean { t.mean_all(v[0]) } else { t.sum_all(v[0]) }))
}

fn gather(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (rows, cols) = (3 + trial % 4, 1 + trial % 3);
    let mut store = ParamStore::new();
    let table = store.add("table", normal(rng, &[rows, cols]))?;
    let idx: Vec<usize> = (0..2 + trial % 5).map(|_| rng.below(rows)).collect();
    let proj = rng.derive("proj");
    let rep = check_params(&store, &[table], usize::MAX, DEFAULT_STEP, |t| {
        let g = t.gather(table, &idx)?;
        project(t, g, &mut proj.clone())
    })?;
    Ok(rep.max_rel)
}

fn ssm_scan(rng: &mut Rng, trial: usize) -> Result<f64> {
    let layout = padded_layout(trial);
    let rows = layout.rows();
    let (heads, state, p) = (1 + trial % 2, 1 + trial % 3, 1 + trial % 2);
    let inputs = vec![
        normal(rng, &[rows, heads * p]),
        positive(rng, &[rows, heads], 0.05, 1.0),
        positive(rng, &[heads], -1.5, -0.2),
        normal(rng, &[rows, state]),
        normal(rng, &[rows, state]),
    ];
    inputs_rel(rng, inputs, move |t, v| {
        let y = traj_ssm(t, v[0], v[1], v[2], v[3], v[4], &layout, ScanMode::Reference)?;
        t.mean_pool(y, &layout)
    })
}

fn info_nce(rng: &mut Rng, trial: usize) -> Result<f64> {
    let b = 2 + trial % 5;
    let inputs = vec![normal(rng, &[b, b]), positive(rng, &[1], -1.0, 0.5)];
    inputs_rel(rng, inputs, |t, v| info_nce_loss(t, v[0], v[1]))
}

fn block(rng: &mut Rng, trial: usize) -> Result<f64> {
    let layout = padded_layout(trial);
    let dims = BlockDims {
        embed: 4,
        model: 4,
        state: 2,
        heads: 2,
        conv: 1 + trial % 3,
    };
    let mut store = ParamStore::new();
    let vanilla = trial % 4 == 3;
    let blk = TrajMambaBlock::new(&mut store, rng, "blk", dims, vanilla)?;
    let z = normal(rng, &[layout.rows(), 4]);
    let m = normal(rng, &[layout.rows(), MOVEMENT_DIMS]);
    let ids: Vec<_> = store.ids().collect();
    let proj = rng.derive("proj");
    let rep = check_params(&store, &ids, PARAM_SAMPLES, DEFAULT_STEP, |t| {
        let (zv, mv) = (t.constant(z.clone()), t.constant(m.clone()));
        let y = blk.forward(t, zv, mv, &layout, ScanMode::Reference)?;
        let pooled = t.mean_pool(y, &layout)?;
        project(t, pooled, &mut proj.clone())
    })?;
    Ok(rep.max_rel)
}

fn view_encoder(rng: &mut Rng, trial: usize) -> Result<f64> {
    let entities = 6;
    let descs: Vec<String> = (0..entities).map(|i| format!("entity {i} trial {trial}")).collect();
    let refs: Vec<&str> = descs.iter().map(String::as_str).collect();
    let texts = EntityTexts::<f64>::build(&HashStub { dim: 3 }, "road", &refs)?;
    let mut store = ParamStore::new();
    let dims = ViewDims {
        entities,
        text_dim: 3,
        embed: 4,
        heads: 2,
        layers: 1 + trial % 2,
    };
    let enc = ViewEncoder::new(&mut store, rng, "road", dims)?;
    let seqs: Vec<Vec<usize>> = (0..1 + trial % 3)
        .map(|_| (0..1 + rng.below(4)).map(|_| rng.below(entities)).collect())
        .collect();
    let seq_refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let ids: Vec<_> = store.ids().collect();
    let proj = rng.derive("proj");
    let rep = check_params(&store, &ids, PARAM_SAMPLES, DEFAULT_STEP, |t| {
        let y = enc.forward(t, &seq_refs, &texts)?;
        project(t, y, &mut proj.clone())
    })?;
    Ok(rep.max_rel)
}

fn encoder(rng: &mut Rng, trial: usize) -> Result<f64> {
    let mut cfg = tiny_encoder();
    cfg.use_mb = trial % 4 != 3;
    let mut store = ParamStore::new();
    let model = TrajMamba::new(&mut store, rng, cfg)?;
    let lens: Vec<usize> = (0..1 + trial % 3).map(|i| 2 + (trial + 3 * i) % 6).collect();
    let prepared = trajectories(rng, &lens)?;
    let refs: Vec<&PreparedTrajectory> = prepared.iter().collect();
    let batch = PackedBatch::new(&refs)?;
    let ids: Vec<_> = store.ids().collect();
    let proj = rng.derive("proj");
    let rep = check_params(&store, &ids, PARAM_SAMPLES, DEFAULT_STEP, |t| {
        let z = model.encode(t, &batch)?;
        project(t, z, &mut proj.clone())
    })?;
    Ok(rep.max_rel)
}

/// Parallel per-trajectory tapes, the InfoNCE head tape and gradient
/// accumulation, against finite differences of the batch loss.
fn pretrain_loss(rng: &mut Rng, trial: usize) -> Result<f64> {
    let (roads, pois) = (7, 5);
    let mk = |kind: &str, n: usize| -> Result<EntityTexts<f64>> {
        let descs: Vec<String> = (0..n).map(|i| format!("{kind} {i}")).collect();
        let refs: Vec<&str> = descs.iter().map(String::as_str).collect();
        EntityTexts::build(&HashStub { dim: 4 }, kind, &refs)
    };
    let ctx = SemanticContext {
        roads: mk("road", roads)?,
        pois: mk("poi", pois)?,
    };
    let cfg = PretrainConfig {
        batch_size: 3,
        seed: trial as u64,
        use_road: trial % 3 != 1,
        use_poi: trial % 3 != 2,
        view_heads: 2,
        view_layers: 1,
        encoder: tiny_encoder(),
        ..PretrainConfig::default()
    };
    let lens: Vec<usize> = (0..3).map(|i| 2 + (trial + 2 * i) % 5).collect();
    let prepared = trajectories(rng, &lens)?;
    let scaler = FeatureScaler {
        min: vec![0.0; 5],
        max: vec![1.0; 5],
    };
    let data: Vec<Example> = prepared
        .into_iter()
        .map(|p| {
            let n = p.len();
            Example {
                prepared: p,
                edges: (0..n).map(|_| rng.below(roads)).collect(),
                pois: (0..n).map(|_| rng.below(pois)).collect(),
            }
        })
        .collect();
    let batch: Vec<&Example> = data.iter().collect();
    let mut trainer = Trainer::<f64>::new(cfg, scaler, &ctx)?;
    let (_, grads) = trainer.batch_gradients(&batch, &ctx)?;

    let ids: Vec<_> = trainer.store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let numel = trainer.store.get(id).numel();
        let stride = numel.div_ceil(PARAM_SAMPLES).max(1);
        let picks: Vec<usize> = (0..numel).step_by(stride).collect();
        let analytic: Vec<f64> = picks
            .iter()
            .map(|&i| grads.get(id).map_or(0.0, |g| g[i]))
            .collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = trainer.store.get(id).data()[i];
            trainer.store.get_mut(id).data_mut()[i] = orig + DEFAULT_STEP;
            let up = trainer.batch_gradients(&batch, &ctx)?.0.total;
            trainer.store.get_mut(id).data_mut()[i] = orig - DEFAULT_STEP;
            let down = trainer.batch_gradients(&batch, &ctx)?.0.total;
            trainer.store.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * DEFAULT_STEP));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Every check, in a fixed order.
pub fn checks() -> Vec<(&'static str, Trial)> {
    vec![
        ("matmul", matmul),
        ("linear", linear),
        ("add_bias", add_bias),
        ("add", |r, i| binary(r, i, |t, a, b| t.add(a, b))),
        ("sub", |r, i| binary(r, i, |t, a, b| t.sub(a, b))),
        ("mul", |r, i| binary(r, i, |t, a, b| t.mul(a, b))),
        ("scale", |r, i| unary(r, i, |t, x| t.scale(x, -1.7))),
        ("exp", |r, i| unary(r, i, |t, x| t.exp(x))),
        ("silu", |r, i| unary(r, i, |t, x| t.silu(x))),
        ("softplus", |r, i| unary(r, i, |t, x| t.softplus(x))),
        ("gelu", |r, i| unary(r, i, |t, x| t.gelu(x))),
        ("fourier", fourier),
        ("causal_conv", causal_conv),
        ("rmsnorm", rmsnorm),
        ("layernorm", layernorm),
        ("slice_cols", slice_cols),
        ("concat_cols", concat_cols),
        ("attention", attention),
        ("mean_pool", mean_pool),
        ("sum_all/mean_all", reductions),
        ("gather", gather),
        ("traj_ssm", ssm_scan),
        ("info_nce", info_nce),
        ("traj_mamba_block", block),
        ("view_encoder", view_encoder),
        ("traj_mamba_encode", encoder),
        ("encode+info_nce", pretrain_loss),
    ]
}

/// Runs every check `trials` times; trial `i` of check `op` draws from
/// `Rng::new(seed, "gradsuite/{op}")`.
pub fn run(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    checks()
        .into_iter()
        .map(|(op, f)| {
            let mut rng = Rng::new(seed, &format!("gradsuite/{op}"));
            let mut max_rel: f64 = 0.0;
            for trial in 0..trials {
                max_rel = max_rel.max(f(&mut rng, trial)?);
            }
            Ok(OpCheck { op, trials, max_rel })
        })
        .collect()
}
