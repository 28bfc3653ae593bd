//! The command-line stages as library calls, each driven by a [`RunConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::{bench_scaling, write_bench_csv, BenchRow};
use crate::config::{Precision, RunConfig};
use crate::data::{self, DatasetSplits};
use crate::error::{Error, Result};
use crate::features::{prepare, FeatureScaler, Trajectory};
use crate::geo::{FileTable, HashStub, PoiSet, RemoteProvider, RoadNetwork, TextEmbeddingProvider};
use crate::geo::text::STUB_DIM;
use crate::pretrain::{examples, load_encoder, write_loss_curve, EpochStats, SemanticContext, Trainer};
use crate::tasks::{simsearch, train_eval_regression, EvalReport, Task};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Scalar, Tensor};

pub const RAW_TRAJECTORIES: &str = "raw_trajectories.csv";
pub const ROADS: &str = "roads.json";
pub const POIS: &str = "pois.csv";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const SPLITS: &str = "splits.json";
pub const ANNOTATIONS: &str = "annotations.csv";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const EMBEDDINGS: &str = "embeddings";
pub const REPORTS_CSV: &str = "reports.csv";
pub const BENCH_CSV: &str = "bench.csv";
const TEXT_CACHE: &str = "text_cache";

fn file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the raw trajectories, road network and POIs.
pub fn gen_data(cfg: &RunConfig) -> Result<usize> {
    let (city, trajs) = data::gen_data(cfg.seed, cfg.num_traj, cfg.city_width, cfg.city_height)?;
    ensure_dir(&cfg.data_dir)?;
    data::write_trajectories(&file(&cfg.data_dir, RAW_TRAJECTORIES), &trajs)?;
    city.network.save(&file(&cfg.data_dir, ROADS))?;
    city.pois.save(&file(&cfg.data_dir, POIS))?;
    Ok(trajs.len())
}

/// Decimates, filters and splits the raw trajectories.
pub fn preprocess(cfg: &RunConfig) -> Result<DatasetSplits> {
    let raw = data::read_trajectories(&file(&cfg.data_dir, RAW_TRAJECTORIES))?;
    let (kept, splits) = data::preprocess(&raw)?;
    data::write_trajectories(&file(&cfg.data_dir, TRAJECTORIES), &kept)?;
    splits.save(&file(&cfg.data_dir, SPLITS))?;
    Ok(splits)
}

pub fn load_geo(cfg: &RunConfig) -> Result<(RoadNetwork, PoiSet)> {
    Ok((
        RoadNetwork::load(&file(&cfg.data_dir, ROADS))?,
        PoiSet::load(&file(&cfg.data_dir, POIS))?,
    ))
}

pub fn annotate(cfg: &RunConfig) -> Result<usize> {
    let trajs = data::read_trajectories(&file(&cfg.data_dir, TRAJECTORIES))?;
    let (net, pois) = load_geo(cfg)?;
    let anns = data::annotate(&trajs, &net, &pois)?;
    data::write_annotations(&file(&cfg.data_dir, ANNOTATIONS), &anns)?;
    Ok(anns.len())
}

/// Table file if configured, else the environment endpoint if set, else the
/// hash stub.
pub fn text_provider(cfg: &RunConfig) -> Result<Box<dyn TextEmbeddingProvider>> {
    if let Some(dir) = &cfg.text_table {
        return Ok(Box::new(FileTable::load(dir)?));
    }
    if let Some(remote) = RemoteProvider::from_env(STUB_DIM, Some(cfg.data_dir.join(TEXT_CACHE)))? {
        return Ok(Box::new(remote));
    }
    Ok(Box::new(HashStub::default()))
}

/// Preprocessed trajectories grouped as train, validation and test.
pub fn load_splits(cfg: &RunConfig) -> Result<[Vec<Trajectory>; 3]> {
    let trajs = data::read_trajectories(&file(&cfg.data_dir, TRAJECTORIES))?;
    let splits = DatasetSplits::load(&file(&cfg.data_dir, SPLITS))?;
    let by_id: BTreeMap<u64, &Trajectory> = trajs.iter().map(|t| (t.id, t)).collect();
    let pick = |ids: &[u64]| -> Result<Vec<Trajectory>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|t| (*t).clone())
                    .ok_or_else(|| Error::Input(format!("split lists trajectory {id}, which is not in {TRAJECTORIES}")))
            })
            .collect()
    };
    Ok([pick(&splits.train)?, pick(&splits.val)?, pick(&splits.test)?])
}

/// Trains on the training split, checkpointing after every epoch.
pub fn pretrain(cfg: &RunConfig) -> Result<Vec<EpochStats>> {
    match cfg.precision {
        Precision::F32 => pretrain_as::<f32>(cfg),
        Precision::F64 => pretrain_as::<f64>(cfg),
    }
}

fn pretrain_as<T: Scalar>(cfg: &RunConfig) -> Result<Vec<EpochStats>> {
    let [train, _, _] = load_splits(cfg)?;
    let anns = data::read_annotations(&file(&cfg.data_dir, ANNOTATIONS))?;
    let (net, pois) = load_geo(cfg)?;
    let provider = text_provider(cfg)?;
    let ctx = SemanticContext::<T>::build(provider.as_ref(), &net, &pois)?;
    let scaler = FeatureScaler::fit_trajectories(&train)?;
    let data = examples(&train, &anns, &scaler)?;
    let mut trainer = Trainer::<T>::new(cfg.pretrain(), scaler, &ctx)?;
    ensure_dir(&cfg.checkpoint_dir)?;
    ensure_dir(&cfg.out_dir)?;
    let curve_path = file(&cfg.out_dir, LOSS_CURVE);
    let mut curve = Vec::new();
    trainer.save(&cfg.checkpoint_dir)?;
    write_loss_curve(&curve_path, &curve)?;
    trainer.run(&data, &ctx, |t, stats| {
        curve.push(*stats);
        t.save(&cfg.checkpoint_dir)?;
        write_loss_curve(&curve_path, &curve)
    })
}

fn require_checkpoint(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.checkpoint_dir.join(crate::tensor::checkpoint::MANIFEST);
    if !manifest.exists() {
        return Err(Error::MissingPath(manifest));
    }
    Ok(())
}

/// Embeds `trajs` with the checkpointed encoder.
pub fn embed_trajectories<T: Scalar>(dir: &Path, trajs: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
    let (encoder, store, scaler) = load_encoder::<T>(dir)?;
    let prepared = trajs.iter().map(|t| prepare(t, &scaler)).collect::<Result<Vec<_>>>()?;
    let emb = encoder.embed(&store, &prepared)?;
    Ok(emb.into_iter().map(|v| v.into_iter().map(|x| x.f64()).collect()).collect())
}

/// Embeds every preprocessed trajectory into a checkpoint-format directory
/// holding one tensor per trajectory id.
pub fn embed(cfg: &RunConfig) -> Result<PathBuf> {
    require_checkpoint(cfg)?;
    let trajs = data::read_trajectories(&file(&cfg.data_dir, TRAJECTORIES))?;
    let emb = match cfg.precision {
        Precision::F32 => embed_trajectories::<f32>(&cfg.checkpoint_dir, &trajs)?,
        Precision::F64 => embed_trajectories::<f64>(&cfg.checkpoint_dir, &trajs)?,
    };
    let mut ck = Checkpoint::new();
    for (t, v) in trajs.iter().zip(emb) {
        ck.push(t.id.to_string(), &Tensor::new([v.len()], v)?)?;
    }
    let dir = file(&cfg.out_dir, EMBEDDINGS);
    ck.save(&dir)?;
    Ok(dir)
}

/// Runs `cfg.task` in `cfg.mode`; writes the JSON report and appends a CSV row.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    require_checkpoint(cfg)?;
    let metrics = match cfg.precision {
        Precision::F32 => eval_metrics::<f32>(cfg)?,
        Precision::F64 => eval_metrics::<f64>(cfg)?,
    };
    let report = EvalReport::new(cfg.task.name(), cfg.mode.name(), metrics, cfg.seed, &cfg.hash())?;
    ensure_dir(&cfg.out_dir)?;
    report.save(&report_path(cfg))?;
    report.append_csv(&file(&cfg.out_dir, REPORTS_CSV))?;
    Ok(report)
}

pub fn report_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(format!("report_{}_{}.json", cfg.task, cfg.mode))
}

fn eval_metrics<T: Scalar>(cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let [train, val, test] = load_splits(cfg)?;
    match cfg.task {
        Task::Simsearch => {
            let out = simsearch(&test, &cfg.simsearch(), |ts| embed_trajectories::<T>(&cfg.checkpoint_dir, ts))?;
            Ok(BTreeMap::from([
                ("acc@1".to_string(), out.metrics.acc1),
                ("acc@5".to_string(), out.metrics.acc5),
                ("mean_rank".to_string(), out.metrics.mean_rank),
            ]))
        }
        task => {
            let (encoder, store, scaler) = load_encoder::<T>(&cfg.checkpoint_dir)?;
            let hp = cfg.head_training();
            let out = train_eval_regression(task, cfg.mode, &encoder, &store, &scaler, [&train, &val, &test], &hp)?;
            Ok(out.metrics)
        }
    }
}

pub fn bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let rows = match cfg.precision {
        Precision::F32 => bench_scaling::<f32>(&cfg.bench_lengths, &cfg.encoder(), cfg.bench_reps, cfg.seed)?,
        Precision::F64 => bench_scaling::<f64>(&cfg.bench_lengths, &cfg.encoder(), cfg.bench_reps, cfg.seed)?,
    };
    ensure_dir(&cfg.out_dir)?;
    write_bench_csv(&file(&cfg.out_dir, BENCH_CSV), &rows)?;
    Ok(rows)
}
