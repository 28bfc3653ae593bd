//! Dual-view contrastive pre-training of the trajectory encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{info_nce_loss, row_max_alignment, similarity, similarity_matrix};
use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::features::{prepare, FeatureScaler, PackedBatch, PreparedTrajectory, Trajectory};
use crate::geo::{EntityTexts, PoiSet, RoadNetwork, TextEmbeddingProvider, ViewDims, ViewEncoder};
use crate::mamba::{TrajMamba, TrajMambaConfig};
use crate::par;
use crate::tensor::checkpoint::{write_atomic, Checkpoint};
use crate::tensor::optim::Adam;
use crate::tensor::rng::Rng;
use crate::tensor::{GradAccum, Gradients, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const LOG_TAU: &str = "temperature.log_tau";
pub const CONFIG_FILE: &str = "pretrain.json";
/// Initial temperature; the logit scale `1 / tau` starts at `1 / 0.07`.
pub const INIT_TAU: f64 = 0.07;
const EPOCHS_DONE: &str = "train.epochs_done";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub use_road: bool,
    pub use_poi: bool,
    pub view_heads: usize,
    pub view_layers: usize,
    pub encoder: TrajMambaConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            seed: 42,
            use_road: true,
            use_poi: true,
            view_heads: 4,
            view_layers: 2,
            encoder: TrajMambaConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !self.use_road && !self.use_poi {
            return Err(Error::Config("at least one of use_road and use_poi must be enabled".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.view_layers == 0 || self.view_heads == 0 || !self.encoder.embed_dim.is_multiple_of(self.view_heads) {
            return Err(Error::Config(format!(
                "view encoder needs layers >= 1 and heads dividing {}",
                self.encoder.embed_dim
            )));
        }
        self.encoder.validate()
    }
}

/// Frozen text vectors of every road segment and POI.
#[derive(Clone, Debug)]
pub struct SemanticContext<T> {
    pub roads: EntityTexts<T>,
    pub pois: EntityTexts<T>,
}

impl<T: Scalar> SemanticContext<T> {
    pub fn build(provider: &dyn TextEmbeddingProvider, net: &RoadNetwork, pois: &PoiSet) -> Result<Self> {
        let road_descs: Vec<&str> = net.edges().iter().map(|e| e.desc.as_str()).collect();
        let poi_descs: Vec<&str> = pois.pois().iter().map(|p| p.desc.as_str()).collect();
        Ok(Self {
            roads: EntityTexts::build(provider, "road", &road_descs)?,
            pois: EntityTexts::build(provider, "poi", &poi_descs)?,
        })
    }
}

/// A prepared trajectory with its matched edges and nearest POIs.
#[derive(Clone, Debug)]
pub struct Example {
    pub prepared: PreparedTrajectory,
    pub edges: Vec<usize>,
    pub pois: Vec<usize>,
}

/// Joins trajectories with their annotations by id.
pub fn examples(trajs: &[Trajectory], anns: &[Annotation], scaler: &FeatureScaler) -> Result<Vec<Example>> {
    let by_id: HashMap<u64, &Annotation> = anns.iter().map(|a| (a.traj_id, a)).collect();
    par::map(trajs, |t| {
        let a = by_id
            .get(&t.id)
            .ok_or_else(|| Error::Input(format!("trajectory {} has no annotation; run annotate first", t.id)))?;
        if a.edges.len() != t.len() || a.pois.len() != t.len() {
            return Err(Error::Input(format!(
                "annotation of trajectory {} has {} rows for {} points",
                t.id,
                a.edges.len(),
                t.len()
            )));
        }
        Ok(Example {
            prepared: prepare(t, scaler)?,
            edges: a.edges.clone(),
            pois: a.pois.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Encoder, both view encoders and the temperature.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub encoder: TrajMamba,
    pub road: ViewEncoder,
    pub poi: ViewEncoder,
    pub log_tau: ParamId,
}

impl PretrainModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &PretrainConfig, ctx: &SemanticContext<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed, "init");
        let encoder = TrajMamba::new(store, &mut rng, cfg.encoder.clone())?;
        let view = |entities, text_dim| ViewDims {
            entities,
            text_dim,
            embed: cfg.encoder.embed_dim,
            heads: cfg.view_heads,
            layers: cfg.view_layers,
        };
        let road = ViewEncoder::new(store, &mut rng, "road", view(ctx.roads.len(), ctx.roads.dim()))?;
        let poi = ViewEncoder::new(store, &mut rng, "poi", view(ctx.pois.len(), ctx.pois.dim()))?;
        let log_tau = store.add(LOG_TAU, Tensor::scalar(T::of(INIT_TAU.ln())))?;
        Ok(Self {
            encoder,
            road,
            poi,
            log_tau,
        })
    }
}

/// Losses of one batch; a disabled view has no loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub road: Option<f64>,
    pub poi: Option<f64>,
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub road_loss: Option<f64>,
    pub poi_loss: Option<f64>,
    pub tau: f64,
}

/// Header `epoch,mean_loss,road_loss,poi_loss,tau`; disabled views are empty.
pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in curve {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<EpochStats>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

/// Per-trajectory forward graph kept alive between the two phases of a step.
struct Pass<'p, T: Scalar> {
    tape: Tape<'p, T>,
    z: Var,
    road: Option<Var>,
    poi: Option<Var>,
}

/// Owns one training run: parameters, optimizer state and the scaler.
pub struct Trainer<T: Scalar> {
    pub cfg: PretrainConfig,
    pub model: PretrainModel,
    pub store: ParamStore<T>,
    pub opt: Adam<T>,
    pub scaler: FeatureScaler,
    pub epochs_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: PretrainConfig, scaler: FeatureScaler, ctx: &SemanticContext<T>) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = PretrainModel::new(&mut store, &cfg, ctx)?;
        let opt = Adam::new(&store, cfg.lr);
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            scaler,
            epochs_done: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.model.log_tau).data()[0].f64().exp()
    }

    fn forward_one<'p>(&'p self, ex: &Example, ctx: &SemanticContext<T>, tape: Tape<'p, T>) -> Result<Pass<'p, T>> {
        let batch = PackedBatch::single(&ex.prepared)?;
        let z = self.model.encoder.encode(&tape, &batch)?;
        let road = match self.cfg.use_road {
            true => Some(self.model.road.forward(&tape, &[&ex.edges], &ctx.roads)?),
            false => None,
        };
        let poi = match self.cfg.use_poi {
            true => Some(self.model.poi.forward(&tape, &[&ex.pois], &ctx.pois)?),
            false => None,
        };
        Ok(Pass { tape, z, road, poi })
    }

    /// Loss and summed parameter gradients of one batch.
    ///
    /// Each trajectory is encoded on its own tape in parallel; a head tape
    /// computes the contrastive losses from the stacked embeddings, and its
    /// input gradients seed the per-trajectory backward passes. Gradients are
    /// summed in batch order, so results do not depend on thread count.
    pub fn batch_gradients(&self, batch: &[&Example], ctx: &SemanticContext<T>) -> Result<(StepLoss, GradAccum<T>)> {
        if batch.len() < 2 {
            return Err(Error::Input(format!("contrastive batch needs at least 2 trajectories, got {}", batch.len())));
        }
        let passes: Vec<Pass<'_, T>> = par::map_owned(batch.to_vec(), |ex| self.forward_one(ex, ctx, Tape::new(&self.store)))
            .into_iter()
            .collect::<Result<_>>()?;
        let stack = |pick: fn(&Pass<'_, T>) -> Option<Var>| -> Result<Option<Tensor<T>>> {
            let mut data = Vec::new();
            for p in &passes {
                match pick(p) {
                    Some(v) => data.extend_from_slice(p.tape.value(v).data()),
                    None => return Ok(None),
                }
            }
            let e = data.len() / passes.len();
            Ok(Some(Tensor::new([passes.len(), e], data)?))
        };
        let z = stack(|p| Some(p.z))?.expect("encoder output");
        let r = stack(|p| p.road)?;
        let q = stack(|p| p.poi)?;

        let head = Tape::new(&self.store);
        let lt = head.param(self.model.log_tau);
        let zv = head.input(z, true);
        let view_loss = |t: Option<Tensor<T>>| -> Result<Option<(Var, Var)>> {
            t.map(|t| {
                let v = head.input(t, true);
                let s = similarity(&head, zv, v)?;
                Ok((v, info_nce_loss(&head, s, lt)?))
            })
            .transpose()
        };
        let road = view_loss(r)?;
        let poi = view_loss(q)?;
        let total = match (road, poi) {
            (Some((_, a)), Some((_, b))) => head.scale(head.add(a, b)?, T::of(0.5)),
            (Some((_, a)), None) | (None, Some((_, a))) => a,
            (None, None) => unreachable!("validated config enables a view"),
        };
        let scalar = |v: Var| head.value(v).data()[0].f64();
        let loss = StepLoss {
            total: scalar(total),
            road: road.map(|(_, l)| scalar(l)),
            poi: poi.map(|(_, l)| scalar(l)),
        };
        let hg = head.backward_scalar(total)?;
        let rows = |v: Option<(Var, Var)>| -> Option<Vec<T>> { v.and_then(|(v, _)| hg.get(v).map(<[T]>::to_vec)) };
        let dz = hg.get(zv).expect("encoder gradient").to_vec();
        let (dr, dq) = (rows(road), rows(poi));
        let e = self.cfg.encoder.embed_dim;
        let row = |g: &[T], i: usize| g[i * e..(i + 1) * e].to_vec();

        let work: Vec<(Pass<'_, T>, Vec<(Var, Vec<T>)>)> = passes
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut seeds = vec![(p.z, row(&dz, i))];
                if let (Some(v), Some(g)) = (p.road, &dr) {
                    seeds.push((v, row(g, i)));
                }
                if let (Some(v), Some(g)) = (p.poi, &dq) {
                    seeds.push((v, row(g, i)));
                }
                (p, seeds)
            })
            .collect();
        let grads: Vec<Result<Gradients<T>>> = par::map_owned(work, |(p, seeds)| p.tape.backward(&seeds));

        let mut acc = GradAccum::new(&self.store);
        acc.add(&self.store, &hg);
        for g in grads {
            acc.add(&self.store, &g?);
        }
        Ok((loss, acc))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&Example], ctx: &SemanticContext<T>) -> Result<StepLoss> {
        let (loss, grads) = self.batch_gradients(batch, ctx)?;
        if !loss.total.is_finite() {
            return Err(Error::Input(format!("non-finite training loss {}", loss.total)));
        }
        self.opt.step(&mut self.store, &grads);
        Ok(loss)
    }

    /// Shuffled full batches of `epoch` (1-based); the remainder is dropped.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(self.cfg.seed, &format!("shuffle/epoch{epoch}")).shuffle(&mut order);
        order.chunks_exact(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn run_epoch(&mut self, data: &[Example], ctx: &SemanticContext<T>) -> Result<EpochStats> {
        let epoch = self.epochs_done + 1;
        let batches = self.epoch_batches(data.len(), epoch);
        if batches.is_empty() {
            return Err(Error::Config(format!(
                "{} training trajectories cannot fill one batch of {}",
                data.len(),
                self.cfg.batch_size
            )));
        }
        let (mut total, mut road, mut poi) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let l = self.step(&batch, ctx)?;
            total += l.total;
            road += l.road.unwrap_or(0.0);
            poi += l.poi.unwrap_or(0.0);
        }
        let k = batches.len() as f64;
        self.epochs_done = epoch;
        Ok(EpochStats {
            epoch,
            mean_loss: total / k,
            road_loss: self.cfg.use_road.then_some(road / k),
            poi_loss: self.cfg.use_poi.then_some(poi / k),
            tau: self.tau(),
        })
    }

    /// Trains until `cfg.epochs` epochs are done, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        data: &[Example],
        ctx: &SemanticContext<T>,
        mut on_epoch: impl FnMut(&Self, &EpochStats) -> Result<()>,
    ) -> Result<Vec<EpochStats>> {
        let mut curve = Vec::new();
        while self.epochs_done < self.cfg.epochs {
            let stats = self.run_epoch(data, ctx)?;
            on_epoch(self, &stats)?;
            curve.push(stats);
        }
        Ok(curve)
    }

    /// Inference embeddings and views of `data`, in order.
    #[allow(clippy::type_complexity)]
    pub fn embed_views(&self, data: &[Example], ctx: &SemanticContext<T>) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>, Vec<Vec<T>>)> {
        let rows = par::map(data, |ex| {
            let pass = self.forward_one(ex, ctx, Tape::inference(&self.store))?;
            let get = |v: Option<Var>| v.map(|v| pass.tape.value(v).data().to_vec()).unwrap_or_default();
            Ok::<_, Error>((get(Some(pass.z)), get(pass.road), get(pass.poi)))
        });
        let mut out = (Vec::new(), Vec::new(), Vec::new());
        for r in rows {
            let (z, a, b) = r?;
            out.0.push(z);
            out.1.push(a);
            out.2.push(b);
        }
        Ok(out)
    }

    /// Share of rows, over consecutive full batches of `data`, where the
    /// matching road (resp. POI) view has the highest similarity.
    pub fn alignment(&self, data: &[Example], ctx: &SemanticContext<T>) -> Result<(Option<f64>, Option<f64>)> {
        let (z, r, p) = self.embed_views(data, ctx)?;
        let b = self.cfg.batch_size;
        if data.len() < b {
            return Err(Error::Config(format!("{} held-out trajectories cannot fill one batch of {b}", data.len())));
        }
        let score = |views: &[Vec<T>], on: bool| -> Result<Option<f64>> {
            if !on {
                return Ok(None);
            }
            let (mut hits, mut n) = (0.0, 0usize);
            for start in (0..=data.len() - b).step_by(b) {
                let pack = |v: &[Vec<T>]| Tensor::new([b, v[0].len()], v[start..start + b].concat());
                let s = similarity_matrix(&pack(&z)?, &pack(views)?)?;
                hits += row_max_alignment(&s)? * b as f64;
                n += b;
            }
            Ok(Some(hits / n as f64))
        };
        Ok((score(&r, self.cfg.use_road)?, score(&p, self.cfg.use_poi)?))
    }

    /// Parameters, optimizer state, scaler and epoch counter.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_store(&self.store)?;
        for (name, t) in self.opt.export(&self.store) {
            ck.push(name, &t)?;
        }
        self.scaler.save_into(&mut ck)?;
        ck.push(EPOCHS_DONE, &Tensor::scalar(self.epochs_done as f32))?;
        Ok(ck)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint()?.save(dir)?;
        write_atomic(&dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(&self.cfg)?)
    }

    /// Restores a run saved by [`Trainer::save`]; `cfg` may raise `epochs`
    /// but must otherwise match the saved configuration.
    pub fn load(dir: &Path, ctx: &SemanticContext<T>, epochs: Option<usize>) -> Result<Self> {
        let mut cfg = load_config(dir)?;
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        let ck = Checkpoint::load(dir)?;
        let scaler = FeatureScaler::load_from(&ck)?;
        let mut t = Self::new(cfg, scaler, ctx)?;
        ck.load_store(&mut t.store)?;
        t.opt.import(&t.store, |name| ck.get(name).map(|v| v.cast()))?;
        t.epochs_done = ck.require(EPOCHS_DONE)?.data()[0] as usize;
        Ok(t)
    }
}

pub fn load_config(dir: &Path) -> Result<PretrainConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Encoder and scaler restored from a pre-training checkpoint, for inference
/// and downstream tasks.
pub fn load_encoder<T: Scalar>(dir: &Path) -> Result<(TrajMamba, ParamStore<T>, FeatureScaler)> {
    let cfg = load_config(dir)?;
    let ck = Checkpoint::load(dir)?;
    let scaler = FeatureScaler::load_from(&ck)?;
    let mut store = ParamStore::new();
    let encoder = TrajMamba::new(&mut store, &mut Rng::new(cfg.seed, "init"), cfg.encoder)?;
    ck.load_store(&mut store)?;
    Ok((encoder, store, scaler))
}
