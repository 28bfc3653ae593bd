//! Destination prediction and arrival-time estimation from prefix embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{error_metrics, regression_metrics};
use crate::error::{Error, Result};
use crate::features::{haversine, prepare, FeatureScaler, PackedBatch, PreparedTrajectory, Trajectory};
use crate::mamba::TrajMamba;
use crate::par;
use crate::tensor::nn::Linear;
use crate::tensor::optim::Adam;
use crate::tensor::rng::Rng;
use crate::tensor::{GradAccum, ParamStore, Scalar, Tape, Tensor, Var};

/// Points removed from the end of each trajectory before encoding.
pub const DROP_LAST: usize = 5;
pub const MIN_TASK_POINTS: usize = DROP_LAST + 2;
/// Arrival-time MAPE is reported only when every target is at least this long.
pub const MAPE_MIN_SECONDS: f64 = 60.0;

/// The trajectory without its last [`DROP_LAST`] points, or `None` when
/// fewer than two points would remain.
pub fn truncate_for_task(traj: &Trajectory) -> Option<Trajectory> {
    (traj.len() >= MIN_TASK_POINTS).then(|| traj.select(0..traj.len() - DROP_LAST))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Destination,
    #[serde(alias = "eta")]
    ArrivalTime,
    Simsearch,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Destination => "destination",
            Task::ArrivalTime => "arrival_time",
            Task::Simsearch => "simsearch",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "destination" => Ok(Task::Destination),
            "arrival_time" | "eta" => Ok(Task::ArrivalTime),
            "simsearch" => Ok(Task::Simsearch),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (expected destination, arrival_time or simsearch)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Only the head trains.
    Frozen,
    /// Head and encoder train together.
    Finetune,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Mode::Frozen),
            "finetune" => Ok(Mode::Finetune),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected frozen or finetune)"))),
        }
    }
}

/// Encoder input and regression targets of one trajectory.
#[derive(Clone, Debug)]
pub struct TaskSample {
    pub id: u64,
    pub prefix: Trajectory,
    /// Last point of the full trajectory.
    pub destination: (f64, f64),
    /// `t_n - t_1` of the full trajectory, seconds.
    pub travel_time: f64,
}

/// Samples for every trajectory long enough, and the number skipped.
pub fn task_samples(trajs: &[Trajectory]) -> (Vec<TaskSample>, usize) {
    let mut out = Vec::with_capacity(trajs.len());
    for t in trajs {
        if let Some(prefix) = truncate_for_task(t) {
            let last = t.points[t.len() - 1];
            out.push(TaskSample {
                id: t.id,
                prefix,
                destination: (last.lng, last.lat),
                travel_time: (last.t - t.departure()) as f64,
            });
        }
    }
    let skipped = trajs.len() - out.len();
    (out, skipped)
}

/// `Linear(E→E) → SiLU → Linear(E→out)`.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub hidden: Linear,
    pub out: Linear,
    pub out_dim: usize,
}

impl TaskHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, embed: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, "head.hidden", embed, embed, true)?,
            out: Linear::new(store, rng, "head.out", embed, out_dim, true)?,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        self.out.forward(tape, tape.silu(h))
    }

    pub fn output_dim(task: Task) -> Result<usize> {
        match task {
            Task::Destination => Ok(2),
            Task::ArrivalTime => Ok(1),
            Task::Simsearch => Err(Error::Config("similarity search has no regression head".into())),
        }
    }
}

/// Maps targets to the normalized training space and back.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Codec {
    /// Min-max over the training region.
    Coords { lng: (f64, f64), lat: (f64, f64) },
    /// Z-score over the training targets.
    Duration { mean: f64, std: f64 },
}

impl Codec {
    fn fit(task: Task, scaler: &FeatureScaler, train: &[TaskSample]) -> Result<Self> {
        match task {
            Task::Destination => Ok(Codec::Coords {
                lng: (scaler.min[3], scaler.max[3]),
                lat: (scaler.min[4], scaler.max[4]),
            }),
            Task::ArrivalTime => {
                let n = train.len() as f64;
                let mean = train.iter().map(|s| s.travel_time).sum::<f64>() / n;
                let var = train.iter().map(|s| (s.travel_time - mean).powi(2)).sum::<f64>() / n;
                Ok(Codec::Duration {
                    mean,
                    std: var.sqrt().max(1e-9),
                })
            }
            Task::Simsearch => Err(Error::Config("similarity search has no regression targets".into())),
        }
    }

    fn encode(&self, s: &TaskSample) -> Vec<f64> {
        let unit = |v: f64, (lo, hi): (f64, f64)| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        match *self {
            Codec::Coords { lng, lat } => vec![unit(s.destination.0, lng), unit(s.destination.1, lat)],
            Codec::Duration { mean, std } => vec![(s.travel_time - mean) / std],
        }
    }

    fn decode(&self, y: &[f64]) -> Vec<f64> {
        let back = |u: f64, (lo, hi): (f64, f64)| lo + u * (hi - lo);
        match *self {
            Codec::Coords { lng, lat } => vec![back(y[0], lng), back(y[1], lat)],
            Codec::Duration { mean, std } => vec![mean + y[0] * std],
        }
    }

    /// Error in metric units: meters or seconds.
    fn error(&self, decoded: &[f64], s: &TaskSample) -> f64 {
        match self {
            Codec::Coords { .. } => haversine((decoded[0], decoded[1]), s.destination),
            Codec::Duration { .. } => (decoded[0] - s.travel_time).abs(),
        }
    }
}

/// Head-training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTraining {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for HeadTraining {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 42,
        }
    }
}

/// Test metrics plus the trained parameters (encoder and head).
#[derive(Clone, Debug)]
pub struct RegressionOutcome<T> {
    pub metrics: BTreeMap<String, f64>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub skipped: usize,
    pub store: ParamStore<T>,
    pub head: TaskHead,
}

struct Split {
    samples: Vec<TaskSample>,
    prepared: Vec<PreparedTrajectory>,
    targets: Vec<Vec<f64>>,
}

impl Split {
    fn new(trajs: &[Trajectory], scaler: &FeatureScaler, codec: Option<&Codec>) -> Result<(Self, usize)> {
        let (samples, skipped) = task_samples(trajs);
        let prepared = par::map(&samples, |s| prepare(&s.prefix, scaler)).into_iter().collect::<Result<Vec<_>>>()?;
        let targets = codec.map_or_else(Vec::new, |c| samples.iter().map(|s| c.encode(s)).collect());
        Ok((
            Self {
                samples,
                prepared,
                targets,
            },
            skipped,
        ))
    }
}

fn head_outputs<T: Scalar>(head: &TaskHead, store: &ParamStore<T>, emb: &[Vec<T>]) -> Result<Vec<Vec<f64>>> {
    let e = emb[0].len();
    let tape = Tape::inference(store);
    let x = tape.constant(Tensor::new([emb.len(), e], emb.concat())?);
    let y = tape.tensor(head.forward(&tape, x)?);
    Ok((0..emb.len()).map(|i| y.row(i).iter().map(|v| v.f64()).collect()).collect())
}

fn split_errors<T: Scalar>(
    head: &TaskHead,
    store: &ParamStore<T>,
    emb: &[Vec<T>],
    split: &Split,
    codec: &Codec,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let outs = head_outputs(head, store, emb)?;
    let decoded: Vec<Vec<f64>> = outs.iter().map(|y| codec.decode(y)).collect();
    let errs = decoded.iter().zip(&split.samples).map(|(d, s)| codec.error(d, s)).collect();
    Ok((errs, decoded))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains a head on prefix embeddings with MSE on normalized targets,
/// early-stopping on validation MAE, and reports test metrics in meters
/// (destination) or seconds (arrival time), next to a naive baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_eval_regression<T: Scalar>(
    task: Task,
    mode: Mode,
    encoder: &TrajMamba,
    store: &ParamStore<T>,
    scaler: &FeatureScaler,
    splits: [&[Trajectory]; 3],
    hp: &HeadTraining,
) -> Result<RegressionOutcome<T>> {
    let out_dim = TaskHead::output_dim(task)?;
    let (train_samples, _) = task_samples(splits[0]);
    if train_samples.is_empty() {
        return Err(Error::Config(format!("no training trajectory has at least {MIN_TASK_POINTS} points")));
    }
    let codec = Codec::fit(task, scaler, &train_samples)?;
    let (train, _) = Split::new(splits[0], scaler, Some(&codec))?;
    let (val, _) = Split::new(splits[1], scaler, Some(&codec))?;
    let (test, skipped) = Split::new(splits[2], scaler, Some(&codec))?;
    if val.samples.is_empty() || test.samples.is_empty() {
        return Err(Error::Config("validation and test splits need trajectories long enough for the task".into()));
    }
    if hp.batch_size == 0 || hp.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }

    let mut work = store.clone();
    let encoder_params = work.len();
    let head = TaskHead::new(&mut work, &mut Rng::new(hp.seed, "head"), encoder.cfg.embed_dim, out_dim)?;
    let trainable: Vec<bool> = (0..work.len()).map(|i| mode == Mode::Finetune || i >= encoder_params).collect();
    let mut opt = Adam::new(&work, hp.lr);

    let frozen_train = match mode {
        Mode::Frozen => Some(encoder.embed(&work, &train.prepared)?),
        Mode::Finetune => None,
    };
    let frozen_val = match mode {
        Mode::Frozen => Some(encoder.embed(&work, &val.prepared)?),
        Mode::Finetune => None,
    };

    let mut best = (f64::INFINITY, 0usize, work.clone());
    let mut epochs_run = 0;
    for epoch in 1..=hp.max_epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        Rng::new(hp.seed, &format!("head/epoch{epoch}")).shuffle(&mut order);
        for idx in order.chunks(hp.batch_size) {
            let tape = Tape::with_trainable(&work, trainable.clone());
            let x = match &frozen_train {
                Some(emb) => {
                    let rows: Vec<T> = idx.iter().flat_map(|&i| emb[i].iter().copied()).collect();
                    tape.constant(Tensor::new([idx.len(), encoder.cfg.embed_dim], rows)?)
                }
                None => {
                    let items: Vec<&PreparedTrajectory> = idx.iter().map(|&i| &train.prepared[i]).collect();
                    encoder.encode(&tape, &PackedBatch::new(&items)?)?
                }
            };
            let y = head.forward(&tape, x)?;
            let target: Vec<f64> = idx.iter().flat_map(|&i| train.targets[i].iter().copied()).collect();
            let t = tape.constant(Tensor::from_f64([idx.len(), out_dim], &target)?);
            let d = tape.sub(y, t)?;
            let loss = tape.mean_all(tape.mul(d, d)?);
            let grads = tape.backward_scalar(loss)?;
            let mut acc = GradAccum::new(&work);
            acc.add(&work, &grads);
            drop(grads);
            drop(tape);
            opt.step(&mut work, &acc);
        }
        epochs_run = epoch;
        let val_emb = match &frozen_val {
            Some(e) => e.clone(),
            None => encoder.embed(&work, &val.prepared)?,
        };
        let (errs, _) = split_errors(&head, &work, &val_emb, &val, &codec)?;
        let val_mae = mean(&errs);
        if !val_mae.is_finite() {
            return Err(Error::Input(format!("validation MAE became non-finite at epoch {epoch}")));
        }
        if val_mae < best.0 {
            best = (val_mae, epoch, work.clone());
        } else if epoch - best.1 >= hp.patience {
            break;
        }
    }
    let (_, best_epoch, work) = best;

    let test_emb = encoder.embed(&work, &test.prepared)?;
    let (errs, decoded) = split_errors(&head, &work, &test_emb, &test, &codec)?;
    let mut metrics = BTreeMap::new();
    let baseline: Vec<f64> = match task {
        Task::Destination => {
            let m = error_metrics(&errs)?;
            metrics.insert("mae".into(), m.mae);
            metrics.insert("rmse".into(), m.rmse);
            test.samples
                .iter()
                .map(|s| {
                    let last = s.prefix.points[s.prefix.len() - 1];
                    haversine((last.lng, last.lat), s.destination)
                })
                .collect()
        }
        _ => {
            let preds: Vec<f64> = decoded.iter().map(|d| d[0]).collect();
            let targets: Vec<f64> = test.samples.iter().map(|s| s.travel_time).collect();
            let guard = targets.iter().all(|&t| t >= MAPE_MIN_SECONDS);
            let m = regression_metrics(&preds, &targets, guard)?;
            metrics.insert("mae".into(), m.mae);
            metrics.insert("rmse".into(), m.rmse);
            if let Some(mape) = m.mape {
                metrics.insert("mape".into(), mape);
            }
            let train_mean = mean(&train.samples.iter().map(|s| s.travel_time).collect::<Vec<_>>());
            targets.iter().map(|t| (t - train_mean).abs()).collect()
        }
    };
    let b = error_metrics(&baseline)?;
    metrics.insert("baseline_mae".into(), b.mae);
    metrics.insert("baseline_rmse".into(), b.rmse);
    metrics.insert("n_test".into(), test.samples.len() as f64);
    metrics.insert("skipped".into(), skipped as f64);
    Ok(RegressionOutcome {
        metrics,
        epochs_run,
        best_epoch,
        skipped,
        store: work,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TrajectoryPoint;

    fn traj(n: usize) -> Trajectory {
        Trajectory::new(
            1,
            (0..n).map(|i| TrajectoryPoint::new(104.0 + 1e-4 * i as f64, 30.6, 10 * i as i64)).collect(),
        )
    }

    #[test]
    fn truncation_boundaries() {
        assert_eq!(truncate_for_task(&traj(10)).unwrap().len(), 5);
        assert_eq!(truncate_for_task(&traj(7)).unwrap().len(), 2);
        assert!(truncate_for_task(&traj(6)).is_none());
        let (s, skipped) = task_samples(&[traj(6), traj(9)]);
        assert_eq!((s.len(), skipped), (1, 1));
        assert_eq!(s[0].travel_time, 80.0);
        assert_eq!(s[0].destination, (104.0 + 8e-4, 30.6));
    }

    #[test]
    fn codecs_round_trip() {
        let s = task_samples(&[traj(9), traj(12)]).0;
        let scaler = FeatureScaler {
            min: vec![0.0, 0.0, 0.0, 103.9, 30.5],
            max: vec![1.0, 1.0, 1.0, 104.1, 30.7],
        };
        for task in [Task::Destination, Task::ArrivalTime] {
            let c = Codec::fit(task, &scaler, &s).unwrap();
            for x in &s {
                let back = c.decode(&c.encode(x));
                assert!(c.error(&back, x) < 1e-6, "{task}");
            }
        }
        // the mean predictor sits at z = 0
        let c = Codec::fit(Task::ArrivalTime, &scaler, &s).unwrap();
        assert!((c.decode(&[0.0])[0] - 95.0).abs() < 1e-9);
    }

    #[test]
    fn names_parse_back() {
        for t in [Task::Destination, Task::ArrivalTime, Task::Simsearch] {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        for m in [Mode::Frozen, Mode::Finetune] {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Task>().is_err());
    }
}
