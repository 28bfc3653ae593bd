//! Encode-time scaling of the trajectory encoder against a full-attention
//! baseline of the same width.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{prepare, FeatureScaler, PackedBatch, Trajectory, TrajectoryPoint};
use crate::mamba::{TrajMamba, TrajMambaConfig};
use crate::tensor::checkpoint::write_atomic;
use crate::tensor::kernels::SeqLayout;
use crate::tensor::nn::TransformerLayer;
use crate::tensor::rng::Rng;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor};

pub const ATTENTION_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub trajmamba_s: f64,
    pub attention_s: f64,
}

/// Two pre-norm Transformer layers and mean pooling over an `n × E` input.
pub struct AttentionBaseline {
    layers: Vec<TransformerLayer>,
}

impl AttentionBaseline {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, width: usize, heads: usize) -> Result<Self> {
        let layers = (0..ATTENTION_LAYERS)
            .map(|l| TransformerLayer::new(store, rng, &format!("attn_baseline.{l}"), width, heads, 4 * width))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<T>> {
        let tape = Tape::inference(store);
        let layout = SeqLayout::single(x.shape()[0]);
        let mut h = tape.constant(x.clone());
        for layer in &self.layers {
            h = layer.forward(&tape, h, &layout)?;
        }
        let z = tape.mean_pool(h, &layout)?;
        let out = tape.value(z).data().to_vec();
        Ok(out)
    }
}

/// Random-walk trajectory of `n` points with 6 to 12 s sampling gaps.
pub fn synthetic_trajectory(n: usize, seed: u64) -> Trajectory {
    let mut rng = Rng::new(seed, &format!("bench/traj{n}"));
    let (mut lng, mut lat, mut t) = (104.06, 30.66, 1_538_352_000i64);
    let mut heading: f64 = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
    let points = (0..n)
        .map(|_| {
            let p = TrajectoryPoint::new(lng, lat, t);
            heading += rng.normal(0.0, 0.3);
            let step = rng.uniform(1e-4, 8e-4);
            lng += step * heading.cos();
            lat += step * heading.sin();
            t += 6 + rng.below(7) as i64;
            p
        })
        .collect();
    Trajectory::new(n as u64, points)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Median wall time of `reps` runs after one warm-up run.
pub fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// One row per length. Inputs and parameters are built before timing.
pub fn bench_scaling<T: Scalar>(lengths: &[usize], cfg: &TrajMambaConfig, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps == 0 || lengths.iter().any(|&n| n < 2) {
        return Err(Error::Config("bench needs reps >= 1 and lengths >= 2".into()));
    }
    cfg.validate()?;
    let mut rng = Rng::new(seed, "bench/init");
    let mut store = ParamStore::<T>::new();
    let encoder = TrajMamba::new(&mut store, &mut rng, cfg.clone())?;
    let baseline = AttentionBaseline::new(&mut store, &mut rng, cfg.embed_dim, cfg.heads)?;
    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let traj = synthetic_trajectory(n, seed);
        let scaler = FeatureScaler::fit_trajectories(std::slice::from_ref(&traj))?;
        let prepared = prepare(&traj, &scaler)?;
        let batch = PackedBatch::<T>::single(&prepared)?;
        let mamba = time_median(reps, || {
            let tape = Tape::inference(&store);
            let z = encoder.encode(&tape, &batch)?;
            std::hint::black_box(tape.value(z).data()[0]);
            Ok(())
        })?;
        let x = Tensor::new([n, cfg.embed_dim], (0..n * cfg.embed_dim).map(|_| T::of(rng.normal(0.0, 1.0))).collect())?;
        let attention = time_median(reps, || {
            std::hint::black_box(baseline.encode(&store, &x)?);
            Ok(())
        })?;
        rows.push(BenchRow {
            n,
            trajmamba_s: mamba,
            attention_s: attention,
        });
    }
    Ok(rows)
}

/// `t(2n) / t(n)` for each consecutive pair of rows whose lengths double:
/// `(n, trajmamba ratio, attention ratio)`.
pub fn doubling_ratios(rows: &[BenchRow]) -> Vec<(usize, f64, f64)> {
    rows.windows(2)
        .filter(|w| w[1].n == 2 * w[0].n)
        .map(|w| (w[0].n, w[1].trajmamba_s / w[0].trajmamba_s, w[1].attention_s / w[0].attention_s))
        .collect()
}

/// Header `n,trajmamba_s,attention_s`.
pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_length_and_csv_round_trip() {
        let cfg = TrajMambaConfig {
            embed_dim: 8,
            model_dim: 8,
            state_dim: 4,
            heads: 2,
            layers: 1,
            fourier_freqs: 2,
            ..TrajMambaConfig::default()
        };
        let rows = bench_scaling::<f32>(&[16, 32, 64], &cfg, 1, 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![16, 32, 64]);
        assert!(rows.iter().all(|r| r.trajmamba_s > 0.0 && r.attention_s > 0.0));
        assert_eq!(doubling_ratios(&rows).len(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_bench_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("n,trajmamba_s,attention_s\n"));
        assert_eq!(read_bench_csv(&path).unwrap(), rows);
    }

    #[test]
    fn synthetic_input_is_valid() {
        let t = synthetic_trajectory(300, 1);
        t.validate().unwrap();
        assert_eq!(t.len(), 300);
        assert_eq!(t, synthetic_trajectory(300, 1));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn bad_arguments() {
        assert!(bench_scaling::<f32>(&[1, 4], &TrajMambaConfig::default(), 1, 0).is_err());
        assert!(bench_scaling::<f32>(&[4], &TrajMambaConfig::default(), 0, 0).is_err());
    }
}
