//! Raw trajectories to encoder inputs: per-point temporal features,
//! kinematic movement features, and min-max scaling.

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::nn::{FourierLayer, Linear};
use crate::tensor::rng::Rng;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub lng: f64,
    pub lat: f64,
    /// Unix seconds, UTC.
    pub t: i64,
}

impl TrajectoryPoint {
    pub fn new(lng: f64, lat: f64, t: i64) -> Self {
        Self { lng, lat, t }
    }

    pub fn coord(&self) -> (f64, f64) {
        (self.lng, self.lat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn new(id: u64, points: Vec<TrajectoryPoint>) -> Self {
        Self { id, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn departure(&self) -> i64 {
        self.points.first().map_or(0, |p| p.t)
    }

    /// Checks coordinate bounds and strictly increasing timestamps.
    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if !(-180.0..=180.0).contains(&p.lng) || !(-90.0..=90.0).contains(&p.lat) || p.t < 0 {
                return Err(Error::Input(format!(
                    "trajectory {}: point ({}, {}, {}) out of bounds",
                    self.id, p.lng, p.lat, p.t
                )));
            }
        }
        for w in self.points.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Ordering(format!(
                    "trajectory {}: timestamp {} does not follow {}",
                    self.id, w[1].t, w[0].t
                )));
            }
        }
        Ok(())
    }

    /// Sub-trajectory of the points at the given 0-based indices.
    pub fn select(&self, indices: impl IntoIterator<Item = usize>) -> Trajectory {
        Trajectory {
            id: self.id,
            points: indices.into_iter().map(|i| self.points[i]).collect(),
        }
    }
}

/// Great-circle distance in meters between `(lng, lat)` pairs in degrees.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lng1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lng2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlng = lng2 - lng1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlng / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalFeatures {
    /// Monday = 0.
    pub day_of_week: u32,
    pub hour: u32,
    pub minute: u32,
    /// Minutes since the first point.
    pub delta_minutes: f64,
}

impl TemporalFeatures {
    pub fn as_array(&self) -> [f64; 4] {
        [
            f64::from(self.day_of_week),
            f64::from(self.hour),
            f64::from(self.minute),
            self.delta_minutes,
        ]
    }
}

/// UTC calendar decomposition of `t` plus minutes elapsed since `t1`.
pub fn temporal_features(t: i64, t1: i64) -> Result<TemporalFeatures> {
    if t < t1 {
        return Err(Error::Ordering(format!("timestamp {t} precedes first timestamp {t1}")));
    }
    let dt = DateTime::from_timestamp(t, 0).ok_or_else(|| Error::Input(format!("timestamp {t} out of range")))?;
    Ok(TemporalFeatures {
        day_of_week: dt.weekday().num_days_from_monday(),
        hour: dt.hour(),
        minute: dt.minute(),
        delta_minutes: (t - t1) as f64 / 60.0,
    })
}

/// Unnormalized kinematics of one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MovementFeatures {
    /// Speed, m/s.
    pub v: f64,
    /// Acceleration, m/s².
    pub acc: f64,
    /// Bearing clockwise from true north, radians in `[-π, π]`.
    pub theta: f64,
}

impl MovementFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.v, self.acc, self.theta]
    }
}

/// Initial great-circle bearing from `a` to `b`, `None` for coincident points.
pub fn bearing(a: (f64, f64), b: (f64, f64)) -> Option<f64> {
    if a == b {
        return None;
    }
    let (lng1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lng2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlng = lng2 - lng1;
    let l = dlng.sin() * lat2.cos();
    let r = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlng.cos();
    if l == 0.0 && r == 0.0 {
        return None;
    }
    Some(l.atan2(r))
}

/// Speed, acceleration and bearing per point. The first row copies the
/// second; a zero-length step keeps the previous bearing.
pub fn movement_features(traj: &Trajectory) -> Result<Vec<MovementFeatures>> {
    let pts = &traj.points;
    if pts.len() < 2 {
        return Err(Error::Input(format!(
            "trajectory {}: movement features need at least 2 points, got {}",
            traj.id,
            pts.len()
        )));
    }
    let mut out = vec![
        MovementFeatures {
            v: 0.0,
            acc: 0.0,
            theta: 0.0,
        };
        pts.len()
    ];
    for i in 1..pts.len() {
        let dt = pts[i].t - pts[i - 1].t;
        if dt <= 0 {
            return Err(Error::Ordering(format!(
                "trajectory {}: timestamp {} does not follow {}",
                traj.id,
                pts[i].t,
                pts[i - 1].t
            )));
        }
        let dt = dt as f64;
        let v = haversine(pts[i - 1].coord(), pts[i].coord()) / dt;
        // v_1 := v_2, so the second point has zero acceleration
        let v_prev = if i == 1 { v } else { out[i - 1].v };
        let prev_theta = if i == 1 { 0.0 } else { out[i - 1].theta };
        out[i] = MovementFeatures {
            v,
            acc: (v - v_prev) / dt,
            theta: bearing(pts[i - 1].coord(), pts[i].coord()).unwrap_or(prev_theta),
        };
    }
    out[0] = out[1];
    Ok(out)
}

/// Number of per-point scaled features: speed, acceleration, bearing,
/// longitude, latitude.
pub const SCALED_FEATURES: usize = 5;

/// Per-feature min-max scaling fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureScaler {
    /// Fits on raw feature rows. Bounds are rounded to `f32` so a reloaded
    /// scaler is identical to a freshly fitted one.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for row in rows {
            if min.is_empty() {
                min = row.to_vec();
                max = row.to_vec();
                continue;
            }
            if row.len() != min.len() {
                return Err(Error::dim("fit_scaler", &[min.len()], &[row.len()]));
            }
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        if min.is_empty() {
            return Err(Error::Input("cannot fit a scaler on an empty training set".into()));
        }
        let q = |v: &mut f64| *v = f64::from(*v as f32);
        min.iter_mut().for_each(q);
        max.iter_mut().for_each(q);
        Ok(Self { min, max })
    }

    /// Fits the five point features over the trajectories of a training split.
    pub fn fit_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let mut rows = Vec::new();
        for t in trajs {
            rows.extend(raw_point_features(t)?);
        }
        Self::fit(rows.iter().map(|r| r.as_slice()))
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    /// `(x - min) / (max - min)` clamped to `[0, 1]`; a constant feature maps
    /// to 0.5.
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| {
                let span = self.max[j] - self.min[j];
                if span <= 0.0 {
                    0.5
                } else {
                    ((v - self.min[j]) / span).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        let n = self.min.len();
        ck.push("scaler.min", &Tensor::<f64>::from_f64([n], &self.min)?)?;
        ck.push("scaler.max", &Tensor::<f64>::from_f64([n], &self.max)?)
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let min: Vec<f64> = ck.require("scaler.min")?.data().iter().map(|&v| f64::from(v)).collect();
        let max: Vec<f64> = ck.require("scaler.max")?.data().iter().map(|&v| f64::from(v)).collect();
        if min.len() != max.len() || min.iter().zip(&max).any(|(a, b)| a > b) {
            return Err(Error::Format("scaler bounds are inconsistent".into()));
        }
        Ok(Self { min, max })
    }
}

/// `[v, acc, theta, lng, lat]` per point, before scaling.
pub fn raw_point_features(traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let mv = movement_features(traj)?;
    Ok(mv
        .iter()
        .zip(&traj.points)
        .map(|(m, p)| vec![m.v, m.acc, m.theta, p.lng, p.lat])
        .collect())
}

/// Parameter-independent encoder inputs of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTrajectory {
    pub id: u64,
    /// Scaled `(lng, lat)` per point.
    pub coords: Vec<[f64; 2]>,
    /// Day of week, hour, minute, minutes since start.
    pub temporal: Vec<[f64; 4]>,
    /// Scaled speed, acceleration, bearing.
    pub movement: Vec<[f64; 3]>,
}

impl PreparedTrajectory {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn prepare(traj: &Trajectory, scaler: &FeatureScaler) -> Result<PreparedTrajectory> {
    if scaler.dims() != SCALED_FEATURES {
        return Err(Error::dim("prepare", &[SCALED_FEATURES], &[scaler.dims()]));
    }
    let raw = raw_point_features(traj)?;
    let t1 = traj.departure();
    let mut out = PreparedTrajectory {
        id: traj.id,
        coords: Vec::with_capacity(raw.len()),
        temporal: Vec::with_capacity(raw.len()),
        movement: Vec::with_capacity(raw.len()),
    };
    for (row, p) in raw.iter().zip(&traj.points) {
        let s = scaler.apply(row);
        out.movement.push([s[0], s[1], s[2]]);
        out.coords.push([s[3], s[4]]);
        out.temporal.push(temporal_features(p.t, t1)?.as_array());
    }
    Ok(out)
}

/// Right-padded batch of prepared trajectories, packed row-wise.
#[derive(Clone, Debug)]
pub struct PackedBatch<T> {
    pub layout: crate::tensor::kernels::SeqLayout,
    /// `rows × 2`
    pub coords: Tensor<T>,
    /// Four `rows × 1` columns.
    pub temporal: [Tensor<T>; 4],
    /// `rows × 3`
    pub movement: Tensor<T>,
}

impl<T: Scalar> PackedBatch<T> {
    pub fn new(items: &[&PreparedTrajectory]) -> Result<Self> {
        if items.is_empty() || items.iter().any(|p| p.is_empty()) {
            return Err(Error::Input("cannot pack an empty batch or trajectory".into()));
        }
        let layout = crate::tensor::kernels::SeqLayout::padded(items.iter().map(|p| p.len()).collect());
        let n = layout.seq_len;
        let rows = layout.rows();
        let mut coords = vec![T::zero(); rows * 2];
        let mut temporal: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); rows]);
        let mut movement = vec![T::zero(); rows * 3];
        for (b, p) in items.iter().enumerate() {
            for t in 0..p.len() {
                let r = b * n + t;
                for c in 0..2 {
                    coords[r * 2 + c] = T::of(p.coords[t][c]);
                }
                for (c, col) in temporal.iter_mut().enumerate() {
                    col[r] = T::of(p.temporal[t][c]);
                }
                for c in 0..3 {
                    movement[r * 3 + c] = T::of(p.movement[t][c]);
                }
            }
        }
        Ok(Self {
            layout,
            coords: Tensor::new([rows, 2], coords)?,
            temporal: temporal.map(|col| Tensor::new([rows, 1], col).expect("shape")),
            movement: Tensor::new([rows, 3], movement)?,
        })
    }

    pub fn single(p: &PreparedTrajectory) -> Result<Self> {
        Self::new(&[p])
    }
}

/// Point-embedding parameters: a spatial linear plus four Fourier encoders
/// (one per temporal feature) followed by a linear to the embedding width.
#[derive(Clone, Debug)]
pub struct PointEmbedder {
    pub spatial: Linear,
    pub fourier: [FourierLayer; 4],
    pub temporal: Linear,
    pub dim: usize,
}

impl PointEmbedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, dim: usize, freqs: usize) -> Result<Self> {
        let spatial = Linear::new(store, rng, "embed.spatial", 2, dim, true)?;
        let names = ["day", "hour", "minute", "delta"];
        let mut layers = Vec::with_capacity(4);
        for name in names {
            layers.push(FourierLayer::new(store, rng, &format!("embed.fourier_{name}"), freqs)?);
        }
        let fourier: [FourierLayer; 4] = layers.try_into().expect("four layers");
        let temporal = Linear::new(store, rng, "embed.temporal", 8 * freqs, dim, true)?;
        Ok(Self {
            spatial,
            fourier,
            temporal,
            dim,
        })
    }

    /// `rows × dim` latent point vectors.
    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, batch: &PackedBatch<T>) -> Result<Var> {
        let coords = tape.constant(batch.coords.clone());
        let spatial = self.spatial.forward(tape, coords)?;
        let mut codes = Vec::with_capacity(4);
        for (layer, col) in self.fourier.iter().zip(&batch.temporal) {
            let x = tape.constant(col.clone());
            codes.push(layer.forward(tape, x)?);
        }
        let cat = tape.concat_cols(&codes)?;
        let temporal = self.temporal.forward(tape, cat)?;
        tape.add(spatial, temporal)
    }
}
