//! Resampling, length filtering, chronological splits and annotation.

use super::io::{Annotation, DatasetSplits};
use crate::error::{Error, Result};
use crate::features::Trajectory;
use crate::geo::{map_match, nearest_poi, PoiSet, RoadNetwork};
use crate::par;

pub const MIN_POINTS: usize = 5;
pub const MAX_POINTS: usize = 120;
pub const HOP: usize = 3;

/// Keeps every third point, starting with the first.
pub fn resample(traj: &Trajectory) -> Trajectory {
    traj.select((0..traj.len()).step_by(HOP))
}

/// Resamples, then drops trajectories outside `MIN_POINTS..=MAX_POINTS`.
pub fn filter(trajs: &[Trajectory]) -> Vec<Trajectory> {
    trajs
        .iter()
        .map(resample)
        .filter(|t| (MIN_POINTS..=MAX_POINTS).contains(&t.len()))
        .collect()
}

/// 8:1:1 by departure time (ties by id).
pub fn split(trajs: &[Trajectory]) -> DatasetSplits {
    let mut order: Vec<(i64, u64)> = trajs.iter().map(|t| (t.departure(), t.id)).collect();
    order.sort_unstable();
    let n = order.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let ids: Vec<u64> = order.into_iter().map(|(_, id)| id).collect();
    DatasetSplits {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    }
}

pub fn preprocess(raw: &[Trajectory]) -> Result<(Vec<Trajectory>, DatasetSplits)> {
    for t in raw {
        t.validate()?;
    }
    let kept = filter(raw);
    let splits = split(&kept);
    Ok((kept, splits))
}

/// Matched edges and nearest POIs for every trajectory, in input order.
pub fn annotate(trajs: &[Trajectory], net: &RoadNetwork, pois: &PoiSet) -> Result<Vec<Annotation>> {
    par::map(trajs, |t| {
        let wrap = |e: Error| Error::Input(format!("annotating trajectory {}: {e}", t.id));
        Ok(Annotation {
            traj_id: t.id,
            edges: map_match(t, net).map_err(wrap)?,
            pois: nearest_poi(t, pois).map_err(wrap)?,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TrajectoryPoint;

    fn line(id: u64, n: usize, t0: i64) -> Trajectory {
        Trajectory::new(
            id,
            (0..n).map(|i| TrajectoryPoint::new(104.0 + 1e-4 * i as f64, 30.6, t0 + 2 * i as i64)).collect(),
        )
    }

    #[test]
    fn decimation_and_length_filter() {
        let t = line(1, 15, 0);
        let r = resample(&t);
        assert_eq!(r.len(), 5);
        assert_eq!(r.points[1], t.points[3]);
        assert_eq!(r.points[4], t.points[12]);
        assert_eq!(resample(&line(2, 12, 0)).len(), 4);
        assert_eq!(resample(&line(3, 400, 0)).len(), 134);
        let kept = filter(&[line(1, 15, 0), line(2, 12, 0), line(3, 400, 0), line(4, 360, 0)]);
        assert_eq!(kept.iter().map(|t| t.id).collect::<Vec<_>>(), vec![1, 4]);
    }

    #[test]
    fn splits_are_chronological_and_disjoint() {
        let trajs: Vec<_> = (0..20).map(|i| line(i, 6, 1_000 - 10 * i as i64)).collect();
        let s = split(&trajs);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 2, 2));
        s.validate().unwrap();
        // later departures have smaller ids here
        assert_eq!(s.train[0], 19);
        assert_eq!(s.test, vec![1, 0]);
    }
}
