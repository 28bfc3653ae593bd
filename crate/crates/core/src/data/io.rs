//! Trajectory, annotation and split files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Trajectory, TrajectoryPoint};
use crate::tensor::checkpoint::write_atomic;

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    traj_id: u64,
    seq: usize,
    lng: f64,
    lat: f64,
    timestamp: i64,
}

fn csv_bytes<R: Serialize>(path: &Path, rows: impl Iterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Header `traj_id,seq,lng,lat,timestamp`, rows sorted by `(traj_id, seq)`.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let rows = trajs.iter().flat_map(|t| {
        t.points.iter().enumerate().map(move |(seq, p)| PointRow {
            traj_id: t.id,
            seq,
            lng: p.lng,
            lat: p.lat,
            timestamp: p.t,
        })
    });
    write_atomic(path, &csv_bytes(path, rows)?)
}

/// Reads and validates a trajectory CSV. Rows must be sorted by
/// `(traj_id, seq)` with `seq` counting from 0.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, rec) in rdr.deserialize::<PointRow>().enumerate() {
        let row = rec.map_err(|e| Error::csv(path, e))?;
        let line = i as u64 + 2;
        let bad = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let point = TrajectoryPoint::new(row.lng, row.lat, row.timestamp);
        match out.last_mut() {
            Some(t) if t.id == row.traj_id => {
                if row.seq != t.points.len() {
                    return Err(bad(format!("expected seq {} for trajectory {}, got {}", t.points.len(), t.id, row.seq)));
                }
                t.points.push(point);
            }
            last => {
                if let Some(t) = last {
                    if row.traj_id < t.id {
                        return Err(bad(format!("trajectory {} follows {}; rows must be sorted", row.traj_id, t.id)));
                    }
                }
                if row.seq != 0 {
                    return Err(bad(format!("trajectory {} starts at seq {}", row.traj_id, row.seq)));
                }
                out.push(Trajectory::new(row.traj_id, vec![point]));
            }
        }
    }
    for t in &out {
        t.validate()?;
    }
    Ok(out)
}

/// Matched edge and nearest POI per point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    pub traj_id: u64,
    pub edges: Vec<usize>,
    pub pois: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    traj_id: u64,
    seq: usize,
    edge_id: usize,
    poi_id: usize,
}

/// Header `traj_id,seq,edge_id,poi_id`.
pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<()> {
    let rows = anns.iter().flat_map(|a| {
        a.edges.iter().zip(&a.pois).enumerate().map(move |(seq, (&e, &p))| AnnotationRow {
            traj_id: a.traj_id,
            seq,
            edge_id: e,
            poi_id: p,
        })
    });
    write_atomic(path, &csv_bytes(path, rows)?)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out: Vec<Annotation> = Vec::new();
    for (i, rec) in rdr.deserialize::<AnnotationRow>().enumerate() {
        let row = rec.map_err(|e| Error::csv(path, e))?;
        match out.last_mut() {
            Some(a) if a.traj_id == row.traj_id && row.seq == a.edges.len() => {
                a.edges.push(row.edge_id);
                a.pois.push(row.poi_id);
            }
            _ if row.seq == 0 => out.push(Annotation {
                traj_id: row.traj_id,
                edges: vec![row.edge_id],
                pois: vec![row.poi_id],
            }),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i as u64 + 2,
                    msg: format!("unexpected seq {} for trajectory {}", row.seq, row.traj_id),
                })
            }
        }
    }
    Ok(out)
}

/// Train, validation and test trajectory ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl DatasetSplits {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(Error::Format(format!("trajectory {id} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }
}
