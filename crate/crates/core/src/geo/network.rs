use std::fs;
use std::path::Path;

use rstar::primitives::{GeomWithData, Line};
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EARTH_RADIUS_M;
use crate::tensor::checkpoint::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub lng: f64,
    pub lat: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    pub desc: String,
}

/// Equirectangular projection to meters around a fixed center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalProjection {
    pub lng0: f64,
    pub lat0: f64,
    kx: f64,
    ky: f64,
}

impl LocalProjection {
    pub fn new(lng0: f64, lat0: f64) -> Self {
        let ky = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self {
            lng0,
            lat0,
            kx: ky * lat0.to_radians().cos(),
            ky,
        }
    }

    pub fn project(&self, lng: f64, lat: f64) -> [f64; 2] {
        [(lng - self.lng0) * self.kx, (lat - self.lat0) * self.ky]
    }
}

#[derive(Serialize, Deserialize)]
struct RoadsFile {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

type SegmentEntry = GeomWithData<Line<[f64; 2]>, usize>;

/// Directed road graph with a segment index for nearest-edge queries.
#[derive(Clone, Debug)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    proj: LocalProjection,
    segments: Vec<([f64; 2], [f64; 2])>,
    index: RTree<SegmentEntry>,
}

impl RoadNetwork {
    /// Validates dense ids and node references, then builds the index.
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Format(format!("node ids must be dense: found {} at position {i}", n.id)));
            }
        }
        for (i, e) in edges.iter().enumerate() {
            if e.id != i {
                return Err(Error::Format(format!("edge ids must be dense: found {} at position {i}", e.id)));
            }
            for end in [e.start, e.end] {
                if end >= nodes.len() {
                    return Err(Error::Index {
                        what: "road node",
                        index: end,
                        len: nodes.len(),
                    });
                }
            }
        }
        let proj = if nodes.is_empty() {
            LocalProjection::new(0.0, 0.0)
        } else {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for n in &nodes {
                lo = [lo[0].min(n.lng), lo[1].min(n.lat)];
                hi = [hi[0].max(n.lng), hi[1].max(n.lat)];
            }
            LocalProjection::new((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0)
        };
        let segments: Vec<_> = edges
            .iter()
            .map(|e| {
                let a = &nodes[e.start];
                let b = &nodes[e.end];
                (proj.project(a.lng, a.lat), proj.project(b.lng, b.lat))
            })
            .collect();
        let index = RTree::bulk_load(
            segments
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| GeomWithData::new(Line::new(a, b), i))
                .collect(),
        );
        Ok(Self {
            nodes,
            edges,
            proj,
            segments,
            index,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.proj
    }

    /// Projected endpoints of an edge.
    pub fn segment(&self, id: usize) -> ([f64; 2], [f64; 2]) {
        self.segments[id]
    }

    pub(crate) fn index(&self) -> &RTree<SegmentEntry> {
        &self.index
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: RoadsFile =
            serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::new(f.nodes, f.edges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = RoadsFile {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        };
        write_atomic(path, &serde_json::to_vec(&f)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub poi_id: usize,
    pub lng: f64,
    pub lat: f64,
    pub desc: String,
}

type PoiEntry = GeomWithData<[f64; 3], usize>;

/// Unit-sphere position; chord length is monotone in great-circle distance.
pub(crate) fn unit_vector(lng: f64, lat: f64) -> [f64; 3] {
    let (lng, lat) = (lng.to_radians(), lat.to_radians());
    [lat.cos() * lng.cos(), lat.cos() * lng.sin(), lat.sin()]
}

#[derive(Clone, Debug)]
pub struct PoiSet {
    pois: Vec<Poi>,
    index: RTree<PoiEntry>,
}

impl PoiSet {
    pub fn new(pois: Vec<Poi>) -> Result<Self> {
        for (i, p) in pois.iter().enumerate() {
            if p.poi_id != i {
                return Err(Error::Format(format!("poi ids must be dense: found {} at position {i}", p.poi_id)));
            }
        }
        let index = RTree::bulk_load(
            pois.iter()
                .map(|p| GeomWithData::new(unit_vector(p.lng, p.lat), p.poi_id))
                .collect(),
        );
        Ok(Self { pois, index })
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub(crate) fn index(&self) -> &RTree<PoiEntry> {
        &self.index
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut pois = Vec::new();
        for rec in rdr.deserialize() {
            pois.push(rec.map_err(|e| Error::csv(path, e))?);
        }
        Self::new(pois)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.pois {
            w.serialize(p).map_err(|e| Error::csv(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}
