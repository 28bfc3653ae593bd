//! Per-point road and POI assignment. Ties resolve to the smaller id.

use super::network::{unit_vector, PoiSet, RoadNetwork};
use crate::error::{Error, Result};
use crate::features::{haversine, Trajectory};

/// Squared distance from `p` to segment `ab` in projected meters.
pub fn segment_distance2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - cx).powi(2) + (p[1] - cy).powi(2)
}

/// Slack admitting index candidates whose distance differs from the best
/// only by rounding.
fn within(d: f64, best: f64) -> bool {
    d <= best * (1.0 + 1e-9) + 1e-12
}

/// Nearest edge to one `(lng, lat)` point.
pub fn nearest_edge(net: &RoadNetwork, lng: f64, lat: f64) -> Result<usize> {
    if net.edges().is_empty() {
        return Err(Error::Config("road network has no edges".into()));
    }
    let p = net.projection().project(lng, lat);
    let mut best: Option<(f64, usize)> = None;
    let mut first = None;
    for (entry, d2) in net.index().nearest_neighbor_iter_with_distance_2(&p) {
        let base = *first.get_or_insert(d2);
        if !within(d2, base) {
            break;
        }
        let (a, b) = net.segment(entry.data);
        let cand = (segment_distance2(p, a, b), entry.data);
        if best.is_none_or(|b| cand < b) {
            best = Some(cand);
        }
    }
    Ok(best.expect("non-empty index").1)
}

/// O(|E|) scan, the reference for [`nearest_edge`].
pub fn nearest_edge_brute(net: &RoadNetwork, lng: f64, lat: f64) -> Result<usize> {
    if net.edges().is_empty() {
        return Err(Error::Config("road network has no edges".into()));
    }
    let p = net.projection().project(lng, lat);
    let mut best = (f64::INFINITY, usize::MAX);
    for id in 0..net.edges().len() {
        let (a, b) = net.segment(id);
        let cand = (segment_distance2(p, a, b), id);
        if cand < best {
            best = cand;
        }
    }
    Ok(best.1)
}

pub fn map_match(traj: &Trajectory, net: &RoadNetwork) -> Result<Vec<usize>> {
    traj.points.iter().map(|p| nearest_edge(net, p.lng, p.lat)).collect()
}

pub fn nearest_poi_at(pois: &PoiSet, lng: f64, lat: f64) -> Result<usize> {
    if pois.is_empty() {
        return Err(Error::Config("poi set is empty".into()));
    }
    let q = unit_vector(lng, lat);
    let mut best: Option<(f64, usize)> = None;
    let mut first = None;
    for (entry, d2) in pois.index().nearest_neighbor_iter_with_distance_2(&q) {
        let base = *first.get_or_insert(d2);
        if d2 > base * (1.0 + 1e-9) + 1e-20 {
            break;
        }
        let poi = &pois.pois()[entry.data];
        let cand = (haversine((lng, lat), (poi.lng, poi.lat)), entry.data);
        if best.is_none_or(|b| cand < b) {
            best = Some(cand);
        }
    }
    Ok(best.expect("non-empty index").1)
}

/// O(|P|) scan, the reference for [`nearest_poi_at`].
pub fn nearest_poi_brute(pois: &PoiSet, lng: f64, lat: f64) -> Result<usize> {
    if pois.is_empty() {
        return Err(Error::Config("poi set is empty".into()));
    }
    let mut best = (f64::INFINITY, usize::MAX);
    for p in pois.pois() {
        let cand = (haversine((lng, lat), (p.lng, p.lat)), p.poi_id);
        if cand < best {
            best = cand;
        }
    }
    Ok(best.1)
}

pub fn nearest_poi(traj: &Trajectory, pois: &PoiSet) -> Result<Vec<usize>> {
    traj.points.iter().map(|p| nearest_poi_at(pois, p.lng, p.lat)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::network::{Edge, Node, Poi};
    use crate::tensor::rng::Rng;

    fn grid(rng: &mut Rng, shuffle: bool) -> RoadNetwork {
        let mut nodes = Vec::new();
        for r in 0..6 {
            for c in 0..6 {
                nodes.push(Node {
                    id: r * 6 + c,
                    lng: 104.0 + 0.001 * c as f64 + rng.uniform(-2e-4, 2e-4),
                    lat: 30.6 + 0.001 * r as f64 + rng.uniform(-2e-4, 2e-4),
                });
            }
        }
        let mut pairs = Vec::new();
        for r in 0..6 {
            for c in 0..6 {
                if c + 1 < 6 {
                    pairs.push((r * 6 + c, r * 6 + c + 1));
                }
                if r + 1 < 6 {
                    pairs.push((r * 6 + c, (r + 1) * 6 + c));
                }
            }
        }
        if shuffle {
            rng.shuffle(&mut pairs);
        }
        let edges = pairs
            .into_iter()
            .enumerate()
            .map(|(id, (start, end))| Edge {
                id,
                start,
                end,
                desc: String::new(),
            })
            .collect();
        RoadNetwork::new(nodes, edges).unwrap()
    }

    #[test]
    fn index_agrees_with_brute_force() {
        let mut rng = Rng::new(5, "grid");
        let net = grid(&mut rng, true);
        for _ in 0..500 {
            let lng = rng.uniform(103.999, 104.006);
            let lat = rng.uniform(30.599, 30.606);
            assert_eq!(nearest_edge(&net, lng, lat).unwrap(), nearest_edge_brute(&net, lng, lat).unwrap());
        }
    }

    #[test]
    fn point_on_segment_and_ties() {
        let nodes = vec![
            Node { id: 0, lng: -0.001, lat: 0.0 },
            Node { id: 1, lng: 0.001, lat: 0.0 },
            Node { id: 2, lng: -0.001, lat: 0.001 },
            Node { id: 3, lng: 0.001, lat: 0.001 },
            Node { id: 4, lng: -0.001, lat: -0.001 },
            Node { id: 5, lng: 0.001, lat: -0.001 },
        ];
        let e = |id, start, end| Edge {
            id,
            start,
            end,
            desc: String::new(),
        };
        // edges 1 and 0 lie symmetric about the query latitude
        let net = RoadNetwork::new(nodes, vec![e(0, 4, 5), e(1, 2, 3), e(2, 0, 1)]).unwrap();
        assert_eq!(nearest_edge(&net, 0.0, 0.0).unwrap(), 2);
        let (a, b) = net.segment(2);
        assert!(segment_distance2(net.projection().project(0.0005, 0.0), a, b).sqrt() < 1e-9);
        assert_eq!(nearest_edge(&net, 0.0005, 0.0).unwrap(), 2);
        let net2 = RoadNetwork::new(net.nodes().to_vec(), vec![e(0, 4, 5), e(1, 2, 3)]).unwrap();
        assert_eq!(nearest_edge(&net2, 0.0, 0.0).unwrap(), 0);
        assert_eq!(nearest_edge_brute(&net2, 0.0, 0.0).unwrap(), 0);
    }

    #[test]
    fn poi_ties_and_coincidence() {
        let p = |id, lng, lat| Poi {
            poi_id: id,
            lng,
            lat,
            desc: String::new(),
        };
        let set = PoiSet::new(vec![p(0, 1.0, 1.0), p(1, 0.01, 0.0), p(2, -0.01, 0.0), p(3, 0.5, 0.5)]).unwrap();
        assert_eq!(nearest_poi_at(&set, 0.0, 0.0).unwrap(), 1);
        assert_eq!(nearest_poi_at(&set, 0.5, 0.5).unwrap(), 3);
        assert!(nearest_poi_at(&PoiSet::new(vec![]).unwrap(), 0.0, 0.0).is_err());
    }

    #[test]
    fn empty_network_is_config_error() {
        let net = RoadNetwork::new(vec![], vec![]).unwrap();
        assert!(matches!(nearest_edge(&net, 0.0, 0.0), Err(Error::Config(_))));
    }
}
