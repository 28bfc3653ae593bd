//! Synthetic grid city with typed roads, zoned POIs and purpose-driven
//! journeys.

use crate::error::{Error, Result};
use crate::features::{Trajectory, TrajectoryPoint};
use crate::geo::{Edge, Node, Poi, PoiSet, RoadNetwork};
use crate::par;
use crate::tensor::rng::Rng;

/// South-west corner of the city.
pub const ORIGIN: (f64, f64) = (104.04, 30.65);
pub const BLOCK_M: f64 = 100.0;
/// 2018-10-01 00:00:00 UTC.
pub const BASE_TIME: i64 = 1_538_352_000;
/// Mean spacing of departures in seconds.
pub const DEPARTURE_GAP_S: i64 = 90;
const GPS_NOISE_M: f64 = 3.0;
/// Probability that a journey passes through a random waypoint.
const DETOUR_P: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Residential,
    Park,
    Mall,
    Office,
    School,
    Station,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Residential,
        Category::Park,
        Category::Mall,
        Category::Office,
        Category::School,
        Category::Station,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Residential => "residential",
            Category::Park => "park",
            Category::Mall => "mall",
            Category::Office => "office",
            Category::School => "school",
            Category::Station => "station",
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Category::Residential => "residential compound",
            Category::Park => "public park",
            Category::Mall => "shopping mall",
            Category::Office => "office tower",
            Category::School => "primary school",
            Category::Station => "metro station",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoadKind {
    Arterial,
    Street,
    Alley,
}

impl RoadKind {
    fn of_line(k: usize) -> Self {
        if k.is_multiple_of(5) {
            RoadKind::Arterial
        } else if k.is_multiple_of(2) {
            RoadKind::Street
        } else {
            RoadKind::Alley
        }
    }

    /// Speed range in m/s.
    pub fn speed(self) -> (f64, f64) {
        match self {
            RoadKind::Arterial => (9.0, 14.0),
            RoadKind::Street => (5.5, 8.5),
            RoadKind::Alley => (2.5, 4.5),
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            RoadKind::Arterial => "arterial road",
            RoadKind::Street => "city street",
            RoadKind::Alley => "narrow alley",
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            RoadKind::Arterial => "Avenue",
            RoadKind::Street => "Road",
            RoadKind::Alley => "Lane",
        }
    }
}

const WORDS: [&str; 20] = [
    "Maple", "Jinjiang", "Willow", "Funan", "Cedar", "Shuncheng", "Lotus", "Qingyang", "Harbor", "Wenshu",
    "Bamboo", "Tianfu", "Orchard", "Kuanzhai", "Granite", "Wuhou", "Meadow", "Chunxi", "Summit", "Jiuyan",
];

fn line_name(k: usize, kind: RoadKind, north_south: bool) -> String {
    let word = WORDS[(k * 7 + usize::from(north_south) * 3) % WORDS.len()];
    let dir = if north_south { "North" } else { "East" };
    format!("{word} {dir} {} {}", kind.suffix(), k / WORDS.len() + 1)
}

/// Grid city of `width × height` blocks.
#[derive(Clone, Debug)]
pub struct SyntheticCity {
    pub width: usize,
    pub height: usize,
    pub network: RoadNetwork,
    pub pois: PoiSet,
    /// Row-major block categories.
    pub blocks: Vec<Category>,
    kinds: Vec<RoadKind>,
    dlng: f64,
    dlat: f64,
}

impl SyntheticCity {
    pub fn new(seed: u64, width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Config(format!("city must be at least 2x2 blocks, got {width}x{height}")));
        }
        let mut rng = Rng::new(seed, "city");
        let dlat = BLOCK_M / (crate::features::EARTH_RADIUS_M * std::f64::consts::PI / 180.0);
        let dlng = dlat / ORIGIN.1.to_radians().cos();
        let mut nodes = Vec::with_capacity((width + 1) * (height + 1));
        for r in 0..=height {
            for c in 0..=width {
                nodes.push(Node {
                    id: r * (width + 1) + c,
                    lng: ORIGIN.0 + c as f64 * dlng,
                    lat: ORIGIN.1 + r as f64 * dlat,
                });
            }
        }
        let mut edges = Vec::new();
        let mut kinds = Vec::new();
        for r in 0..=height {
            let kind = RoadKind::of_line(r);
            let name = line_name(r, kind, false);
            for c in 0..width {
                edges.push(Edge {
                    id: edges.len(),
                    start: r * (width + 1) + c,
                    end: r * (width + 1) + c + 1,
                    desc: format!("{} {name}, block {}", kind.phrase(), c + 1),
                });
                kinds.push(kind);
            }
        }
        for c in 0..=width {
            let kind = RoadKind::of_line(c);
            let name = line_name(c, kind, true);
            for r in 0..height {
                edges.push(Edge {
                    id: edges.len(),
                    start: r * (width + 1) + c,
                    end: (r + 1) * (width + 1) + c,
                    desc: format!("{} {name}, block {}", kind.phrase(), r + 1),
                });
                kinds.push(kind);
            }
        }
        let network = RoadNetwork::new(nodes, edges)?;

        let mut blocks = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                blocks.push(zone_category(&mut rng, r, c, width, height));
            }
        }
        let mut pois = Vec::new();
        for r in 0..height {
            for c in 0..width {
                let block_cat = blocks[r * width + c];
                let count = 1 + rng.below(2);
                for k in 0..count {
                    let cat = if rng.chance(0.8) {
                        block_cat
                    } else {
                        Category::ALL[rng.below(Category::ALL.len())]
                    };
                    let lng = ORIGIN.0 + (c as f64 + rng.uniform(0.15, 0.85)) * dlng;
                    let lat = ORIGIN.1 + (r as f64 + rng.uniform(0.15, 0.85)) * dlat;
                    let street = line_name(r, RoadKind::of_line(r), false);
                    pois.push(Poi {
                        poi_id: pois.len(),
                        lng,
                        lat,
                        desc: format!("{} {} {}, {} near {street}", cat.phrase(), WORDS[(r + 3 * c + k) % WORDS.len()], r * width + c, cat.label()),
                    });
                }
            }
        }
        Ok(Self {
            width,
            height,
            network,
            pois: PoiSet::new(pois)?,
            blocks,
            kinds,
            dlng,
            dlat,
        })
    }

    /// `(min_lng, min_lat, max_lng, max_lat)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            ORIGIN.0,
            ORIGIN.1,
            ORIGIN.0 + self.width as f64 * self.dlng,
            ORIGIN.1 + self.height as f64 * self.dlat,
        )
    }

    fn node(&self, r: usize, c: usize) -> usize {
        r * (self.width + 1) + c
    }

    fn node_pos(&self, r: usize, c: usize) -> (f64, f64) {
        let n = &self.network.nodes()[self.node(r, c)];
        (n.lng, n.lat)
    }

    /// Edge joining two adjacent grid nodes.
    fn edge_between(&self, a: (usize, usize), b: (usize, usize)) -> usize {
        let w = self.width;
        if a.0 == b.0 {
            a.0 * w + a.1.min(b.1)
        } else {
            (self.height + 1) * w + a.1 * self.height + a.0.min(b.0)
        }
    }

    /// Id of the edge from grid node `a` to the adjacent node `b`.
    pub fn edge_id(&self, a: (usize, usize), b: (usize, usize)) -> usize {
        self.edge_between(a, b)
    }

    pub fn road_kind(&self, edge: usize) -> RoadKind {
        self.kinds[edge]
    }

    fn blocks_of(&self, cat: Category) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&b| self.blocks[b] == cat).collect()
    }
}

fn zone_category(rng: &mut Rng, r: usize, c: usize, w: usize, h: usize) -> Category {
    if r % 10 == 5 && c % 10 == 5 {
        return Category::Station;
    }
    let dx = (c as f64 + 0.5) / w as f64 - 0.5;
    let dy = (r as f64 + 0.5) / h as f64 - 0.5;
    let d = (dx * dx + dy * dy).sqrt();
    use Category::*;
    let table: &[(Category, f64)] = if d < 0.18 {
        &[(Office, 0.5), (Mall, 0.3), (Residential, 0.15), (Park, 0.05)]
    } else if d < 0.38 {
        &[(Residential, 0.5), (School, 0.15), (Park, 0.15), (Mall, 0.1), (Office, 0.1)]
    } else {
        &[(Residential, 0.6), (Park, 0.25), (School, 0.1), (Office, 0.05)]
    };
    pick(rng, table)
}

fn pick<X: Copy>(rng: &mut Rng, table: &[(X, f64)]) -> X {
    let total: f64 = table.iter().map(|(_, w)| w).sum();
    let mut u = rng.uniform(0.0, total);
    for &(x, w) in table {
        if u < w {
            return x;
        }
        u -= w;
    }
    table[table.len() - 1].0
}

/// Origin and destination categories by hour of day.
fn journey_purposes(hour: u32) -> &'static [((Category, Category), f64)] {
    use Category::*;
    match hour {
        6..=9 => &[
            ((Residential, Office), 0.4),
            ((Residential, School), 0.25),
            ((Station, Office), 0.15),
            ((Residential, Station), 0.2),
        ],
        10..=15 => &[
            ((Office, Mall), 0.25),
            ((Residential, Mall), 0.2),
            ((Residential, Park), 0.2),
            ((Office, Office), 0.15),
            ((School, Residential), 0.2),
        ],
        16..=20 => &[
            ((Office, Residential), 0.35),
            ((School, Residential), 0.15),
            ((Office, Mall), 0.2),
            ((Mall, Residential), 0.15),
            ((Station, Residential), 0.15),
        ],
        _ => &[
            ((Mall, Residential), 0.3),
            ((Station, Residential), 0.3),
            ((Residential, Park), 0.2),
            ((Office, Residential), 0.2),
        ],
    }
}

/// Monotone lattice path with direction persistence, as grid nodes.
fn lattice_path(rng: &mut Rng, from: (usize, usize), to: (usize, usize), out: &mut Vec<(usize, usize)>) {
    let (mut r, mut c) = from;
    let mut prev_vertical = rng.chance(0.5);
    while (r, c) != to {
        let dr = to.0.abs_diff(r);
        let dc = to.1.abs_diff(c);
        let vertical = if dr == 0 {
            false
        } else if dc == 0 {
            true
        } else if rng.chance(0.75) {
            prev_vertical
        } else {
            !prev_vertical
        };
        if vertical {
            r = if to.0 > r { r + 1 } else { r - 1 };
        } else {
            c = if to.1 > c { c + 1 } else { c - 1 };
        }
        prev_vertical = vertical;
        out.push((r, c));
    }
}

fn block_corner(city: &SyntheticCity, rng: &mut Rng, block: usize) -> (usize, usize) {
    let (r, c) = (block / city.width, block % city.width);
    (r + rng.below(2), c + rng.below(2))
}

/// Trajectory `index` of the city; independent of every other index.
pub fn generate_trajectory(city: &SyntheticCity, seed: u64, index: usize) -> Trajectory {
    let mut rng = Rng::new(seed, &format!("traj/{index}"));
    let depart = BASE_TIME + index as i64 * DEPARTURE_GAP_S + rng.below(DEPARTURE_GAP_S as usize) as i64;
    let hour = ((depart.rem_euclid(86_400)) / 3_600) as u32;
    let (from_cat, to_cat) = pick(&mut rng, journey_purposes(hour));

    let any = |rng: &mut Rng| rng.below(city.blocks.len());
    let from_blocks = city.blocks_of(from_cat);
    let to_blocks = city.blocks_of(to_cat);
    let corner = |rng: &mut Rng, set: &[usize]| {
        let block = if set.is_empty() { any(rng) } else { set[rng.below(set.len())] };
        block_corner(city, rng, block)
    };
    let mut start = corner(&mut rng, &from_blocks);
    let mut end = corner(&mut rng, &to_blocks);
    for _ in 0..20 {
        if start.0.abs_diff(end.0) + start.1.abs_diff(end.1) >= 4 {
            break;
        }
        start = corner(&mut rng, &from_blocks);
        end = corner(&mut rng, &to_blocks);
    }

    let mut path = vec![start];
    if rng.chance(DETOUR_P) {
        let via = (rng.below(city.height + 1), rng.below(city.width + 1));
        lattice_path(&mut rng, start, via, &mut path);
        lattice_path(&mut rng, via, end, &mut path);
    } else {
        lattice_path(&mut rng, start, end, &mut path);
    }

    // piecewise-linear schedule of (seconds since departure, lng, lat)
    let pace = rng.uniform(0.85, 1.15);
    let mut knots = vec![(0.0, city.node_pos(start.0, start.1))];
    let mut clock = 0.0;
    for w in path.windows(2) {
        let edge = city.edge_between(w[0], w[1]);
        if clock > 0.0 && rng.chance(0.12) {
            clock += rng.uniform(5.0, 40.0);
            knots.push((clock, city.node_pos(w[0].0, w[0].1)));
        }
        let (lo, hi) = city.kinds[edge].speed();
        clock += BLOCK_M / (rng.uniform(lo, hi) * pace);
        knots.push((clock, city.node_pos(w[1].0, w[1].1)));
    }

    let (min_lng, min_lat, max_lng, max_lat) = city.bbox();
    let noise_lat = GPS_NOISE_M / BLOCK_M * city.dlat;
    let noise_lng = GPS_NOISE_M / BLOCK_M * city.dlng;
    let mut points = Vec::new();
    let mut t = 0i64;
    let mut k = 0;
    loop {
        let tf = t as f64;
        if tf > clock {
            break;
        }
        while k + 1 < knots.len() && knots[k + 1].0 < tf {
            k += 1;
        }
        let (lng, lat) = if k + 1 < knots.len() {
            let (t0, a) = knots[k];
            let (t1, b) = knots[k + 1];
            let f = if t1 > t0 { ((tf - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
            (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
        } else {
            knots[k].1
        };
        let lng = (lng + rng.normal(0.0, noise_lng)).clamp(min_lng, max_lng);
        let lat = (lat + rng.normal(0.0, noise_lat)).clamp(min_lat, max_lat);
        points.push(TrajectoryPoint::new(lng, lat, depart + t));
        t += 6 + rng.below(7) as i64;
    }
    Trajectory::new(index as u64, points)
}

/// The city and `num_traj` raw trajectories; trajectory `i` depends only on
/// `(seed, i)`, so a larger request extends a smaller one.
pub fn gen_data(seed: u64, num_traj: usize, width: usize, height: usize) -> Result<(SyntheticCity, Vec<Trajectory>)> {
    if num_traj == 0 {
        return Err(Error::Config("num_traj must be at least 1".into()));
    }
    let city = SyntheticCity::new(seed, width, height)?;
    let trajs = par::map_indexed(num_traj, |i| generate_trajectory(&city, seed, i));
    Ok((city, trajs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn city_is_deterministic_with_text() {
        let a = SyntheticCity::new(7, 6, 5).unwrap();
        let b = SyntheticCity::new(7, 6, 5).unwrap();
        assert_eq!(a.network.edges(), b.network.edges());
        assert_eq!(a.pois.pois(), b.pois.pois());
        assert!(a.network.edges().iter().all(|e| !e.desc.is_empty()));
        assert!(a.pois.pois().iter().all(|p| !p.desc.is_empty()));
        assert_eq!(a.network.edges().len(), 6 * 6 + 7 * 5);
    }

    #[test]
    fn edges_join_their_grid_nodes() {
        let city = SyntheticCity::new(1, 4, 3).unwrap();
        for (a, b) in [((0, 0), (0, 1)), ((2, 3), (3, 3)), ((3, 4), (2, 4)), ((1, 2), (1, 1))] {
            let e = &city.network.edges()[city.edge_id(a, b)];
            let mut got = [e.start, e.end];
            let mut want = [city.node(a.0, a.1), city.node(b.0, b.1)];
            got.sort();
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn trajectories_are_well_formed_and_prefix_stable() {
        let (city, trajs) = gen_data(3, 40, 12, 12).unwrap();
        let (min_lng, min_lat, max_lng, max_lat) = city.bbox();
        for (i, t) in trajs.iter().enumerate() {
            assert_eq!(t.id, i as u64);
            t.validate().unwrap();
            for p in &t.points {
                assert!(p.lng >= min_lng && p.lng <= max_lng && p.lat >= min_lat && p.lat <= max_lat);
            }
            for w in t.points.windows(2) {
                assert!((6..=12).contains(&(w[1].t - w[0].t)));
            }
        }
        for w in trajs.windows(2) {
            assert!(w[0].departure() < w[1].departure());
        }
        let (_, fewer) = gen_data(3, 10, 12, 12).unwrap();
        assert_eq!(&trajs[..10], &fewer[..]);
    }
}
