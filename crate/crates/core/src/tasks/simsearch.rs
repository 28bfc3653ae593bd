//! Similar-trajectory search: a query made of the odd points of a
//! trajectory must retrieve the even points of the same trajectory among
//! distractors.

use super::metrics::{rank_metrics, RankMetrics};
use crate::error::{Error, Result};
use crate::features::Trajectory;
use crate::tensor::rng::Rng;

/// Length of the uniform resampling used by the raw-space distance.
pub const RAW_POINTS: usize = 10;
/// Closest raw-space neighbours of the query removed from the candidates.
pub const DISCARD_TOP: usize = 10;

/// Points at 1-based odd positions (the query) and even positions (the target).
pub fn odd_even_split(traj: &Trajectory) -> (Trajectory, Trajectory) {
    let n = traj.len();
    (traj.select((0..n).step_by(2)), traj.select((1..n).step_by(2)))
}

/// `k` evenly spaced indices over `0..n`, both endpoints included.
pub fn uniform_indices(n: usize, k: usize) -> Vec<usize> {
    if n == 0 || k == 0 {
        return Vec::new();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k)
        .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect()
}

/// Mean squared coordinate difference after resampling both trajectories to
/// [`RAW_POINTS`] points.
pub fn raw_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let ia = uniform_indices(a.len(), RAW_POINTS);
    let ib = uniform_indices(b.len(), RAW_POINTS);
    let sum: f64 = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| {
            let (p, q) = (a.points[i], b.points[j]);
            (p.lng - q.lng).powi(2) + (p.lat - q.lat).powi(2)
        })
        .sum();
    sum / (2 * RAW_POINTS) as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// 1-based rank of `target` among `db` by cosine similarity to `query`.
/// Candidates tied with the target rank ahead of it.
pub fn cosine_rank(query: &[f64], db: &[Vec<f64>], target: usize) -> usize {
    let st = cosine(query, &db[target]);
    1 + db
        .iter()
        .enumerate()
        .filter(|&(i, v)| i != target && cosine(query, v) >= st)
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSearchSetup {
    pub num_queries: usize,
    pub db_size: usize,
    pub seed: u64,
}

impl Default for SimSearchSetup {
    fn default() -> Self {
        Self {
            num_queries: 200,
            db_size: 2000,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSearchOutcome {
    pub metrics: RankMetrics,
    pub ranks: Vec<usize>,
}

/// Runs the protocol over `corpus` (the test split). `embed` maps
/// trajectories to embedding vectors, in order.
///
/// For each sampled trajectory, the other corpus trajectories are ordered
/// by raw-space distance to the query, the closest [`DISCARD_TOP`] are
/// dropped, and `db_size` of the rest are drawn at random. Every database
/// entry, the target included, is the even-point half of its trajectory.
pub fn simsearch<F>(corpus: &[Trajectory], setup: &SimSearchSetup, embed: F) -> Result<SimSearchOutcome>
where
    F: Fn(&[Trajectory]) -> Result<Vec<Vec<f64>>>,
{
    let needed = setup.db_size + DISCARD_TOP + 1;
    if corpus.len() < needed || setup.num_queries == 0 || setup.num_queries > corpus.len() {
        return Err(Error::Config(format!(
            "similarity search over {} trajectories needs at least {needed} (database {} + {DISCARD_TOP} discarded + target) and 1..={} queries, got {}",
            corpus.len(),
            setup.db_size,
            corpus.len(),
            setup.num_queries
        )));
    }
    if let Some(t) = corpus.iter().find(|t| t.len() < 4) {
        return Err(Error::Input(format!("trajectory {} has {} points; halves need at least 2", t.id, t.len())));
    }
    let mut rng = Rng::new(setup.seed, "simsearch");
    let mut picks: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut picks);
    picks.truncate(setup.num_queries);

    let halves: Vec<(Trajectory, Trajectory)> = corpus.iter().map(odd_even_split).collect();
    let evens: Vec<Trajectory> = halves.iter().map(|h| h.1.clone()).collect();
    let queries: Vec<Trajectory> = picks.iter().map(|&q| halves[q].0.clone()).collect();
    let even_emb = embed(&evens)?;
    let query_emb = embed(&queries)?;
    if even_emb.len() != corpus.len() || query_emb.len() != queries.len() {
        return Err(Error::Input("embedding function returned the wrong number of vectors".into()));
    }

    let mut ranks = Vec::with_capacity(picks.len());
    for (qi, &q) in picks.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = (0..corpus.len())
            .filter(|&j| j != q)
            .map(|j| (raw_distance(&queries[qi], &corpus[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut pool: Vec<usize> = others[DISCARD_TOP..].iter().map(|&(_, j)| j).collect();
        let mut draw = rng.derive(&format!("db/{qi}"));
        draw.shuffle(&mut pool);
        let mut db = Vec::with_capacity(setup.db_size + 1);
        db.push(even_emb[q].clone());
        db.extend(pool[..setup.db_size].iter().map(|&j| even_emb[j].clone()));
        ranks.push(cosine_rank(&query_emb[qi], &db, 0));
    }
    Ok(SimSearchOutcome {
        metrics: rank_metrics(&ranks)?,
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TrajectoryPoint;

    fn traj(id: u64, n: usize, x0: f64) -> Trajectory {
        Trajectory::new(
            id,
            (0..n).map(|i| TrajectoryPoint::new(x0 + 1e-4 * i as f64, 30.6, 10 * i as i64)).collect(),
        )
    }

    #[test]
    fn odd_even_halves() {
        let t = traj(1, 6, 104.0);
        let (q, g) = odd_even_split(&t);
        assert_eq!(q.points, vec![t.points[0], t.points[2], t.points[4]]);
        assert_eq!(g.points, vec![t.points[1], t.points[3], t.points[5]]);
    }

    #[test]
    fn uniform_indices_include_endpoints() {
        assert_eq!(uniform_indices(10, 10), (0..10).collect::<Vec<_>>());
        let idx = uniform_indices(37, 10);
        assert_eq!((idx[0], idx[9], idx.len()), (0, 36, 10));
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(uniform_indices(3, 10).len(), 10);
    }

    #[test]
    fn ranking_is_scale_invariant() {
        let mut rng = Rng::new(2, "cos");
        let q: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
        let db: Vec<Vec<f64>> = (0..30).map(|_| (0..8).map(|_| rng.normal(0.0, 1.0)).collect()).collect();
        let scaled: Vec<Vec<f64>> = db.iter().map(|v| v.iter().map(|x| 3.5 * x).collect()).collect();
        for t in 0..30 {
            assert_eq!(cosine_rank(&q, &db, t), cosine_rank(&q, &scaled, t));
        }
        let mut db2 = db.clone();
        db2[4] = q.clone();
        assert_eq!(cosine_rank(&q, &db2, 4), 1);
    }

    #[test]
    fn perfect_and_random_embeddings() {
        let corpus: Vec<Trajectory> = (0..300).map(|i| traj(i, 8 + (i % 5) as usize, 104.0 + 1e-3 * i as f64)).collect();
        let setup = SimSearchSetup {
            num_queries: 50,
            db_size: 200,
            seed: 1,
        };
        // the start point identifies a trajectory in both halves
        let oracle = |ts: &[Trajectory]| Ok(ts.iter().map(|t| vec![1.0, t.points[0].lng - 104.15]).collect());
        let out = simsearch(&corpus, &setup, oracle).unwrap();
        assert_eq!((out.metrics.acc1, out.metrics.mean_rank), (1.0, 1.0));

        let random = |ts: &[Trajectory]| {
            Ok(ts
                .iter()
                .map(|t| {
                    let mut r = Rng::new(t.points[1].t as u64 ^ t.id.wrapping_mul(0x9e37), "emb");
                    (0..64).map(|_| r.normal(0.0, 1.0)).collect()
                })
                .collect())
        };
        let setup = SimSearchSetup {
            num_queries: 200,
            db_size: 200,
            seed: 2,
        };
        let out = simsearch(&corpus, &setup, random).unwrap();
        assert!(out.metrics.acc1 < 5.0 / 201.0, "{:?}", out.metrics);
        assert!(out.metrics.acc1 <= out.metrics.acc5 && out.metrics.mean_rank >= 1.0);
        let again = simsearch(&corpus, &setup, random).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn small_corpus_is_config_error() {
        let corpus: Vec<Trajectory> = (0..20).map(|i| traj(i, 8, 104.0)).collect();
        let setup = SimSearchSetup {
            num_queries: 5,
            db_size: 10,
            seed: 0,
        };
        assert!(matches!(simsearch(&corpus, &setup, |_| Ok(vec![])), Err(Error::Config(_))));
    }
}
