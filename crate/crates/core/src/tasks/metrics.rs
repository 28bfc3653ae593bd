//! Regression and ranking metrics.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; present only when requested.
    pub mape: Option<f64>,
}

/// MAE and RMSE, plus MAPE (in percent) when `with_mape` is set. MAPE
/// refuses zero targets.
pub fn regression_metrics(preds: &[f64], targets: &[f64], with_mape: bool) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::dim("regression_metrics", &[preds.len()], &[targets.len()]));
    }
    let n = preds.len() as f64;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let rmse = (preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    let mape = if with_mape {
        if let Some(i) = targets.iter().position(|&t| t == 0.0) {
            return Err(Error::Input(format!("MAPE undefined: target {i} is zero")));
        }
        Some(100.0 * preds.iter().zip(targets).map(|(p, t)| ((p - t) / t).abs()).sum::<f64>() / n)
    } else {
        None
    };
    Ok(RegressionMetrics { mae, rmse, mape })
}

/// MAE and RMSE of non-negative errors such as great-circle distances.
pub fn error_metrics(errors: &[f64]) -> Result<RegressionMetrics> {
    regression_metrics(errors, &vec![0.0; errors.len()], false)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankMetrics {
    pub acc1: f64,
    pub acc5: f64,
    pub mean_rank: f64,
}

/// From 1-based ranks of the targets.
pub fn rank_metrics(ranks: &[usize]) -> Result<RankMetrics> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(Error::Input("ranks must be non-empty and 1-based".into()));
    }
    let n = ranks.len() as f64;
    let within = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankMetrics {
        acc1: within(1),
        acc5: within(5),
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_value_and_perfect_predictions() {
        let m = regression_metrics(&[110.0], &[100.0], true).unwrap();
        assert!((m.mae - 10.0).abs() < 1e-12 && (m.rmse - 10.0).abs() < 1e-12);
        assert!((m.mape.unwrap() - 10.0).abs() < 1e-12);
        let m = regression_metrics(&[3.0, 7.0], &[3.0, 7.0], true).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, Some(0.0)));
        assert!(matches!(regression_metrics(&[1.0], &[0.0], true), Err(Error::Input(_))));
        assert!(regression_metrics(&[1.0], &[0.0], false).is_ok());
        assert!(regression_metrics(&[1.0, 2.0], &[0.0], false).is_err());
    }

    #[test]
    fn ranks() {
        let m = rank_metrics(&[1, 1, 1]).unwrap();
        assert_eq!((m.acc1, m.acc5, m.mean_rank), (1.0, 1.0, 1.0));
        let m = rank_metrics(&[1, 3, 6, 10]).unwrap();
        assert_eq!((m.acc1, m.acc5, m.mean_rank), (0.25, 0.5, 5.0));
        assert!(rank_metrics(&[0]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = regression_metrics(&p, &t, false).unwrap();
            prop_assert!(m.rmse + 1e-9 >= m.mae);
        }

        #[test]
        fn acc1_at_most_acc5(ranks in prop::collection::vec(1usize..50, 1..40)) {
            let m = rank_metrics(&ranks).unwrap();
            prop_assert!(m.acc1 <= m.acc5 && m.mean_rank >= 1.0);
        }
    }
}
