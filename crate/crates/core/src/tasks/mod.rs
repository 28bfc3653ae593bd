//! Downstream evaluation: destination prediction, arrival-time estimation
//! and similar-trajectory search.

pub mod metrics;
pub mod regression;
pub mod report;
pub mod simsearch;

pub use metrics::{error_metrics, rank_metrics, regression_metrics, RankMetrics, RegressionMetrics};
pub use regression::{
    task_samples, train_eval_regression, truncate_for_task, HeadTraining, Mode, RegressionOutcome, Task, TaskHead,
    TaskSample,
};
pub use report::EvalReport;
pub use simsearch::{cosine_rank, odd_even_split, raw_distance, simsearch, SimSearchOutcome, SimSearchSetup};
