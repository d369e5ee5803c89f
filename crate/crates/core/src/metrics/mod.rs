//! Evaluation metrics, exact random-search oracles and the multi-seed
//! experiment runner.

mod stats;
mod suite;

pub use stats::{
    average_ranks, delta_ap, expected_random_best, expected_random_rank, mean, normalized_rank,
    paired_t_test, rank_correlation, std_dev, CorrelationKind, PairedTest,
};
pub use suite::{
    run_method, run_online, run_random, run_suite, run_suite_logged, task_order, warmed_server, Aggregate, ExperimentReport, Method,
    ReportRow, REPORT_HEADER,
};
