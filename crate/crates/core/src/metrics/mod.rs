//! Evaluation measures for saliency maps and dataset-level reports.

pub mod fmax;
pub mod measures;
pub mod pair;
pub mod report;

pub use fmax::{f_max, pr_curve, FMax, FMaxAccumulator, F_BETA2, LEVELS};
pub use measures::{e_measure, mae, s_measure, weighted_f};
pub use pair::EvalPair;
pub use report::{evaluate_dataset, evaluate_dirs, evaluate_pairs, load_pair, write_report, Evaluator, MetricReport};
