//! Routing-overlap, retrieval, semantic-score and convergence analyses.

pub mod convergence;
pub mod overlap;
pub mod report;
pub mod retrieval;
pub mod semantic;

pub use convergence::{convergence_ab, loss_at, median, run_arm, ArmResult, ConvergenceReport, MedianAt};
pub use overlap::{expert_overlap_iou, pick_similar_dissimilar, stage_partition, staged_iou_report, summarize, IouReport, StageMean};
pub use report::{render_iou_table, write_records, MetricPlugin, StyleFeatureCosine};
pub use retrieval::{encoder_retrieval, retrieval_report, RetrievalReport};
pub use semantic::{aggregate, score_pairs, score_response, semantic_score, MockSemanticJudge, SemanticScoreReport};
