//! Task heads, supervised fine-tuning and evaluation metrics.

mod heads;
mod metrics;
mod tasks;
mod train;


pub use heads::{bilinear_map, pool_tokens, reduce_tokens, Head, HeadConfig, Task, TemporalReduce};
pub use metrics::{
    argmax, average_precision, compute_metrics, compute_metrics_with_scores, confusion_matrix, f1_score,
    metrics_from_confusion, ClassMetrics, MetricReport,
};
pub use tasks::{change_task, classification_task, segmentation_task};
pub use train::{
    adapt_frames, cross_entropy, evaluate, finetune, inverse_frequency_weights, load_head, normalize_task, predict, save_head,
    FinetuneConfig, FinetuneResult, HeadManifest, Target, TaskSample, HEAD_VERSION,
};
