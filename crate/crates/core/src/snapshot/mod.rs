//! On-disk formats: binary activation/weight snapshots and the JSONL metric log.

mod metric_log;
mod sasn;

pub use metric_log::{append_metric, encode_record, parse_metric_log, read_metric_log, MetricLogWriter, MetricRecord};
pub use sasn::*;
