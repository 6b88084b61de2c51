//! placeholder
pub struct MetricsReport;
pub struct IntervalPredictor;
