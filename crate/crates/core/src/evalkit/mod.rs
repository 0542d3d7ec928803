//! Forecasting and planning metrics, the Copy&Paste baseline and reports.

mod metrics;
mod plan;
mod report;


pub use metrics::{iou_binary, miou_semantic, non_free_classes, IouAccumulator, MiouResult};
pub use plan::{collision_frames, collision_rate, l2_error, CollisionParams, L2Mode, Trajectory};
pub use report::{
    copy_paste_baseline, horizon_frames, ForecastEvaluator, ForecastReport, HorizonScores, PlanEvaluator, PlanReport,
    HORIZONS,
};
