//! Clustering engines used by the home detectors: flat-kernel mean shift,
//! distance-cut agglomerative clustering, and stay-point/stay-region
//! detection.

mod agglomerative;
mod grid;
mod mean_shift;
mod stay;

pub use agglomerative::{groups, threshold_agglomerate, Linkage};
pub use mean_shift::{largest_cluster, mean_shift, Cluster, MeanShiftConfig};
pub use stay::{
    build_stay_regions, detect_stay_points, detect_stay_points_in, night_stay_regions, StayConfig, StayPoint,
    StayRegion,
};
