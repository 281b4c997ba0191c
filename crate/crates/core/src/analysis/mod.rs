//! Measurements on teleported networks: gradient rescaling, angle
//! statistics and loss-landscape probes.

mod angles;
mod gradient;
mod landscape;

pub use angles::{angle_between, micro_angle_experiment, AngleSample, MicroAngleConfig, PairKind};
pub use gradient::{
    analytic_teleported_gradient, expected_squared_ratio, gradient_magnitude_teleported, normalized_gradient_gap,
};
pub use landscape::{
    curvature_proxy, interpolate_networks, level_curve_probe, level_curve_row, InterpolationPoint, LevelCurveRow,
};
