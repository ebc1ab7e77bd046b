//! Deformation models and backward warping.

mod ffd;
mod homography;
mod models;
mod sampling;
mod tps;

pub use ffd::{
    bspline_ffd_field, bspline_ffd_field_with, edffd_field, edffd_field_with, edffd_weight_matrix, ControlGrid,
    DisplacementField, Evaluation, EDFFD_CUTOFF, TRUNCATION_TOLERANCE,
};
pub use homography::{
    apply_homography, canvas_corners, fit_homography, four_point_jacobian, four_point_to_homography, invert_homography,
    FourPointMotion, Homography,
};
pub use models::DeformationModel;
pub use sampling::{compose_sampling_map, compose_sampling_map_with, warp_image, warp_mask, Composition, SamplingMap};
pub use tps::{tps_field, ThinPlateSpline};
