//! Dense image/grid arithmetic, distances, pooling and deterministic
//! random streams shared by every other module.

mod image;
pub mod io;
mod ops;
mod rng;

pub use image::{Grid, Image, Samples};
pub use ops::{
    bin_edges, blur_image, blur_interleaved, downsample2, gaussian_kernel, gaussian_radius, mse, perceptual_distance,
    pool_to_16x16, smooth_total_variation_grad, total_variation, total_variation_grad, upsample_bilinear,
    upsample_bilinear_adjoint, PooledMap, PERCEPTUAL_SCALES, POOL_SIDE,
};
pub use rng::{mix64, tag_hash, Rng};
