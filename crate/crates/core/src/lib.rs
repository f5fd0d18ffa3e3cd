//! Hypercolumn pixel classification.
//!
//! Per-pixel descriptors are built by bilinearly upsampling several layers
//! of a convolutional backbone and concatenating them. A K×K grid of
//! location-specific logistic classifiers scores those descriptors; the
//! classifiers are evaluated as convolutions at native resolution and the
//! resulting score maps are upsampled, which is equivalent to, and much
//! cheaper than, materializing the descriptors.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: feature maps, bilinear resize, convolution, pooling
//! - [`backbone`]: small CNN with forward/backward passes
//! - [`hypercolumn`]: descriptor assembly and the fast scoring path
//! - [`grid`]: interpolated grid of logistic classifiers
//! - [`hypernet`]: the grid grafted onto the backbone, trainable end to end
//! - [`tasks`]: label generation, mask/keypoint/part prediction, NMS
//! - [`eval`]: AP^r, AP^r_part, APK, mean IU, permutation tests
//! - [`synthdata`]: seeded stick-figure scenes with candidate detections
//! - [`experiment`]: reproducible train/predict/eval pipelines

pub mod backbone;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grid;
pub mod heatmap;
pub mod hypercolumn;
pub mod hypernet;
pub mod io;
pub mod synthdata;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
