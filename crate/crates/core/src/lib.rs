//! 2D U-Net brain tumor segmentation.
//!
//! The crate bundles a small reverse-mode autodiff engine with the
//! convolutional primitives a U-Net needs, the network itself, soft Dice +
//! Adam training, on-the-fly augmentation, region-wise Dice/Sensitivity
//! evaluation, cross-validation folds and the binary volume/checkpoint
//! formats used by the `tumorseg` command line tool.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optimize;
pub mod pipeline;
pub mod plane;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use metrics::RegionKind;
pub use model::{UNetConfig, UNetModel};
pub use plane::{Image, LabelPlane, Plane};
pub use tensor::Tensor;

/// Mixes a master seed with a stream of indices (epoch, sample, ...) into an
/// independent sub-seed.
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    stream
        .iter()
        .fold(splitmix(master), |acc, &s| splitmix(acc ^ splitmix(s)))
}
