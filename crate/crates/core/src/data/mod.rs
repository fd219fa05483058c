//! Samples, netpbm I/O, synthetic data, augmentation and dataset directories.

mod augment;
mod dataset;
pub mod netpbm;
pub mod synthetic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{crop_flip, flip_image, pad_labels, pad_to_mean, random_crop_flip, CropWindow};
pub use dataset::{channel_means, Dataset, Manifest, ManifestEntry};
pub use netpbm::{read_netpbm, read_pgm, read_ppm, write_pgm, write_ppm, Netpbm};
pub use synthetic::{generate_shapes_dataset, SyntheticSpec};

use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const DEFAULT_IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1 x 3 x H x W` in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for stream `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}
