pub mod augment;
pub mod io;
pub mod normalize;
pub mod sample;
pub mod split;
pub mod synth;
pub mod tiling;

pub use augment::{augment, AugmentConfig, AugmentationParams, ColorParams, Crop, SpatialParams};
pub use io::{read_sample, write_sample};
pub use normalize::{compute_normalization_stats, normalize, NormalizationStats};
pub use sample::{Dims, LabelMask, SceneSample};
pub use split::{split_dataset, DatasetSplit, SplitName};
pub use synth::{generate_synthetic_scene, ClassSpec, GeneratorConfig};
pub use tiling::{pad_spectral_channels, tile_scene};
