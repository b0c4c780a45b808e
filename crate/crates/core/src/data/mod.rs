//! Paired LR/HR data: resampling, cropping, normalization, synthetic pairs
//! and PNG directories.

mod dataset;
mod io;
mod resize;
mod synth;

pub use dataset::{crop_pair, denormalize, normalize, ImagePair, PairedPatchDataset, TrainingBatch};
pub use io::{list_pngs, load_dir_dataset, read_png, write_png};
pub use resize::{bicubic_resize, bicubic_upsample, cubic_kernel, BICUBIC_A};
pub use synth::{synth_dataset, synth_image};
