//! Synthetic videos, reconstruction metrics and the binary file formats.

pub mod io;
pub mod metrics;
pub mod synthetic;

pub use io::{
    export_ppm, load_checkpoint, load_raw_video, read_checkpoint, read_raw_video, save_checkpoint, save_raw_video,
    write_checkpoint, write_raw_video, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, RAW_VIDEO_MAGIC,
};
pub use metrics::{psnr, ssim, video_ssim};
pub use synthetic::{gen_synthetic, SyntheticKind, SyntheticVideoSpec};
