//! Timing and memory harness comparing dense, per-layer sparse and
//! collaborative attention stacks.

mod image;
mod run;

pub use image::{psnr_y, read_ppm, write_ppm, Image, PSNR_CAP_DB};
pub use run::{
    run_benchmark, time_attention, to_csv, write_csv, AttentionKind, BenchConfig, BenchMode,
    BenchNetwork, BenchRecord, CSV_HEADER,
};
