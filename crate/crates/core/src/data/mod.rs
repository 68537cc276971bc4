//! On-disk dataset layout, resizing and synthetic composite generation.

mod dataset;
mod image_io;
mod resize;
mod synth;

pub use dataset::{
    load_all, load_dataset, save_triplet, write_split_file, DatasetStream, ImageTriplet, LoadWarning, Split,
    BACKGROUND_TOLERANCE,
};
pub use image_io::{load_mask, load_rgb, quantize, save_mask, save_rgb};
pub use resize::{resize_bilinear, resize_mask};
pub use synth::{
    apply_shift, sample_mask, synth_real_image, synthesize_composite, write_synthetic_dataset, ColorShift, ShapeFamily,
    SynthSpec,
};
