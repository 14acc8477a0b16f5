//! Image I/O, procedural scenes, underwater degradation and paired datasets.

mod dataset;
mod image;
mod synth;

pub use dataset::{
    make_dataset, synth_pair, DatasetManifest, DatasetParams, DatasetSpec, DegradationRecord, ManifestEntry,
    Split, MANIFEST_FILE, SIDECAR_FILE,
};
pub use image::{decode_ppm, encode_ppm, read_ppm, write_ppm, write_text_atomic, ImageBuffer};
pub(crate) use image::write_atomic;
pub use synth::{degrade, gen_clean, DegradationParams, DegradationPolicy, DepthField};
