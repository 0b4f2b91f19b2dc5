//! File formats, the synthetic benchmark generator, scribble synthesis and dataset manifests.

pub mod formats;
pub mod manifest;
pub mod scribble;
pub mod synth;

pub use formats::{read_image, read_labels, write_image, write_labels};
pub use manifest::{Dataset, Manifest, Record, Sample, Split};
pub use scribble::{synth_scribbles, ScribbleConfig};
pub use synth::{synth_dataset, synth_sample, SynthConfig};
