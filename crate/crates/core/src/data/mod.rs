mod io;
mod probe;
mod sample;
mod synth;

pub use io::{
    export_manifest, load_dataset, load_sample, read_manifest, read_matrix, write_matrix, Manifest, ManifestEntry,
    MANIFEST_NAME,
};
pub use probe::{mean_features, single_modality_probe, LogisticProbe};
pub use sample::{Dataset, MultimodalSample};
pub use synth::{clean_value, render, rule_decode, synth_generate, SynthLatent, NOISE_STD};
