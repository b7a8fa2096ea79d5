//! Pair manifests, tracking sequences, results files and the synthetic
//! paired-modality generator.

mod manifest;
mod sequence;
pub mod synth;

pub use manifest::{
    load_aligned_pairs, load_pair_images, load_pair_manifest, write_aligned_pairs, write_pair_manifest, AlignedPair,
    PairManifestEntry,
};
pub use sequence::{
    load_sequence, read_results, write_results, write_sequence, FrameSource, InMemorySequence, Sequence,
};
pub use synth::{generate_sequences, generate_synthetic_pairs, simulate_detections, SeqSpec, SynthPair, SynthSpec, TirTransform};
