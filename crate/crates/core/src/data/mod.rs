//! Sequence I/O, preprocessing, synthetic data and the plain-text ingestor.

mod ingest;
mod preprocess;
mod sequence;
mod synth;

pub use ingest::{ingest_point_lists, parse_point_lists};
pub use preprocess::{subsample_sequence, uniform_frame_indices};
pub(crate) use sequence::write_atomic;
pub use sequence::{
    decode_sequence, encode_sequence, load_sequence, save_sequence, LabeledSequence, PointCloudSequence, SEQUENCE_MAGIC,
    SEQUENCE_VERSION,
};
pub use synth::{random_sequence, synth_dataset, synth_sample, translate_velocity, MotionClass, Split, SynthSpec};
