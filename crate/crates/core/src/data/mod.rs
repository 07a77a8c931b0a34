//! Dataset schema, file format, synthetic generator and sampling policy.

pub mod io;
pub mod rules;
pub mod sampling;
pub mod schema;
pub mod synth;

pub use io::{load_dataset, save_dataset};
pub use rules::RuleSet;
pub use sampling::{sample_training_pairs, split_dataset, TrainingPair};
pub use schema::{
    Dataset, DatasetManifest, ImageRecord, Mode, ObjectInstance, Relation, Split, Splits, NO_RELATIONSHIP,
};
pub use synth::{generate_synthetic, rasterize, render_dataset, SynthConfig};
