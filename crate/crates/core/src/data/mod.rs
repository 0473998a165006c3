//! Feature files, pseudo-embeddings, the synthetic generator and dataset manifests.

pub(crate) mod binary;
pub mod embed;
pub mod feature_file;
pub mod manifest;
pub mod synthetic;

pub use embed::{embed_sentence, pseudo_embed};
pub use feature_file::{decode_features, encode_features, read_features, write_features};
pub use manifest::{load_dataset, write_dataset, Manifest, ManifestEntry};
pub use synthetic::{generate_range, generate_synthetic, linear_oracle, SyntheticSpec};
