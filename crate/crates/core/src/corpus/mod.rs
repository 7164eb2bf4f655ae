//! Synthetic multi-view captioning data: scenes, per-view encoders,
//! caption text handling and vocabularies.

mod dataset;
mod encoder;
mod scene;
mod vocab;

pub use dataset::{generate_dataset, with_markers, Dataset, DatasetConfig, Example, Split};
pub use encoder::{encode_scene, SyntheticEncoder, INFO_MASKS};
pub use scene::{Attribute, Object, Scene, COLORS, POSITIONS, SHAPES, SIZES, TEMPLATE_COUNT};
pub use vocab::{frequent_word_set, normalize_tokenize, Vocabulary, END, PAD, RESERVED, START, UNK};
