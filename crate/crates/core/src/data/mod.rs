//! Datasets, class folds, episode sampling, class descriptions and prompts.

pub mod descriptions;
pub mod episode;
pub mod folds;
pub mod image;
pub mod meta;
pub mod prompt;
pub mod synth;

pub use descriptions::{load_class_descriptions, parse_class_descriptions, ClassRecord};
pub use episode::{sample_episode, Episode};
pub use folds::{make_folds, FoldSpec, Split};
pub use image::{Image, Mask};
pub use meta::{Dataset, DatasetMeta, ImageRecord, Sample};
pub use prompt::{build_prompt, PromptSequence};
pub use synth::{gen_synthetic_dataset, ShapeKind, SynthConfig, SyntheticDataset};
