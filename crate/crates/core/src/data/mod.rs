//! Datasets, vocabulary, image preprocessing and the synthetic scene generator.

mod image;
mod manifest;
mod synth;
mod vocab;

pub use self::image::{load_and_preprocess_image, preprocess_encoded, preprocess_rgb, ImageTensor, IMAGE_SIZE};
pub use manifest::{load_manifest, merge_datasets, DatasetManifest, ImageCaptionRecord, Split};
pub use synth::{
    generate_synthetic_dataset, render_scene, scene_captions, ObjectColor, SceneClass, SyntheticSceneSpec,
};
pub use vocab::{build_vocabulary, normalize_words, TokenSequence, Vocabulary};
