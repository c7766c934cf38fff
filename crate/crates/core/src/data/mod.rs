//! Clips, manifests, synthetic videos, augmentation and fold splitting.

mod augment;
mod clip;
mod folds;
mod manifest;
mod synth;

pub use augment::{augment, augment_traced, augment_with, AugmentParams, AugmentStrategy};
pub use clip::{decode_clip, encode_clip, read_clip, split_clips, write_clip, Clip, CLIP_MAGIC};
pub use folds::{kfold_split, Fold};
pub use manifest::{read_manifest, write_manifest, Manifest, SampleRecord};
pub use synth::{
    derive_rng, render_video, synth_dataset, synth_generate, FatigueSampling, SynthParams, SynthSample, VideoMeta,
};
