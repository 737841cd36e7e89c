//! Synthetic blurry/sharp training data from sharp frame sequences.

pub mod corpus;
pub mod flow;
pub mod forge;
pub mod image_ops;
pub mod psf;
pub mod sharpness;
pub mod subframe;
pub mod synthetic;

pub use corpus::{forge_corpus, Corpus, Manifest};
pub use flow::{bidirectional_flow, estimate_flow, warp_bilinear, FlowDirection, FlowField, FlowOpts};
pub use forge::{make_samples, ForgeConfig, ForgeSummary, Provenance, TrainingSample, FRAMES_PER_SAMPLE};
pub use psf::{apply_psf, sample_psf, PsfKernel, PsfOpts, PSF_SIZES};
pub use sharpness::{sharpness_score, Sharpness};
pub use subframe::{average_blur, synth_subframe, SubframeSpec};
