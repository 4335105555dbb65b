//! Trials, trial sets, the binary trial format, synthetic data and
//! preprocessing.

mod filter;
mod format;
mod synth;
mod trial;

pub use filter::{bandpass, bandpass_taps, crop_epoch, lowpass_taps, resample, taps_for_rate};
pub use format::{
    load_manifest, load_trialset, manifest_path, read_trialset, save_trialset, save_trialset_with,
    write_trialset, Manifest, TRIAL_MAGIC, TRIAL_VERSION,
};
pub use synth::{class_channel_map, generate_synthetic, SynthSpec};
pub use trial::{split_calibration, Trial, TrialSet};
