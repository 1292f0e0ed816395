//! Blockade histograms, Voigt peak fitting, FWHM labeling and stratified splits.

mod faddeeva;
mod fit;
mod histogram;
mod label;
mod split;
mod voigt;

pub use faddeeva::faddeeva;
pub use fit::{fit_voigt_peaks, fit_voigt_peaks_with, initial_peaks, FitOptions, FitResult};
pub use histogram::{
    build_histogram, freedman_diaconis_bins, histogram_from_values, local_maxima, BlockadeHistogram,
    LocalMax,
};
pub use label::{label_events, label_values, AmbiguityPolicy, Label, LabelCounts, LabeledEvent};
pub use split::{proportional_counts, stratified_split, Split, SplitAssignment};
pub use voigt::{fwhm_olivero, fwhm_voigt, voigt_density, voigt_value, VoigtPeak};
