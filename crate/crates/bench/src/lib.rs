//! Fixtures shared by the benchmarks.

use vmfcal::synth::{make_dataset, SynthDataset, SynthSpec};
use vmfcal::trainer::init_classifier;
use vmfcal::vmf::{uniform_prior, VmfClassifier};

/// Random classifier with `classes` classes in dimension `dim`.
pub fn random_classifier(classes: usize, dim: usize) -> VmfClassifier {
    init_classifier(classes, dim, 16.0, uniform_prior(classes), 7).expect("valid fixture")
}

/// The default toy dataset.
pub fn toy_dataset() -> SynthDataset {
    make_dataset(&SynthSpec::default()).expect("default spec is valid")
}
