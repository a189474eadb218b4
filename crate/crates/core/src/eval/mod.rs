//! Evaluation: AUROC, the synthetic outlier generator and the timing harness.

mod auroc;
mod bench;
mod synth;

pub use auroc::{auroc, LabeledScores};
pub use bench::{bench_refine, BenchDims, BenchReport, StageStats};
pub use synth::{
    synth_dataset, synth_generate, SynthDataset, SynthInstance, SynthQuery, SynthSpec,
};
