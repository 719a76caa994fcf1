// SPDX-License-Identifier: MIT OR Apache-2.0

//! Measurements on trained models: flag readout accuracy, probe-based
//! erosion, perplexity cost of fence width, clamp steering, and the
//! normalized fence heatmap.

mod erosion;
mod flags;
mod heatmap;
mod perplexity;
mod probe;
mod steering;
mod sweep;

pub use erosion::{erosion_experiment, ProbeReport, ProbeRow};
pub use flags::{flag_accuracy, FlagReport};
pub use heatmap::{trace_grid, LegendEntry, TraceGrid};
pub use perplexity::{perplexity, sequence_nll};
pub use probe::{pool_hidden, train_probe, LinearProbe, ProbeConfig, ProbeFit, MIN_PER_CLASS};
pub use steering::{
    check_neutral, clamp_outcome, control_shift, sample_completions, ClampOutcome, ControlShiftReport,
    ShiftRow, SteeringConfig,
};
pub use sweep::{fence_width_sweep, sweep_fence, train_width, SweepReport, SweepRow, SweepSetup};

/// Default probe/readout layer, 0-based: the 1-based layer ⌈K/2⌉ + 1.
pub fn default_probe_layer(n_layers: usize) -> usize {
    n_layers.div_ceil(2)
}
