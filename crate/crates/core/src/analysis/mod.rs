//! Neuron statistics over pair datasets, layer probes, and CSV export.

pub mod export;
pub mod probe;
pub mod stats;

pub use export::{export_heatmap, heatmap_csv, probe_report_csv, read_stats, write_stats};
pub use probe::{train_all_probes, train_probe, Probe, ProbeConfig, ProbeResult};
pub use stats::{
    compute_correlation, compute_nmd, depth_concentration, rank_neurons, CorrMap, NeuronMap, NmdMap, RankedNeuron,
};
