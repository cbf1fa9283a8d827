//! Benchmark fixtures shared by the bench targets.

use neuroevo_core::flightdata::{make_windows, normalize_split, synth_flights};
use neuroevo_core::{Arch, WindowedDataset};

/// A small normalized dataset from a seeded synthetic corpus.
pub fn dataset(arch: Arch, flights: usize, len: usize) -> WindowedDataset {
    let corpus = synth_flights(1, flights, len, 8).expect("synthetic corpus");
    let (train, _, _) = normalize_split(&corpus.flights, &[]).expect("normalize");
    let order: Vec<String> = train[0].channel_names().map(String::from).collect();
    make_windows(&train, arch.window_len(), 10, &order).expect("windows")
}
