//! Neuroevolution of masked-gate LSTM recurrent networks.
//!
//! The crate is organised around the pipeline it implements:
//!
//! * [`flightdata`] ingests per-second multichannel flight recordings, normalizes
//!   them, ranks channels by cross-correlation with the vibration target and cuts
//!   them into fixed-length training windows.
//! * [`lstm`] holds the M1/M2 cells, the three network architectures and the
//!   binary model format.
//! * [`trainer`] trains networks with hand-written backpropagation through time.
//! * [`aco`] evolves the shared gate connectivity ([`Mesh`]) with ant colony
//!   optimization.
//! * [`dist`] runs mesh evaluation on an asynchronous master/worker protocol.

pub mod aco;
pub mod dist;
pub mod flightdata;
pub mod lstm;
pub mod trainer;

pub use aco::{AcoConfig, Colony, Pheromones, Population};
pub use flightdata::{FlightSeries, WindowedDataset};
pub use lstm::{Arch, Mesh, Network};
pub use trainer::{TrainConfig, TrainReport};
