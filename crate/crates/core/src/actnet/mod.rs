//! Value networks with per-layer sine/rectifier schedules, exact input and
//! parameter gradients, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod net;
mod schedule;
mod trig;

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use net::{
    init_network, BatchTape, Dense, ForwardTrace, Gradients, InputGradient, InputNormalization,
    ValueNet,
};
pub use schedule::{parse_structure, Activation, ActivationSchedule};

/// Frequency of the sine layer that consumes the input coordinates.
pub const DEFAULT_OMEGA0: f64 = 30.0;

/// Hidden width of the full-size network.
pub const FULL_HIDDEN_WIDTH: usize = 512;

/// Hidden width of the desk-scale preset.
pub const DESK_HIDDEN_WIDTH: usize = 128;

/// The nine structures studied in the experiments.
pub const STUDIED_SCHEDULES: [&str; 9] = [
    "ssssl", "rrrrl", "ssrsl", "srsrl", "rrrsl", "srrrl", "ssrrsl", "srsrrl", "sssssl",
];

#[cfg(test)]
mod tests;
