pub mod io;
pub mod synth;

pub use io::{read_dataset, read_sidecar, write_dataset, DatasetSidecar};
pub use synth::*;
