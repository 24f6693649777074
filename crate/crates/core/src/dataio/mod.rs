//! NPY/NPZ containers, case archives and checkpoints.

mod case;
pub mod checkpoint;
mod npy;
mod npz;
mod zip;

pub use case::{list_cases, read_case_npz, CaseBox, CaseRecord, ImageLayout};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use npy::{read_npy, write_npy, NpyArray, NpyData};
pub use npz::Npz;
pub use zip::{read_zip, write_zip};
