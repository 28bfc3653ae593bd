//! Synthetic data generation, file formats and preprocessing.

pub mod io;
pub mod preprocess;
pub mod synth;

pub use io::{read_annotations, read_trajectories, write_annotations, write_trajectories, Annotation, DatasetSplits};
pub use preprocess::{annotate, filter, preprocess, resample, split};
pub use synth::{gen_data, generate_trajectory, Category, RoadKind, SyntheticCity};
