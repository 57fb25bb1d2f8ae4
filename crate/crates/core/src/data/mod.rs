//! Skeleton sequences, graph topology, modality streams and dataset I/O.

mod dataset;
mod skeleton;
mod synthetic;
mod topology;

pub use dataset::{load_dataset, save_dataset, Dataset, Split, DATASET_FORMAT, DATASET_VERSION};
pub use skeleton::{Modality, SkeletonSequence};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use topology::{BodyPart, Topology, TopologyKind};
