//! Poses, heatmaps, skeletons and their preprocessing.

mod dataset;
pub mod io;
mod skeleton;
mod types;

pub use dataset::{AmbiguityKind, Dataset, JointAmbiguity, ManifestSample, Sample};
pub use skeleton::Skeleton;
pub use types::{center_pose, standardize_2d, Heatmap, HypothesisSet, Pose2D, Pose3D, Standardizer};
