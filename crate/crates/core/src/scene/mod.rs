//! Synthetic voxel worlds standing in for camera-derived voxel features.

mod generate;
mod grid;
mod io;
mod visibility;

pub use generate::{class_prototypes, generate_labels, generate_scene, observe_features, Scene, SceneSpec};
pub use grid::{class_name, Dims, SemanticLabelGrid, VisibilityMask, VoxelFeatureGrid, FREE, ROAD};
pub use io::{decode_scene, encode_scene, load_scene, save_scene, SCENE_MAGIC, SCENE_VERSION};
pub use visibility::{raycast_visibility, segment_voxels};

#[cfg(test)]
pub(crate) use grid::linear;
