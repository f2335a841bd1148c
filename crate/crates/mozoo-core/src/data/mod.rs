//! Procedural paired-triplet data: scene specs, the 2D rasterizer,
//! cross-species recombination, pixmap IO and the dataset container.

mod dataset;
mod pixmap;
mod scene;
mod triplet;
mod video;

pub use dataset::{
    read_dataset, read_manifest, read_sample, split_dataset, write_dataset, DatasetManifest,
    DatasetSample, LoadedSample, ManifestEntry,
};
pub use pixmap::{read_p5, read_p6, write_p5, write_p6};
pub use scene::{Rgb, SceneSpec, ShapeKind, TextureKind, Trajectory, MESH_GRAY};
pub use triplet::{generate_cross_species, generate_triplet, CrossSpeciesPair, TripletSample};
pub use video::{mask_to_tensor, tensor_to_frames, video_to_tensor, Frame, MaskFrame};
