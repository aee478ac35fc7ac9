//! Procedural scenes, ray-cast ground truth, clip segmentation and augmentation.

mod augment;
mod clips;
mod depth;
mod io;
mod render;
mod scene;
mod types;

pub use augment::{
    augment, augment_with_record, hflip, resize_normals_region,
    resize_rgb_region, resize_short_edge, AugmentRecord, AugmentationConfig,
};
pub use clips::{segment_clips, ClipEntry, DatasetManifest};
pub use depth::depth_to_normal;
pub use io::{
    dataset_hash, generate_corpus, list_clip_dirs, normal_to_rgb8, read_clip_dir, read_corpus, read_normals, read_rgb,
    save_normal_png, save_rgb_png, write_clip_dir, write_mask, write_normals, write_rgb, ClipData, ClipMeta,
    SynthSpec,
};
pub use render::{intersect, render_clip};
pub use scene::{CameraTrajectory, Intrinsics, Pose, Primitive, Scene, SceneObject, Vec3};
pub use types::{DepthSequence, Dims, NormalSequence, VideoClip};
