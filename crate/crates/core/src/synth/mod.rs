//! Procedural video corpus with exact ground truth and the editing-task builders.

pub mod corpus;
pub mod pose;
pub mod scene;
pub mod tasks;

pub use corpus::{
    generate_split, load_sample, manifest_hash, overfit_set, read_manifest, task_counts, write_samples, CorpusConfig, ManifestRecord,
};
pub use pose::{pose_distractors, render_pose, JointDecoder, Joints};
pub use scene::{gen_clip, GroundTruth, SceneSpec, Shape, ShapeKind, Trajectory};
pub use tasks::{TaskKind, TaskSample};
