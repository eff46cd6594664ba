//! Scene sources and the example pipeline that feeds the model.

pub mod cache;
pub mod example;
pub mod scene;
pub mod split;
pub mod synth;

pub use example::{build_example, build_examples, fit_stats, make_batch, Example};
pub use scene::{load_scene, save_scene, Scene, Track};
pub use split::{split_ids, Split, SplitSpec};
pub use synth::{generate_scene, SceneSpec};
