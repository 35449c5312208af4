//! Procedural multi-camera driving scenes with ground-truth controls.

pub mod camera;
pub mod controls;
pub mod dataset;
pub mod render;
pub mod world;

pub use camera::{ego_matrix, project_point, Camera, CameraRig, Projected};
pub use controls::{canvas_view, canvases, controls_at, Bev, Box3, ControlState, CANVAS_CHANNELS};
pub use dataset::{
    generate_scene, generate_scenes, read_dataset, read_manifest, read_scene, read_scene_file,
    write_dataset, write_manifest, write_scene_file, CodecInfo, Dataset, Manifest, SceneRecord,
};
pub use render::{project_layout, render_controls, render_view, Palette, AGENT_COLORS, ROAD_COLOR};
pub use world::{gen_world, Agent, Pose2, Road, SceneConfig, ToyWorld};
