//! Synthetic driving scenes: geometry, generation and rendering.

pub mod geometry;
mod render;
mod scene;

pub use render::{
    bev_semantics, detection_targets, render_views, semantic_at, BevGrid, CameraRig, SemClass, NUM_CLASSES,
};
pub use scene::{
    generate_dataset, generate_scene, offset_polyline, read_scenes, write_scenes, Agent, AgentClass, Light,
    LightState, Scene, SceneKind, DT, EGO_LENGTH, EGO_WIDTH, HORIZON, LANE_WIDTH,
};
