pub mod adversary;
pub mod autograd;
pub mod body;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod heads;
pub mod model;
pub mod motion_encoder;
pub mod nn;
pub mod params;
pub mod report;
pub mod rotation;
pub mod sca;
pub mod scene_encoder;
pub mod synthworld;
pub mod tia;
pub mod training;
pub mod types;
