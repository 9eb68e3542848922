pub mod detections;
pub mod frames;
pub mod geometry;
pub mod metrics;
pub mod orb;
pub mod pipeline;
pub mod prompt;
pub mod render;
pub mod sampling;
