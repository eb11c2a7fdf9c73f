pub mod colmap;
pub mod eval;
pub mod geometry;
pub mod mesh;
pub mod mv_depth;
pub mod partition;
pub mod pipeline;
pub mod pfm;
pub mod synth;
pub mod tsdf;
pub mod view_select;
