pub mod align;
pub mod clustering;
pub mod dataset;
pub mod eval;
pub mod facade;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod synth;
pub mod ortho;
pub mod pipeline;
