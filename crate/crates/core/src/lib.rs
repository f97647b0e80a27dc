pub mod cli;
pub mod correspond;
pub mod filter;
pub mod geometry;
pub mod grasp;
pub mod io;
pub mod lift;
pub mod linalg;
pub mod pipeline;
pub mod register;
pub mod scene;
pub mod synth;
