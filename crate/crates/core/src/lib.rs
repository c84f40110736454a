pub mod arap;
pub mod cli;
pub mod error;
pub mod guidance;
pub mod mesh;
pub mod operators;
pub mod optimizer;
pub mod render;
