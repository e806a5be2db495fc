pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod sentiment;
pub mod transform;
