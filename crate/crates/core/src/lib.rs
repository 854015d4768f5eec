pub mod contrastive;
pub mod datagen;
pub mod diffcore;
pub mod encoder;
pub mod envs;
pub mod iql;
pub mod eval;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
