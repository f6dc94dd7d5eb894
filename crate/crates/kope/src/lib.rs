pub mod blob;
pub mod config;
pub mod experiments;
pub mod log;
pub mod optim;
