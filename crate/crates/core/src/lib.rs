pub mod memory;
pub mod mesh;
pub mod sim;
pub mod sync;
pub mod dsp;
pub mod source;
pub mod deploy;
pub mod metrics;
pub mod config;
