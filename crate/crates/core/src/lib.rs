pub mod audio;
pub mod bench;
pub mod config;
pub mod dsp;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postproc;
pub mod room;
