//! Command-line front end for `pod-core`: scenario files, telemetry CSV,
//! parameter sweeps and the WebSocket serve mode.

pub mod error;
pub mod protocol;
pub mod run;
pub mod serve;
pub mod sweep;

pub use error::RunnerError;
