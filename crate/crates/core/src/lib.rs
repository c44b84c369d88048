pub mod geometry;
pub mod vision;
pub mod behavior;
pub mod control;
pub mod stabilizer;
pub mod anc;
pub mod api;
pub mod scenario;
pub mod world;
pub mod service;
