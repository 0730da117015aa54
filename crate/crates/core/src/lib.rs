//! Simulation and control library for autonomous needle guidance in
//! retinal vein cannulation.

pub mod batch;
pub mod config;
pub mod ddp;
pub mod dynamics;
pub mod frame;
pub mod kinematics;
pub mod perception;
pub mod scene;
pub mod se3;
pub mod servo;
pub mod supervisor;
pub mod trial;
