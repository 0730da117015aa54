//! Independent oracles shared by the property suites and the acceptance
//! target. Each test binary uses a subset.
#![allow(dead_code, unused_imports)]

pub mod ddp;
pub mod dynamics;
pub mod kin;
pub mod ncc;
pub mod servo;
