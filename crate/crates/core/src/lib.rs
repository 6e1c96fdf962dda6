//! HALP: host-assisted layer-wise parallel CNN inference across one host and
//! two secondary devices.

pub mod cli;
pub mod config;
pub mod planner;
pub mod runtime;
pub mod selector;
pub mod sim;
pub mod tensor;
pub mod zoo;
