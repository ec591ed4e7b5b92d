pub mod distmath;
pub mod nn;
pub mod worldmodel;
pub mod agent;
pub mod planner;
pub mod metaplanner;
pub mod envs;
pub mod harness;
