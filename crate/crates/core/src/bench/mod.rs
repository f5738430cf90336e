pub mod experiment;
pub mod network;
pub mod reactor;
