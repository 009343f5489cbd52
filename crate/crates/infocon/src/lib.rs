pub mod autodiff;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evallab;
pub mod heads;
pub mod model;
pub mod nn;
pub mod optim;
pub mod segments;
pub mod synthdata;
pub mod training;
