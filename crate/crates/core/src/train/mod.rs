pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod loss;
pub mod sampler;
