pub mod corpus;
pub mod encoder;
pub mod features;
pub mod harness;
pub mod kv;
pub mod model;
pub mod neuralcore;
