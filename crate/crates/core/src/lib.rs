pub mod tensor;
pub mod nn;
pub mod graph;
pub mod vocab;
pub mod lexicon;
pub mod text;
pub mod augment;
pub mod frames;
pub mod synth;
pub mod loss;
pub mod model;
pub mod lm;
pub mod decoding;
pub mod manifest;
pub mod metrics;
pub mod optim;
pub mod config;
pub mod checkpoint;
pub mod train;
