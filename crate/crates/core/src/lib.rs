pub mod encoders;
pub mod evaluate;
pub mod layout;
pub mod meldsp;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod tensorfile;
pub mod timesync;
pub mod tokenizers;
pub mod train;
