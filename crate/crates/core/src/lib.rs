pub mod baseline;
pub mod cnn;
pub mod deploy;
pub mod encoder;
pub mod harness;
pub mod trace;
