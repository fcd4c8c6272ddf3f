pub mod evaluate;
pub mod extract;
pub mod segment;
pub mod synth;
pub mod train;
pub mod vad;
