//! Video-conditioned symbolic piano music generation.
//!
//! The crate covers the whole pipeline: a small tensor library with
//! reverse-mode autodiff ([`tensor`]), Standard MIDI File I/O ([`midi`]), the
//! 310-token performance-event codec ([`codec`]), frame-clip storage and
//! synthetic data ([`frames`]), the neural building blocks ([`nn`]), the GRU
//! baseline and the video-music transformer ([`models`]), training
//! ([`train`]), autoregressive generation ([`infer`]) and piano-roll
//! rendering ([`viz`]).

pub mod codec;
pub mod frames;
pub mod gradcheck;
pub mod infer;
pub mod midi;
pub mod models;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod viz;
