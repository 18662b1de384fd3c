//! Video generation on grid images.
//!
//! A clip is represented as a sequence of square frames, but the models never
//! see single frames: four frames at a time are packed into a 2x2 *grid
//! image* (chronological, row-major) and a text-conditioned diffusion model
//! operates on whole grids. Generation proceeds in three stages per 28-frame
//! segment: a key grid fixes frames 0/9/18/27, a first interpolation pass
//! fills the stride-3 frames between them, and a second pass fills every
//! remaining frame. Interpolation is masked denoising — the two middle cells
//! of a grid are zeroed and the model restores them — conditioned on the
//! previously produced grid so motion stays coherent across steps.
//!
//! The [`pipeline`] module assembles segments into arbitrarily long videos
//! while holding a bounded number of frames resident; completed frames leave
//! through a [`pipeline::FrameSink`] as soon as the schedule allows. The
//! remaining modules supply everything needed to exercise the system end to
//! end: a synthetic moving-shape corpus with exactly renderable ground truth
//! ([`corpus`]), frame/latent codecs ([`grid`], [`latent`]), the denoising
//! core with a hand-rolled trainable network ([`diffusion`], [`models`]),
//! deterministic evaluation metrics ([`metrics`]) and the on-disk formats
//! ([`io`]).

pub mod corpus;
pub mod diffusion;
pub mod grid;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod schedule;
