//! Array-agnostic Ambisonics encoding (ASM), shoebox scene simulation and
//! mask-based speech enhancement on Ambisonics signals.
// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod asm;
pub mod container;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod room;
pub mod sh;
pub mod steering;
pub mod stft;
pub mod synth;
pub mod wav;

pub use asm::{asm_apply, asm_design, asm_nmse, AsmDesignParams, AsmFilterBank};
pub use enhance::{
    apply_mask, channel_dropout, ft_jnf_forward, oracle_cirm, toy_calibrate, ComplexMask, DropoutSpec, FtJnfWeights,
    MaskEstimator,
};
pub use error::{Error, Result};
pub use geometry::{
    builtin_array, full_set, horizontal_subset, ArrayGeometry, CartesianPoint, HarmonicIndex, HarmonicSet,
    SphericalDirection,
};
pub use metrics::{si_sdr, EvalReport, EvalRow, SiSdrResult};
pub use pipeline::PipelineConfig;
pub use room::{compute_images, render_ideal_ambisonics, render_mics, RoomSpec, SceneSpec};
pub use sh::{sh_eval, DirectionGrid};
pub use steering::{free_field_steering, FrequencyGrid, SteeringMatrix};
pub use stft::{stft_forward, stft_inverse, StftConfig, TimeFreqTensor};
pub use wav::WavAudio;
