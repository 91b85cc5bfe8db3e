//! The generative core: encoders producing token priors, monotonic alignment,
//! durations, flow-matching losses and ODE decoding.

mod flow;
mod mas;
mod networks;

pub use flow::{
    cfm_loss, cfm_loss_graph, cfm_target, decode_ode, path_mean, prior_loss, prior_loss_graph, sample_xt,
    sample_xt_with_noise, standard_normal, ConstantField, VectorField, DEFAULT_SIGMA_MIN,
};
pub use mas::{
    alignment_log_likelihood, brute_force_best_score, durations_from_alignment, enumerate_alignments, log_likelihoods,
    mas_align, mas_align_scored, Alignment,
};
pub use networks::{
    duration_loss, duration_loss_graph, inference_durations, BoundDecoder, Decoder, DurationPredictor, FusionEncoder,
    FusionOutput, SpeakerEncoder, SpeakerInput, TextEncoder,
};
