use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pretrain::{pretrain_objective, sample_views, PretrainConfig, PretrainMode, StepContext};
use crate::autodiff::{grad_check, GradCheckReport};
use crate::data::{generate_synthetic, SkeletonSequence, SyntheticConfig};
use crate::encoder::{EncoderConfig, EncoderState, NormUpdates};
use crate::error::Result;
use crate::masking::MaskConfig;

pub const GRAD_CHECK_EPSILON: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// A two-block encoder small enough to finite-difference every parameter.
pub fn grad_check_config(mode: PretrainMode) -> PretrainConfig {
    let mut c = PretrainConfig {
        encoder: EncoderConfig {
            hidden_channels: 4,
            num_blocks: 2,
            temporal_kernel: 3,
            feature_dim: 6,
            projector_dims: [8, 8, 8],
            ..Default::default()
        },
        mask: MaskConfig {
            masked_joints: 2,
            key_frames: 2,
        },
        ..Default::default()
    };
    c.train.mode = mode;
    c
}

/// Finite-difference check of the pretraining loss with respect to every
/// encoder and projector parameter, on a fixed draw of views for four
/// synthetic sequences of 12 frames.
pub fn pretrain_grad_check(mode: PretrainMode, seed: u64) -> Result<GradCheckReport> {
    pretrain_grad_check_with(mode, seed, GRAD_CHECK_EPSILON)
}

pub fn pretrain_grad_check_with(mode: PretrainMode, seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    let data = generate_synthetic(
        &SyntheticConfig {
            frames: 12,
            train_per_class: 1,
            test_per_class: 1,
            ..Default::default()
        },
        seed,
    )?;
    let config = grad_check_config(mode);
    let ctx = StepContext::new(&data.topology)?;
    let batch: Vec<&SkeletonSequence> = data.sequences.iter().step_by(2).take(4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = sample_views(&batch, &ctx, &config, &mut rng)?;
    let state = EncoderState::init(&config.encoder, seed)?;
    let inputs: Vec<(String, _)> = state
        .params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect();
    grad_check(
        |tape, vars| {
            let bound = state.bind_values(tape, vars)?;
            let mut updates = NormUpdates::default();
            let (lp, _, _) =
                pretrain_objective(tape, &state, &bound, &views, &config.loss, &mut updates)?;
            Ok(lp)
        },
        &inputs,
        epsilon,
        GRAD_CHECK_TOLERANCE,
    )
}
