use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, lr_at, AdamConfig, AdamState};
use crate::augment::{ordinary_augment, AugmentParams};
use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Modality, SkeletonSequence, Split, Topology};
use crate::encoder::{
    normalize_adjacency, Bound, EncoderConfig, EncoderInput, EncoderState, Mode, NormUpdates,
};
use crate::error::{Error, Result};
use crate::loss::{bt_loss_var, cross_correlation_var, pstl_loss_var, LossConfig, LossTriple};
use crate::masking::{
    apply_spatial_mask, apply_temporal_mask, csm_probabilities, restrict_topology,
    sample_spatial_mask, sample_temporal_mask, MaskConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    /// Two augmented views.
    SkeletonBt,
    /// Anchor, spatially masked and temporally masked views.
    Pstl,
}

impl PretrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::SkeletonBt => "skeletonbt",
            PretrainMode::Pstl => "pstl",
        }
    }
}

impl std::str::FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skeletonbt" => Ok(PretrainMode::SkeletonBt),
            "pstl" => Ok(PretrainMode::Pstl),
            other => Err(Error::Config(format!(
                "unknown pretraining mode {other:?} (expected skeletonbt or pstl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub mode: PretrainMode,
    pub modality: Modality,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            warmup_epochs: 10,
            weight_decay: 1e-5,
            base_lr: 1e-3,
            mode: PretrainMode::Pstl,
            modality: Modality::J,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs <= self.warmup_epochs {
            return Err(Error::Config(format!(
                "train.epochs ({}) must exceed train.warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.epochs, self.warmup_epochs, self.base_lr)
    }
}

/// Everything pretraining needs besides the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub augment: AugmentParams,
    pub mask: MaskConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossTriple,
}

/// A pretraining run in progress.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: EncoderState,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub log: Vec<StepLog>,
}

impl TrainRun {
    /// Encoder weights come from stream 0 of the seed, the training RNG from
    /// stream 1.
    pub fn new(config: &PretrainConfig, seed: u64) -> Result<Self> {
        let state = EncoderState::init(&config.encoder, seed)?;
        let adam = AdamState::new(
            config.train.adam.clone(),
            state.params.iter().map(|p| p.tensor.numel()),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(TrainRun {
            state,
            adam,
            rng,
            log: Vec::new(),
        })
    }
}

/// One encoder batch: sequences plus per-sample normalized adjacencies.
#[derive(Debug, Clone, Default)]
pub struct Stream {
    pub sequences: Vec<SkeletonSequence>,
    pub adjacency: Vec<Vec<f64>>,
}

impl Stream {
    fn push(&mut self, seq: SkeletonSequence, adjacency: Vec<f64>) {
        self.sequences.push(seq);
        self.adjacency.push(adjacency);
    }

    fn inputs(&self) -> Vec<EncoderInput<'_>> {
        self.sequences
            .iter()
            .zip(&self.adjacency)
            .map(|(s, a)| EncoderInput {
                sequence: s,
                adjacency: a,
            })
            .collect()
    }
}

/// The augmented (and masked) views of one batch: two streams for
/// SkeletonBT, three (anchor, spatial, temporal) for PSTL.
#[derive(Debug, Clone)]
pub struct Views {
    pub mode: PretrainMode,
    pub streams: Vec<Stream>,
}

/// Topology-derived quantities shared by every step.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub topology: Topology,
    pub adjacency: Vec<f64>,
    pub csm_probabilities: Vec<f64>,
}

impl StepContext {
    pub fn new(topology: &Topology) -> Result<Self> {
        Ok(StepContext {
            topology: topology.clone(),
            adjacency: normalize_adjacency(topology),
            csm_probabilities: csm_probabilities(topology)?,
        })
    }
}

/// Draws the views of one batch. Augmentation acts on joint coordinates; the
/// modality stream is derived afterwards. Motion attention is computed on the
/// augmented coordinates of the temporal view. Masks are drawn per sample.
pub fn sample_views<R: rand::Rng + ?Sized>(
    batch: &[&SkeletonSequence],
    ctx: &StepContext,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Views> {
    let mode = config.train.mode;
    let modality = config.train.modality;
    let n_streams = match mode {
        PretrainMode::SkeletonBt => 2,
        PretrainMode::Pstl => 3,
    };
    let mut streams = vec![Stream::default(); n_streams];
    for &seq in batch {
        let views = (0..n_streams)
            .map(|_| ordinary_augment(seq, &ctx.topology, &config.augment, rng))
            .collect::<Result<Vec<_>>>()?;
        streams[0].push(
            views[0].to_modality(modality, &ctx.topology)?,
            ctx.adjacency.clone(),
        );
        match mode {
            PretrainMode::SkeletonBt => {
                streams[1].push(
                    views[1].to_modality(modality, &ctx.topology)?,
                    ctx.adjacency.clone(),
                );
            }
            PretrainMode::Pstl => {
                let spatial = views[1].to_modality(modality, &ctx.topology)?;
                if config.mask.masked_joints == 0 {
                    streams[1].push(spatial, ctx.adjacency.clone());
                } else {
                    let plan = sample_spatial_mask(
                        &ctx.csm_probabilities,
                        config.mask.masked_joints,
                        rng,
                    )?;
                    let (sub, _) = restrict_topology(&ctx.topology, &plan.masked_joints)?;
                    streams[1].push(
                        apply_spatial_mask(&spatial, &plan.masked_joints)?,
                        normalize_adjacency(&sub),
                    );
                }
                let plan = sample_temporal_mask(&views[2], config.mask.key_frames, rng)?;
                let temporal = views[2].to_modality(modality, &ctx.topology)?;
                streams[2].push(apply_temporal_mask(&temporal, &plan)?, ctx.adjacency.clone());
            }
        }
    }
    Ok(Views { mode, streams })
}

/// Records the pretraining loss of `views` on `tape`. Returns
/// `(L_p, L_1, L_2)`; for SkeletonBT `L_1 = L_p` and `L_2` is a zero
/// constant.
pub fn pretrain_objective(
    tape: &mut Tape,
    state: &EncoderState,
    bound: &Bound,
    views: &Views,
    loss: &LossConfig,
    updates: &mut NormUpdates,
) -> Result<(Var, Var, Var)> {
    let mut z = Vec::with_capacity(views.streams.len());
    for stream in &views.streams {
        let h = state.encode_batch(tape, bound, &stream.inputs(), Mode::Train, updates)?;
        z.push(state.project(tape, bound, h, Mode::Train, updates)?);
    }
    match views.mode {
        PretrainMode::SkeletonBt => {
            let c = cross_correlation_var(tape, z[0], z[1], loss)?;
            let l = bt_loss_var(tape, c, loss.lambda)?;
            let zero = tape.constant(crate::autodiff::Tensor::scalar(0.0))?;
            Ok((l, l, zero))
        }
        PretrainMode::Pstl => pstl_loss_var(tape, z[0], z[1], z[2], loss),
    }
}

/// Forward, backward and one Adam update on `views`.
pub fn pretrain_step(
    run: &mut TrainRun,
    views: &Views,
    config: &PretrainConfig,
    lr: f64,
) -> Result<LossTriple> {
    let mut tape = Tape::new();
    let bound = run.state.bind(&mut tape, true)?;
    let mut updates = NormUpdates::default();
    let (lp, l1, l2) =
        pretrain_objective(&mut tape, &run.state, &bound, views, &config.loss, &mut updates)?;
    let triple = LossTriple {
        total: tape.data(lp)[0],
        spatial: tape.data(l1)[0],
        temporal: tape.data(l2)[0],
    };
    let grads = tape.backward(lp)?;
    let grad_tensors: Vec<_> = bound.vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let grad_slices: Vec<&[f64]> = grad_tensors.iter().map(|g| g.data.as_slice()).collect();
    let mut params: Vec<&mut [f64]> = run
        .state
        .params
        .iter_mut()
        .map(|p| p.tensor.data.as_mut_slice())
        .collect();
    adam_step(&mut run.adam, &mut params, &grad_slices, lr, config.train.weight_decay)?;
    run.state.apply_norm_updates(updates);
    Ok(triple)
}

/// PSTL step: three views per sample, L_p = L_1 + L_2.
pub fn pretrain_step_pstl(
    run: &mut TrainRun,
    batch: &[&SkeletonSequence],
    ctx: &StepContext,
    config: &PretrainConfig,
    lr: f64,
) -> Result<LossTriple> {
    let config = with_mode(config, PretrainMode::Pstl);
    let views = sample_views(batch, ctx, &config, &mut run.rng)?;
    pretrain_step(run, &views, &config, lr)
}

/// SkeletonBT step: two views per sample.
pub fn pretrain_step_skeletonbt(
    run: &mut TrainRun,
    batch: &[&SkeletonSequence],
    ctx: &StepContext,
    config: &PretrainConfig,
    lr: f64,
) -> Result<f64> {
    let config = with_mode(config, PretrainMode::SkeletonBt);
    let views = sample_views(batch, ctx, &config, &mut run.rng)?;
    Ok(pretrain_step(run, &views, &config, lr)?.total)
}

fn with_mode(config: &PretrainConfig, mode: PretrainMode) -> PretrainConfig {
    let mut c = config.clone();
    c.train.mode = mode;
    c
}

/// Checks that the dataset fits the configuration.
pub fn validate_pretrain(dataset: &Dataset, config: &PretrainConfig) -> Result<()> {
    config.train.validate()?;
    config.encoder.validate()?;
    config.loss.validate()?;
    config.augment.validate()?;
    let [c, t, v] = dataset
        .shape()
        .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    if c != config.encoder.in_channels {
        return Err(Error::InvalidModality {
            expected: config.encoder.in_channels,
            got: c,
        });
    }
    if config.train.mode == PretrainMode::Pstl {
        config.mask.validate(v, t)?;
    }
    let n = dataset.indices(Split::Train).len();
    if n < config.train.batch_size {
        return Err(Error::Config(format!(
            "train.batch_size ({}) exceeds the {n} training sequences",
            config.train.batch_size
        )));
    }
    Ok(())
}

/// Full pretraining: shuffled epochs over the training split, incomplete
/// trailing batches dropped, learning rate fixed within an epoch.
pub fn pretrain(
    dataset: &Dataset,
    config: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainRun> {
    validate_pretrain(dataset, config)?;
    let ctx = StepContext::new(&dataset.topology)?;
    let mut run = TrainRun::new(config, seed)?;
    let mut order = dataset.indices(Split::Train);
    let bs = config.train.batch_size;
    for epoch in 0..config.train.epochs {
        let lr = config.train.lr_at(epoch);
        order.shuffle(&mut run.rng);
        for chunk in order.chunks_exact(bs) {
            let batch: Vec<&SkeletonSequence> =
                chunk.iter().map(|&i| &dataset.sequences[i]).collect();
            let views = sample_views(&batch, &ctx, config, &mut run.rng)?;
            let loss = pretrain_step(&mut run, &views, config, lr)?;
            let entry = StepLog {
                step: run.log.len(),
                epoch,
                lr,
                loss,
            };
            on_step(&entry);
            run.log.push(entry);
        }
    }
    Ok(run)
}

/// Writes `step,L_p,L_1,L_2,lr` rows.
pub fn write_telemetry(path: impl AsRef<Path>, log: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Config(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "L_p", "L_1", "L_2", "lr"]).map_err(csv_err)?;
    for s in log {
        w.write_record([
            s.step.to_string(),
            format!("{:e}", s.loss.total),
            format!("{:e}", s.loss.spatial),
            format!("{:e}", s.loss.temporal),
            format!("{:e}", s.lr),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::loss::cross_correlation;

    fn tiny_data() -> Dataset {
        generate_synthetic(
            &SyntheticConfig {
                frames: 12,
                train_per_class: 4,
                test_per_class: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn tiny_config(mode: PretrainMode) -> PretrainConfig {
        let mut c = crate::training::grad_check_config(mode);
        c.train.batch_size = 8;
        c.train.epochs = 3;
        c.train.warmup_epochs = 1;
        c
    }

    fn degenerate(mode: PretrainMode) -> (PretrainConfig, Views, Dataset) {
        let data = tiny_data();
        let mut cfg = tiny_config(mode);
        cfg.augment = AugmentParams::identity();
        cfg.mask = MaskConfig {
            masked_joints: 0,
            key_frames: 0,
        };
        let ctx = StepContext::new(&data.topology).unwrap();
        let batch: Vec<&SkeletonSequence> = data.sequences.iter().take(6).collect();
        let views = sample_views(&batch, &ctx, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (cfg, views, data)
    }

    /// `λ Σ_{i≠j} C_ij²` of the self-correlation of `z`.
    fn off_diagonal_energy(z: &Tensor, cfg: &LossConfig) -> f64 {
        let c = cross_correlation(z, z, cfg).unwrap();
        let d = z.shape[1];
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += c.data[i * d + j].powi(2);
                }
            }
        }
        cfg.lambda * s
    }

    fn anchor_embeddings(state: &EncoderState, views: &Views) -> Tensor {
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false).unwrap();
        let mut up = NormUpdates::default();
        let h = state
            .encode_batch(&mut tape, &bound, &views.streams[0].inputs(), Mode::Train, &mut up)
            .unwrap();
        let z = state.project(&mut tape, &bound, h, Mode::Train, &mut up).unwrap();
        tape.value(z).clone()
    }

    fn objective(state: &EncoderState, views: &Views, cfg: &PretrainConfig) -> LossTriple {
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false).unwrap();
        let mut up = NormUpdates::default();
        let (a, b, c) = pretrain_objective(&mut tape, state, &bound, views, &cfg.loss, &mut up).unwrap();
        LossTriple {
            total: tape.data(a)[0],
            spatial: tape.data(b)[0],
            temporal: tape.data(c)[0],
        }
    }

    #[test]
    fn degenerate_pstl_streams_leave_off_diagonal_energy() {
        let (cfg, views, _) = degenerate(PretrainMode::Pstl);
        assert_eq!(views.streams[0].sequences, views.streams[1].sequences);
        assert_eq!(views.streams[0].sequences, views.streams[2].sequences);
        let state = EncoderState::init(&cfg.encoder, 0).unwrap();
        let l = objective(&state, &views, &cfg);
        let want = off_diagonal_energy(&anchor_embeddings(&state, &views), &cfg.loss);
        assert_eq!(l.spatial, l.temporal);
        assert_eq!(l.total, 2.0 * l.spatial);
        assert!((l.spatial - want).abs() <= 1e-9 * want.max(1.0));
    }

    #[test]
    fn degenerate_skeletonbt_views_leave_off_diagonal_energy() {
        let (cfg, views, _) = degenerate(PretrainMode::SkeletonBt);
        let state = EncoderState::init(&cfg.encoder, 0).unwrap();
        let l = objective(&state, &views, &cfg);
        let want = off_diagonal_energy(&anchor_embeddings(&state, &views), &cfg.loss);
        assert!((l.total - want).abs() <= 1e-9 * want.max(1.0));
        assert_eq!(l.temporal, 0.0);
    }

    #[test]
    fn pstl_views_have_masked_shapes() {
        let data = tiny_data();
        let cfg = tiny_config(PretrainMode::Pstl);
        let ctx = StepContext::new(&data.topology).unwrap();
        let batch: Vec<&SkeletonSequence> = data.sequences.iter().take(3).collect();
        let views = sample_views(&batch, &ctx, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(views.streams[0].sequences[0].shape(), [3, 12, 10]);
        assert_eq!(views.streams[1].sequences[0].shape(), [3, 12, 8]);
        assert_eq!(views.streams[1].adjacency[0].len(), 64);
        assert_eq!(views.streams[2].sequences[0].shape(), [3, 8, 10]);
    }

    #[test]
    fn losses_stay_finite_and_runs_repeat_bitwise() {
        let data = tiny_data();
        let mut cfg = tiny_config(PretrainMode::Pstl);
        cfg.train.batch_size = 2;
        cfg.train.epochs = 7;
        let a = pretrain(&data, &cfg, 7, |_| {}).unwrap();
        assert!(a.log.len() >= 50);
        assert!(a.log.iter().all(|s| s.loss.total.is_finite()));
        let b = pretrain(&data, &cfg, 7, |_| {}).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.adam, b.adam);
        let c = pretrain(&data, &cfg, 8, |_| {}).unwrap();
        assert_ne!(a.state, c.state);
    }

    #[test]
    fn skeletonbt_step_updates_parameters() {
        let data = tiny_data();
        let cfg = tiny_config(PretrainMode::SkeletonBt);
        let ctx = StepContext::new(&data.topology).unwrap();
        let mut run = TrainRun::new(&cfg, 0).unwrap();
        let before = run.state.clone();
        let batch: Vec<&SkeletonSequence> = data.sequences.iter().take(4).collect();
        let l = pretrain_step_skeletonbt(&mut run, &batch, &ctx, &cfg, 1e-3).unwrap();
        assert!(l.is_finite());
        assert_ne!(run.state.params, before.params);
        assert_ne!(run.state.running, before.running);
        assert_eq!(run.adam.step, 1);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let data = tiny_data();
        let mut cfg = tiny_config(PretrainMode::Pstl);
        cfg.train.batch_size = 64;
        assert!(pretrain(&data, &cfg, 0, |_| {}).is_err());
    }

    #[test]
    fn telemetry_has_one_row_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let log = vec![
            StepLog {
                step: 0,
                epoch: 0,
                lr: 0.0,
                loss: LossTriple {
                    total: 3.0,
                    spatial: 1.0,
                    temporal: 2.0,
                },
            };
            3
        ];
        write_telemetry(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,L_p,L_1,L_2,lr");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,3e0,1e0,2e0,0e0");
    }
}
