use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, NormMode, Tape, Tensor, Var};
use crate::data::{SkeletonSequence, Topology};
use crate::error::{Error, Result};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_blocks: usize,
    /// Odd temporal kernel size.
    pub temporal_kernel: usize,
    /// Feature dimension `c_h`.
    pub feature_dim: usize,
    /// Output widths of the three projector layers; the last is `c_z`.
    pub projector_dims: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            hidden_channels: 16,
            num_blocks: 3,
            temporal_kernel: 5,
            feature_dim: 32,
            projector_dims: [128, 128, 128],
        }
    }
}

impl EncoderConfig {
    /// Full-size feature and embedding widths (256 and 6144).
    pub fn paper_scale() -> Self {
        EncoderConfig {
            temporal_kernel: 9,
            feature_dim: 256,
            projector_dims: [6144, 6144, 6144],
            ..Default::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector_dims[2]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.hidden_channels,
            self.num_blocks,
            self.feature_dim,
            self.projector_dims[0],
            self.projector_dims[1],
            self.projector_dims[2],
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitRecord {
    pub scheme: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Trainable parameters of the encoder `f` and projector `g`, plus the
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub init: InitRecord,
    pub params: Vec<NamedTensor>,
    pub running: Vec<RunningStats>,
}

/// Parameter indices of one batch-norm layer: gamma, beta, running slot.
#[derive(Debug, Clone, Copy)]
struct NormSlots {
    gamma: usize,
    beta: usize,
    running: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    gcn_w: usize,
    gcn_b: usize,
    bn1: NormSlots,
    tcn_w: usize,
    tcn_b: usize,
    bn2: NormSlots,
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    params: &'a mut Vec<NamedTensor>,
    running: &'a mut Vec<RunningStats>,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        for x in &mut t.data {
            *x = self.rng.random_range(-bound..bound);
        }
        self.push(name, t)
    }

    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(NamedTensor { name, tensor });
        self.params.len() - 1
    }

    fn norm(&mut self, prefix: String, channels: usize) -> NormSlots {
        let gamma = self.push(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = self.push(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.running.push(RunningStats {
            name: prefix,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        NormSlots {
            gamma,
            beta,
            running: self.running.len() - 1,
        }
    }
}

/// Parameter layout; depends only on the config, so it is recomputed rather
/// than stored.
struct Layout {
    blocks: Vec<BlockSlots>,
    head_w: usize,
    head_b: usize,
    proj_w: [usize; 3],
    proj_b: [usize; 3],
    proj_bn: [NormSlots; 2],
}

fn build(config: &EncoderConfig, seed: u64) -> (Layout, Vec<NamedTensor>, Vec<RunningStats>) {
    let mut params = Vec::new();
    let mut running = Vec::new();
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: &mut params,
        running: &mut running,
    };
    let hidden = config.hidden_channels;
    let k = config.temporal_kernel;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        let cin = if i == 0 { config.in_channels } else { hidden };
        let p = format!("encoder.block{i}");
        let gcn_w = b.uniform(format!("{p}.gcn.weight"), &[hidden, cin, 1], cin);
        let gcn_b = b.push(format!("{p}.gcn.bias"), Tensor::zeros(&[hidden]));
        let bn1 = b.norm(format!("{p}.bn1"), hidden);
        let tcn_w = b.uniform(format!("{p}.tcn.weight"), &[hidden, hidden, k], hidden * k);
        let tcn_b = b.push(format!("{p}.tcn.bias"), Tensor::zeros(&[hidden]));
        let bn2 = b.norm(format!("{p}.bn2"), hidden);
        blocks.push(BlockSlots {
            gcn_w,
            gcn_b,
            bn1,
            tcn_w,
            tcn_b,
            bn2,
        });
    }
    let head_w = b.uniform("encoder.head.weight".into(), &[hidden, config.feature_dim], hidden);
    let head_b = b.push("encoder.head.bias".into(), Tensor::zeros(&[config.feature_dim]));
    let mut widths = vec![config.feature_dim];
    widths.extend(config.projector_dims);
    let mut proj_w = [0; 3];
    let mut proj_b = [0; 3];
    let mut norms = Vec::new();
    for l in 0..3 {
        proj_w[l] = b.uniform(
            format!("projector.layer{l}.weight"),
            &[widths[l], widths[l + 1]],
            widths[l],
        );
        proj_b[l] = b.push(format!("projector.layer{l}.bias"), Tensor::zeros(&[widths[l + 1]]));
        if l < 2 {
            norms.push(b.norm(format!("projector.bn{l}"), widths[l + 1]));
        }
    }
    let layout = Layout {
        blocks,
        head_w,
        head_b,
        proj_w,
        proj_b,
        proj_bn: [norms[0], norms[1]],
    };
    (layout, params, running)
}

/// Whether a forward pass trains (batch statistics) or evaluates (running
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters placed on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Batch statistics gathered by training-mode forward passes, applied to the
/// running estimates afterwards.
#[derive(Debug, Default, Clone)]
pub struct NormUpdates {
    updates: Vec<(usize, BatchStats)>,
}

/// One encoder input: a sequence and the normalized adjacency of its
/// (possibly restricted) joint graph.
#[derive(Debug, Clone)]
pub struct EncoderInput<'a> {
    pub sequence: &'a SkeletonSequence,
    pub adjacency: &'a [f64],
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(topology: &Topology) -> Vec<f64> {
    let v = topology.num_joints();
    let mut a = topology.adjacency();
    for i in 0..v {
        a[i * v + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..v)
        .map(|i| 1.0 / a[i * v..(i + 1) * v].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..v {
        for j in 0..v {
            a[i * v + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

impl EncoderState {
    /// Fan-in scaled uniform weights, zero biases, unit batch-norm scales.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, params, running) = build(config, seed);
        Ok(EncoderState {
            config: config.clone(),
            init: InitRecord {
                scheme: "fan_in_uniform".into(),
                seed,
            },
            params,
            running,
        })
    }

    fn layout(&self) -> Layout {
        build(&self.config, 0).0
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    /// Indices into `params` that belong to the encoder `f` (not the projector).
    pub fn encoder_param_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].name.starts_with("encoder."))
            .collect()
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Binds the given tensors (same order and shapes as `params`) instead of
    /// the stored values.
    pub fn bind_values(&self, tape: &mut Tape, values: &[Var]) -> Result<Bound> {
        if values.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, &v) in self.params.iter().zip(values) {
            if tape.shape(v) != p.tensor.shape.as_slice() {
                return Err(Error::shape("bind_values", &p.tensor.shape, tape.shape(v)));
            }
        }
        Ok(Bound {
            vars: values.to_vec(),
        })
    }

    fn norm(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        slots: NormSlots,
        x: Var,
        mode: Mode,
        updates: &mut NormUpdates,
    ) -> Result<Var> {
        let (gamma, beta) = (bound.vars[slots.gamma], bound.vars[slots.beta]);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, NormMode::Train)?;
                if let Some(stats) = stats {
                    updates.updates.push((slots.running, stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.running[slots.running];
                let (y, _) = tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormMode::Eval {
                        mean: &r.mean,
                        var: &r.var,
                    },
                )?;
                Ok(y)
            }
        }
    }

    /// Features `h = f(x)` for a batch, shape `[B, c_h]`.
    ///
    /// Every input must share `C`, `T` and `V`; each carries its own
    /// adjacency. Each block is a joint mix by the adjacency, a channel
    /// affine, batch norm, ReLU, a temporal convolution, batch norm and ReLU;
    /// a global mean over frames and joints feeds the final affine map.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[EncoderInput<'_>],
        mode: Mode,
        updates: &mut NormUpdates,
    ) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidInput("empty encoder batch".into()))?;
        let [c_n, t_n, v_n] = first.sequence.shape();
        if c_n != self.config.in_channels {
            return Err(Error::InvalidModality {
                expected: self.config.in_channels,
                got: c_n,
            });
        }
        let b_n = inputs.len();
        let mut xs = Vec::with_capacity(b_n * c_n * t_n * v_n);
        let mut adj = Vec::with_capacity(b_n * v_n * v_n);
        for input in inputs {
            if input.sequence.shape() != [c_n, t_n, v_n] {
                return Err(Error::shape(
                    "encode_batch",
                    &[c_n, t_n, v_n],
                    &input.sequence.shape(),
                ));
            }
            if input.adjacency.len() != v_n * v_n {
                return Err(Error::shape(
                    "encode_batch",
                    &[v_n, v_n],
                    &[input.adjacency.len()],
                ));
            }
            xs.extend_from_slice(input.sequence.data());
            adj.extend_from_slice(input.adjacency);
        }
        let layout = self.layout();
        let mut x = tape.constant(Tensor::new(vec![b_n, c_n, t_n, v_n], xs)?)?;
        let a = tape.constant(Tensor::new(vec![b_n, v_n, v_n], adj)?)?;
        let mut channels = c_n;
        for blk in &layout.blocks {
            let flat = tape.reshape(x, &[b_n, channels * t_n, v_n])?;
            let mixed = tape.batched_matmul(flat, a)?;
            let mixed = tape.reshape(mixed, &[b_n, channels, t_n, v_n])?;
            let y = tape.temporal_conv1d(mixed, bound.vars[blk.gcn_w], Some(bound.vars[blk.gcn_b]))?;
            let y = self.norm(tape, bound, blk.bn1, y, mode, updates)?;
            let y = tape.relu(y)?;
            let y = tape.temporal_conv1d(y, bound.vars[blk.tcn_w], Some(bound.vars[blk.tcn_b]))?;
            let y = self.norm(tape, bound, blk.bn2, y, mode, updates)?;
            x = tape.relu(y)?;
            channels = self.config.hidden_channels;
        }
        let pooled = tape.mean_pool(x, &[2, 3])?;
        let h = tape.matmul(pooled, bound.vars[layout.head_w])?;
        tape.bias_add(h, bound.vars[layout.head_b], 1)
    }

    /// Embeddings `z = g(h)`, shape `[B, c_z]`.
    pub fn project(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        mode: Mode,
        updates: &mut NormUpdates,
    ) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(Error::shape("project", &shape, &[self.config.feature_dim]));
        }
        if mode == Mode::Train && shape[0] < 2 {
            return Err(Error::InvalidInput(format!(
                "projector in training mode needs a batch of at least 2, got {}",
                shape[0]
            )));
        }
        let layout = self.layout();
        let mut z = h;
        for l in 0..3 {
            z = tape.matmul(z, bound.vars[layout.proj_w[l]])?;
            z = tape.bias_add(z, bound.vars[layout.proj_b[l]], 1)?;
            if l < 2 {
                z = self.norm(tape, bound, layout.proj_bn[l], z, mode, updates)?;
                z = tape.relu(z)?;
            }
        }
        Ok(z)
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_norm_updates(&mut self, updates: NormUpdates) {
        for (slot, stats) in updates.updates {
            let r = &mut self.running[slot];
            for (m, s) in r.mean.iter_mut().zip(&stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * s;
            }
            for (v, s) in r.var.iter_mut().zip(&stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * s;
            }
        }
    }

    /// Eval-mode features of a single sequence.
    pub fn encode(&self, sequence: &SkeletonSequence, adjacency: &[f64]) -> Result<Vec<f64>> {
        if adjacency.len() != sequence.joints() * sequence.joints() {
            return Err(Error::shape(
                "encode",
                &[sequence.joints(), sequence.joints()],
                &[adjacency.len()],
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let mut updates = NormUpdates::default();
        let h = self.encode_batch(
            &mut tape,
            &bound,
            &[EncoderInput {
                sequence,
                adjacency,
            }],
            Mode::Eval,
            &mut updates,
        )?;
        Ok(tape.data(h).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            hidden_channels: 4,
            num_blocks: 2,
            temporal_kernel: 3,
            feature_dim: 6,
            projector_dims: [8, 8, 5],
            ..Default::default()
        }
    }

    fn random_seq(t: usize, v: usize, seed: u64) -> SkeletonSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SkeletonSequence::from_fn(3, t, v, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn defaults_match_published_widths() {
        assert_eq!(EncoderConfig::default().hidden_channels, 16);
        let p = EncoderConfig::paper_scale();
        assert_eq!(p.feature_dim, 256);
        assert_eq!(p.embedding_dim(), 6144);
    }

    #[test]
    fn adjacency_of_single_joint_and_single_edge() {
        let one = Topology::from_edges(2, vec![(0, 1)]).unwrap();
        let (single, _) = one.restrict(&[1]).unwrap();
        assert_eq!(normalize_adjacency(&single), vec![1.0]);
        for x in normalize_adjacency(&one) {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacency_of_path_matches_hand_computation() {
        // A + I degrees: [2, 3, 3, 2]
        let t = Topology::from_edges(4, vec![(0, 1), (1, 2), (2, 3)]).unwrap();
        let a = normalize_adjacency(&t);
        let s2 = 1.0 / 2.0;
        let s3 = 1.0 / 3.0;
        let s23 = 1.0 / 6f64.sqrt();
        let want = [
            s2, s23, 0.0, 0.0, //
            s23, s3, s3, 0.0, //
            0.0, s3, s3, s23, //
            0.0, 0.0, s23, s2,
        ];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_joint_row_reduces_to_self_loop() {
        let t = Topology::from_edges(3, vec![(0, 1), (1, 2)]).unwrap();
        let (r, _) = t.restrict(&[1]).unwrap();
        assert_eq!(normalize_adjacency(&r), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn feature_width_is_independent_of_frames() {
        let state = EncoderState::init(&small_config(), 0).unwrap();
        let topo = Topology::desk10();
        let adj = normalize_adjacency(&topo);
        for t in [30, 50] {
            let h = state.encode(&random_seq(t, 10, 1), &adj).unwrap();
            assert_eq!(h.len(), 6);
        }
    }

    #[test]
    fn duplicated_batch_matches_single_in_eval_mode() {
        let state = EncoderState::init(&small_config(), 3).unwrap();
        let adj = normalize_adjacency(&Topology::desk10());
        let s = random_seq(12, 10, 2);
        let single = state.encode(&s, &adj).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false).unwrap();
        let input = EncoderInput {
            sequence: &s,
            adjacency: &adj,
        };
        let mut up = NormUpdates::default();
        let h = state
            .encode_batch(&mut tape, &bound, &[input.clone(), input], Mode::Eval, &mut up)
            .unwrap();
        assert_eq!(&tape.data(h)[..6], single.as_slice());
        assert_eq!(&tape.data(h)[6..], single.as_slice());
    }

    #[test]
    fn joint_count_must_match_adjacency() {
        let state = EncoderState::init(&small_config(), 0).unwrap();
        let adj = normalize_adjacency(&Topology::desk10());
        assert!(state.encode(&random_seq(5, 9, 0), &adj).is_err());
    }

    #[test]
    fn zero_projector_gives_zero_embedding() {
        let mut state = EncoderState::init(&small_config(), 0).unwrap();
        for p in &mut state.params {
            if p.name.starts_with("projector.layer") {
                p.tensor.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false).unwrap();
        let h = tape
            .constant(Tensor::new(vec![3, 6], (0..18).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        let mut up = NormUpdates::default();
        let z = state.project(&mut tape, &bound, h, Mode::Train, &mut up).unwrap();
        assert_eq!(tape.shape(z), &[3, 5]);
        assert!(tape.data(z).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projector_needs_two_samples_in_training() {
        let state = EncoderState::init(&small_config(), 0).unwrap();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false).unwrap();
        let h = tape.constant(Tensor::zeros(&[1, 6])).unwrap();
        let mut up = NormUpdates::default();
        assert!(state.project(&mut tape, &bound, h, Mode::Train, &mut up).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut state = EncoderState::init(&small_config(), 0).unwrap();
        let adj = normalize_adjacency(&Topology::desk10());
        let seqs: Vec<_> = (0..3).map(|i| random_seq(8, 10, i)).collect();
        let inputs: Vec<_> = seqs
            .iter()
            .map(|s| EncoderInput {
                sequence: s,
                adjacency: &adj,
            })
            .collect();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, true).unwrap();
        let mut up = NormUpdates::default();
        state
            .encode_batch(&mut tape, &bound, &inputs, Mode::Train, &mut up)
            .unwrap();
        let before = state.running.clone();
        state.apply_norm_updates(up);
        assert_ne!(before, state.running);
    }
}
