//! Downstream protocols: linear probe, partial-body robustness, finetuning,
//! semi-supervised finetuning and multi-stream score fusion.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{BodyPart, Dataset, Modality, SkeletonSequence, Split};
use crate::encoder::{normalize_adjacency, EncoderInput, EncoderState, Mode, NormUpdates};
use crate::error::{Error, Result};
use crate::masking::{apply_spatial_mask, restrict_topology, sample_part_joints, sample_uniform_joints};
use crate::training::{adam_step, lr_at, AdamConfig, AdamState};

/// Sequences encoded together in eval mode; rows are independent, so this
/// only affects speed.
const FEATURE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub linear_lr: f64,
    pub linear_epochs: usize,
    pub linear_batch_size: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub weight_decay: f64,
    /// Standardize frozen features with training-split statistics before the
    /// linear probe.
    pub standardize_features: bool,
    pub adam: AdamConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            linear_lr: 0.01,
            linear_epochs: 50,
            linear_batch_size: 32,
            finetune_lr: 0.005,
            finetune_epochs: 20,
            finetune_batch_size: 32,
            weight_decay: 0.0,
            standardize_features: true,
            adam: AdamConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.linear_batch_size == 0 || self.finetune_batch_size < 2 {
            return Err(Error::Config(
                "eval.linear_batch_size must be positive and eval.finetune_batch_size at least 2"
                    .into(),
            ));
        }
        if !(self.linear_lr >= 0.0 && self.finetune_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("evaluation rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Test-time occlusion for partial-body evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "count")]
pub enum Occlusion {
    /// `n` joints drawn uniformly.
    Joints(usize),
    /// All joints of `n` body parts drawn uniformly.
    Parts(usize),
}

impl Occlusion {
    pub fn kind(&self) -> &'static str {
        match self {
            Occlusion::Joints(_) => "joints",
            Occlusion::Parts(_) => "parts",
        }
    }

    pub fn count(&self) -> usize {
        match *self {
            Occlusion::Joints(n) | Occlusion::Parts(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub modality: String,
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub num_test: usize,
    pub occlusion: Option<Occlusion>,
    /// Labelled training sequences used.
    pub num_labeled: usize,
    pub seed: u64,
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 8] = [
        "protocol",
        "modality",
        "occlusion",
        "count",
        "num_labeled",
        "num_test",
        "seed",
        "top1",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.protocol.clone(),
            self.modality.clone(),
            self.occlusion.map(|o| o.kind()).unwrap_or("none").to_string(),
            self.occlusion.map(|o| o.count()).unwrap_or(0).to_string(),
            self.num_labeled.to_string(),
            self.num_test.to_string(),
            self.seed.to_string(),
            format!("{:.6}", self.top1),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "protocol = {}", self.protocol)?;
        writeln!(f, "modality = {}", self.modality)?;
        writeln!(f, "seed = {}", self.seed)?;
        if let Some(o) = self.occlusion {
            writeln!(f, "occlusion = {}", o.kind())?;
            writeln!(f, "occlusion_count = {}", o.count())?;
        }
        writeln!(f, "num_labeled = {}", self.num_labeled)?;
        writeln!(f, "num_test = {}", self.num_test)?;
        writeln!(f, "top1 = {:.6}", self.top1)?;
        for (c, (acc, n)) in self.per_class.iter().zip(&self.class_counts).enumerate() {
            writeln!(f, "class{c}.accuracy = {acc:.6}")?;
            writeln!(f, "class{c}.count = {n}")?;
        }
        for (k, v) in &self.config {
            writeln!(f, "config.{k} = {v}")?;
        }
        Ok(())
    }
}

/// A report together with the raw test logits, for stream fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// `[N_test, num_classes]`.
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

fn modality_name(m: Modality) -> String {
    format!("{m:?}")
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Builds a report from predictions. Classes absent from the test set get
/// per-class accuracy 0 and count 0.
pub fn score(
    protocol: &str,
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape("score", &[labels.len()], &[predictions.len()]));
    }
    let mut correct = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::OutOfRange(format!("label {y} outside 0..{num_classes}")));
        }
        counts[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let total: usize = correct.iter().sum();
    Ok(EvalReport {
        protocol: protocol.to_string(),
        modality: String::new(),
        top1: total as f64 / labels.len() as f64,
        per_class: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        class_counts: counts,
        num_test: labels.len(),
        occlusion: None,
        num_labeled: 0,
        seed: 0,
        config: Vec::new(),
    })
}

fn check_encoder(state: &EncoderState, dataset: &Dataset) -> Result<()> {
    let [c, _, _] = dataset
        .shape()
        .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
    if c != state.config.in_channels {
        return Err(Error::CheckpointMismatch(format!(
            "encoder expects {} input channels, dataset has {c}",
            state.config.in_channels
        )));
    }
    if dataset.indices(Split::Train).is_empty() || dataset.indices(Split::Test).is_empty() {
        return Err(Error::InvalidInput(
            "evaluation needs both train and test sequences".into(),
        ));
    }
    Ok(())
}

/// A prepared encoder input: the modality stream and its adjacency.
struct Prepared {
    sequence: SkeletonSequence,
    adjacency: Vec<f64>,
}

fn prepare(
    dataset: &Dataset,
    indices: &[usize],
    modality: Modality,
    occlusion: Option<Occlusion>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Prepared>> {
    let topo = &dataset.topology;
    let full = normalize_adjacency(topo);
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let seq = dataset.sequences[i].to_modality(modality, topo)?;
        let masked = match occlusion {
            None | Some(Occlusion::Joints(0)) | Some(Occlusion::Parts(0)) => None,
            Some(Occlusion::Joints(n)) => Some(sample_uniform_joints(topo.num_joints(), n, rng)?),
            Some(Occlusion::Parts(n)) => Some(sample_part_joints(topo, n, rng)?.1),
        };
        out.push(match masked {
            None => Prepared {
                sequence: seq,
                adjacency: full.clone(),
            },
            Some(joints) => {
                let (sub, _) = restrict_topology(topo, &joints)?;
                Prepared {
                    sequence: apply_spatial_mask(&seq, &joints)?,
                    adjacency: normalize_adjacency(&sub),
                }
            }
        });
    }
    Ok(out)
}

/// Eval-mode features, one row per input; consecutive inputs with equal
/// joint counts are encoded together.
fn features(state: &EncoderState, inputs: &[Prepared]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut start = 0;
    while start < inputs.len() {
        let v = inputs[start].sequence.joints();
        let mut end = start + 1;
        while end < inputs.len() && end - start < FEATURE_CHUNK && inputs[end].sequence.joints() == v
        {
            end += 1;
        }
        let batch: Vec<EncoderInput<'_>> = inputs[start..end]
            .iter()
            .map(|p| EncoderInput {
                sequence: &p.sequence,
                adjacency: &p.adjacency,
            })
            .collect();
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false)?;
        let h = state.encode_batch(&mut tape, &bound, &batch, Mode::Eval, &mut NormUpdates::default())?;
        out.extend(tape.data(h).chunks(state.config.feature_dim).map(<[f64]>::to_vec));
        start = end;
    }
    Ok(out)
}

/// Per-dimension affine normalization `(h − mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation; dimensions constant up to
    /// rounding keep scale 1.
    pub fn fit(features: &[Vec<f64>]) -> Self {
        let dim = features.first().map_or(0, Vec::len);
        let n = features.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for h in features {
            for (m, x) in mean.iter_mut().zip(h) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for h in features {
            for ((v, x), m) in var.iter_mut().zip(h).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(&v, &m)| {
                let s = v.sqrt();
                if s > 0.0 && s > 1e-12 * m.abs() { s } else { 1.0 }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Affine classifier `logits = standardize(h)·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub standardizer: Standardizer,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        LinearClassifier {
            standardizer: Standardizer::identity(dim),
            weight: Tensor::zeros(&[dim, num_classes]),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn logits(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let (d, k) = (self.weight.shape[0], self.weight.shape[1]);
        let mut out = Tensor::zeros(&[features.len(), k]);
        for (r, h) in features.iter().enumerate() {
            if h.len() != d {
                return Err(Error::shape("LinearClassifier::logits", &[d], &[h.len()]));
            }
            let h = self.standardizer.apply(h);
            let row = &mut out.data[r * k..(r + 1) * k];
            row.copy_from_slice(&self.bias.data);
            for (i, &x) in h.iter().enumerate() {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += x * self.weight.data[i * k + j];
                }
            }
        }
        Ok(out)
    }
}

/// Trains a zero-initialized linear classifier with Adam under a cosine
/// schedule (no warmup) on fixed features.
pub fn train_linear_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    config: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LinearClassifier> {
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidInput("no training features".into()))?;
    let mut clf = LinearClassifier::zeros(dim, num_classes);
    if config.standardize_features {
        clf.standardizer = Standardizer::fit(features);
    }
    let features: Vec<Vec<f64>> = features.iter().map(|h| clf.standardizer.apply(h)).collect();
    let mut adam = AdamState::new(config.adam.clone(), [dim * num_classes, num_classes]);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..config.linear_epochs {
        let lr = lr_at(epoch, config.linear_epochs, 0, config.linear_lr);
        order.shuffle(rng);
        for chunk in order.chunks(config.linear_batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                x.extend_from_slice(&features[i]);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![chunk.len(), dim], x)?)?;
            let w = tape.param(&clf.weight)?;
            let b = tape.param(&clf.bias)?;
            let z = tape.matmul(xv, w)?;
            let z = tape.bias_add(z, b, 1)?;
            let loss = tape.softmax_cross_entropy(z, &y)?;
            let grads = tape.backward(loss)?;
            let (gw, gb) = (grads.wrt(&tape, w), grads.wrt(&tape, b));
            adam_step(
                &mut adam,
                &mut [&mut clf.weight.data, &mut clf.bias.data],
                &[&gw.data, &gb.data],
                lr,
                config.weight_decay,
            )?;
        }
    }
    Ok(clf)
}

fn finish(
    mut report: EvalReport,
    protocol: &str,
    modality: Modality,
    seed: u64,
    num_labeled: usize,
    config: &EvalConfig,
) -> EvalReport {
    report.protocol = protocol.to_string();
    report.modality = modality_name(modality);
    report.seed = seed;
    report.num_labeled = num_labeled;
    let mut echo = vec![
        ("linear_lr".to_string(), config.linear_lr.to_string()),
        ("linear_epochs".to_string(), config.linear_epochs.to_string()),
        ("linear_batch_size".to_string(), config.linear_batch_size.to_string()),
    ];
    if protocol == "finetune" || protocol == "semi" {
        echo = vec![
            ("finetune_lr".to_string(), config.finetune_lr.to_string()),
            ("finetune_epochs".to_string(), config.finetune_epochs.to_string()),
            ("finetune_batch_size".to_string(), config.finetune_batch_size.to_string()),
        ];
    }
    echo.push(("weight_decay".to_string(), config.weight_decay.to_string()));
    report.config = echo;
    report
}

fn outcome_from_logits(
    logits: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    protocol: &str,
) -> Result<EvalOutcome> {
    let predictions: Vec<usize> = logits.data.chunks(num_classes).map(argmax).collect();
    let report = score(protocol, &predictions, &labels, num_classes)?;
    Ok(EvalOutcome {
        report,
        logits,
        labels,
    })
}

/// Linear probe on frozen eval-mode features, optionally with test-time
/// occlusion. The classifier RNG and the occlusion RNG are separate streams
/// of `seed`, so occluding zero joints reproduces the plain probe exactly.
fn probe(
    state: &EncoderState,
    modality: Modality,
    dataset: &Dataset,
    config: &EvalConfig,
    occlusion: Option<Occlusion>,
    seed: u64,
) -> Result<EvalOutcome> {
    config.validate()?;
    check_encoder(state, dataset)?;
    let mut clf_rng = rng_stream(seed, 2);
    let mut mask_rng = rng_stream(seed, 3);
    let train = dataset.indices(Split::Train);
    let test = dataset.indices(Split::Test);
    let train_in = prepare(dataset, &train, modality, None, &mut mask_rng)?;
    let train_h = features(state, &train_in)?;
    let clf = train_linear_classifier(
        &train_h,
        &dataset.labels(&train),
        dataset.num_classes,
        config,
        &mut clf_rng,
    )?;
    let test_in = prepare(dataset, &test, modality, occlusion, &mut mask_rng)?;
    let logits = clf.logits(&features(state, &test_in)?)?;
    let protocol = if occlusion.is_some() { "partial" } else { "linear" };
    let mut out = outcome_from_logits(logits, dataset.labels(&test), dataset.num_classes, protocol)?;
    out.report = finish(out.report, protocol, modality, seed, train.len(), config);
    out.report.occlusion = occlusion;
    Ok(out)
}

pub fn linear_eval(
    state: &EncoderState,
    modality: Modality,
    dataset: &Dataset,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    probe(state, modality, dataset, config, None, seed)
}

/// Linear probe trained on unoccluded features; every test sequence has its
/// own occlusion drawn and removed before encoding.
pub fn partial_body_eval(
    state: &EncoderState,
    modality: Modality,
    dataset: &Dataset,
    config: &EvalConfig,
    occlusion: Occlusion,
    seed: u64,
) -> Result<EvalOutcome> {
    let v = dataset.topology.num_joints();
    match occlusion {
        Occlusion::Joints(n) if n > 0 && n + 2 > v => {
            return Err(Error::OutOfRange(format!(
                "cannot occlude {n} of {v} joints; at most {}",
                v.saturating_sub(2)
            )))
        }
        Occlusion::Parts(n) if n >= BodyPart::ALL.len() => {
            return Err(Error::OutOfRange(format!(
                "cannot occlude {n} body parts; at most {}",
                BodyPart::ALL.len() - 1
            )))
        }
        _ => {}
    }
    probe(state, modality, dataset, config, Some(occlusion), seed)
}

/// Stratified subset of the training split: `round(fraction · N)` labels,
/// allotted to classes by largest remainder with at least one per class, then
/// drawn uniformly within each class. Returned sorted.
pub fn stratified_subset(
    dataset: &Dataset,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::OutOfRange(format!("fraction {fraction} outside (0, 1]")));
    }
    let train = dataset.indices(Split::Train);
    let k = dataset.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in &train {
        by_class[dataset.sequences[i].label].push(i);
    }
    let present = by_class.iter().filter(|c| !c.is_empty()).count();
    let total = (fraction * train.len() as f64).round() as usize;
    if total < present {
        return Err(Error::OutOfRange(format!(
            "fraction {fraction} of {} training sequences gives {total} labels for {present} classes",
            train.len()
        )));
    }
    let quotas: Vec<f64> = by_class
        .iter()
        .map(|c| fraction * c.len() as f64)
        .collect();
    let mut alloc: Vec<usize> = by_class
        .iter()
        .zip(&quotas)
        .map(|(c, q)| if c.is_empty() { 0 } else { (q.floor() as usize).max(1) })
        .collect();
    let mut assigned: usize = alloc.iter().sum();
    // Remainders, largest first, ties to the lower class.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(k * 2) {
        if assigned >= total {
            break;
        }
        if alloc[c] < by_class[c].len() {
            alloc[c] += 1;
            assigned += 1;
        }
    }
    // The at-least-one floor can overshoot; trim from the largest classes.
    while assigned > total {
        let c = (0..k)
            .filter(|&c| alloc[c] > 1)
            .max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(b.cmp(&a)))
            .ok_or_else(|| Error::OutOfRange("cannot satisfy one label per class".into()))?;
        alloc[c] -= 1;
        assigned -= 1;
    }
    let mut subset = Vec::with_capacity(total);
    for (c, members) in by_class.iter().enumerate() {
        subset.extend(rand::seq::index::sample(rng, members.len(), alloc[c]).into_iter().map(|i| members[i]));
    }
    subset.sort_unstable();
    Ok(subset)
}

/// Trains encoder and classifier jointly on `labeled` training indices with
/// training-mode batch norm, then scores the test split in eval mode.
fn finetune_on(
    state: &EncoderState,
    modality: Modality,
    dataset: &Dataset,
    config: &EvalConfig,
    labeled: &[usize],
    seed: u64,
) -> Result<(EvalOutcome, EncoderState)> {
    config.validate()?;
    check_encoder(state, dataset)?;
    let mut state = state.clone();
    let mut rng = rng_stream(seed, 2);
    let k = dataset.num_classes;
    let dim = state.config.feature_dim;
    let mut clf = LinearClassifier::zeros(dim, k);
    let sizes: Vec<usize> = state
        .params
        .iter()
        .map(|p| p.tensor.numel())
        .chain([dim * k, k])
        .collect();
    let mut adam = AdamState::new(config.adam.clone(), sizes);
    let mut unused = rng_stream(seed, 3);
    let inputs = prepare(dataset, labeled, modality, None, &mut unused)?;
    let labels: Vec<usize> = labeled.iter().map(|&i| dataset.sequences[i].label).collect();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 0..config.finetune_epochs {
        let lr = lr_at(epoch, config.finetune_epochs, 0, config.finetune_lr);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.finetune_batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<EncoderInput<'_>> = chunk
                .iter()
                .map(|&i| EncoderInput {
                    sequence: &inputs[i].sequence,
                    adjacency: &inputs[i].adjacency,
                })
                .collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = state.bind(&mut tape, true)?;
            let w = tape.param(&clf.weight)?;
            let b = tape.param(&clf.bias)?;
            let mut updates = NormUpdates::default();
            let h = state.encode_batch(&mut tape, &bound, &batch, Mode::Train, &mut updates)?;
            let z = tape.matmul(h, w)?;
            let z = tape.bias_add(z, b, 1)?;
            let loss = tape.softmax_cross_entropy(z, &y)?;
            let grads = tape.backward(loss)?;
            let mut gs: Vec<Tensor> = bound.vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
            gs.push(grads.wrt(&tape, w));
            gs.push(grads.wrt(&tape, b));
            let g_slices: Vec<&[f64]> = gs.iter().map(|g| g.data.as_slice()).collect();
            let mut p_slices: Vec<&mut [f64]> = state
                .params
                .iter_mut()
                .map(|p| p.tensor.data.as_mut_slice())
                .collect();
            p_slices.push(&mut clf.weight.data);
            p_slices.push(&mut clf.bias.data);
            adam_step(&mut adam, &mut p_slices, &g_slices, lr, config.weight_decay)?;
            state.apply_norm_updates(updates);
        }
    }
    let test = dataset.indices(Split::Test);
    let test_in = prepare(dataset, &test, modality, None, &mut unused)?;
    let logits = clf.logits(&features(&state, &test_in)?)?;
    let out = outcome_from_logits(logits, dataset.labels(&test), k, "finetune")?;
    Ok((out, state))
}

pub fn finetune_eval(
    state: &EncoderState,
    modality: Modality,
    dataset: &Dataset,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    let train = dataset.indices(Split::Train);
    let (mut out, _) = finetune_on(state, modality, dataset, config, &train, seed)?;
    out.report = finish(out.report, "finetune", modality, seed, train.len(), config);
    Ok(out)
}

/// Finetuning restricted to a stratified labeled fraction of the training
/// split. The subset is drawn from its own RNG stream.
pub fn semi_supervised_eval(
    state: &EncoderState,
    modality: Modality,
    dataset: &Dataset,
    config: &EvalConfig,
    fraction: f64,
    seed: u64,
) -> Result<EvalOutcome> {
    let subset = stratified_subset(dataset, fraction, &mut rng_stream(seed, 4))?;
    let (mut out, _) = finetune_on(state, modality, dataset, config, &subset, seed)?;
    out.report = finish(out.report, "semi", modality, seed, subset.len(), config);
    out.report.config.push(("fraction".to_string(), fraction.to_string()));
    Ok(out)
}

fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let k = logits.shape[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / s));
    }
    out
}

/// Equal-weight sum of per-stream softmax probabilities, argmax with ties to
/// the lowest class.
pub fn fuse_streams(streams: &[EvalOutcome]) -> Result<EvalOutcome> {
    let first = streams
        .first()
        .ok_or_else(|| Error::InvalidInput("no streams to fuse".into()))?;
    let shape = first.logits.shape.clone();
    if shape.len() != 2 {
        return Err(Error::shape("fuse_streams", &shape, &[first.labels.len(), 0]));
    }
    for s in streams {
        if s.logits.shape != shape {
            return Err(Error::shape("fuse_streams", &shape, &s.logits.shape));
        }
        if s.labels != first.labels {
            return Err(Error::InvalidInput("streams are evaluated on different test sets".into()));
        }
    }
    let mut sum = vec![0.0; first.logits.numel()];
    for s in streams {
        for (a, p) in sum.iter_mut().zip(softmax_rows(&s.logits)) {
            *a += p;
        }
    }
    let fused = Tensor::new(shape.clone(), sum)?;
    let mut out = outcome_from_logits(fused, first.labels.clone(), shape[1], "fuse")?;
    out.report.modality = streams
        .iter()
        .map(|s| s.report.modality.as_str())
        .collect::<Vec<_>>()
        .join("+");
    out.report.seed = first.report.seed;
    out.report.num_labeled = first.report.num_labeled;
    Ok(out)
}
