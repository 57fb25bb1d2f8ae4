//! Parametric action generator standing in for captured skeleton datasets.
//!
//! Every class is a motion family: a subset of limbs oscillating along one
//! axis at a class-specific frequency, with left/right limbs moving either in
//! phase or in antiphase. Per-sequence amplitude, phase, frequency jitter,
//! body scale and global offset vary within the class, and i.i.d. Gaussian
//! noise is added to every coordinate. Values are rounded to `f32` so the
//! dataset survives the on-disk format bit-exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use super::skeleton::SkeletonSequence;
use super::topology::{BodyPart, Topology, TopologyKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub noise: f64,
    pub topology: TopologyKind,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            train_per_class: 50,
            test_per_class: 25,
            frames: 50,
            noise: 0.02,
            topology: TopologyKind::Desk10,
        }
    }
}

struct Family {
    parts: &'static [BodyPart],
    axis: usize,
    cycles: f64,
    antiphase: bool,
    amplitude: f64,
}

const FAMILIES: [Family; 4] = [
    Family {
        parts: &[BodyPart::LeftArm, BodyPart::RightArm],
        axis: 1,
        cycles: 1.0,
        antiphase: false,
        amplitude: 0.25,
    },
    Family {
        parts: &[BodyPart::LeftLeg, BodyPart::RightLeg],
        axis: 2,
        cycles: 2.0,
        antiphase: true,
        amplitude: 0.2,
    },
    Family {
        parts: &[BodyPart::LeftArm, BodyPart::RightArm],
        axis: 2,
        cycles: 3.0,
        antiphase: true,
        amplitude: 0.15,
    },
    Family {
        parts: &[BodyPart::Torso],
        axis: 0,
        cycles: 0.5,
        antiphase: false,
        amplitude: 0.3,
    },
];

fn bone_direction(part: BodyPart) -> [f64; 3] {
    match part {
        BodyPart::Torso => [0.0, 1.0, 0.0],
        BodyPart::LeftArm => [1.0, 0.1, 0.0],
        BodyPart::RightArm => [-1.0, 0.1, 0.0],
        BodyPart::LeftLeg => [0.25, -1.0, 0.0],
        BodyPart::RightLeg => [-0.25, -1.0, 0.0],
    }
}

fn is_right(part: BodyPart) -> bool {
    matches!(part, BodyPart::RightArm | BodyPart::RightLeg)
}

/// Rest pose and per-joint depth within its own body part.
fn rest_pose(topology: &Topology) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    let parents = topology.bfs_parents()?;
    let parts = topology.parts();
    let v_n = topology.num_joints();
    let mut order: Vec<usize> = vec![topology.root()];
    let mut i = 0;
    while i < order.len() {
        let u = order[i];
        order.extend((0..v_n).filter(|&w| parents[w] == Some(u)));
        i += 1;
    }
    let mut pos = vec![[0.0; 3]; v_n];
    let mut depth = vec![0.0; v_n];
    for &j in &order {
        if let Some(p) = parents[j] {
            let d = bone_direction(parts[j]);
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            for c in 0..3 {
                pos[j][c] = pos[p][c] + 0.3 * d[c] / norm;
            }
            depth[j] = if parts[p] == parts[j] { depth[p] + 1.0 } else { 1.0 };
        }
    }
    Ok((pos, depth))
}

/// Generates a labelled train/test dataset; deterministic in `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if config.num_classes < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {}",
            config.num_classes
        )));
    }
    if config.frames < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 frames, got {}",
            config.frames
        )));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(Error::InvalidInput(format!("bad noise level {}", config.noise)));
    }
    let topology = config.topology.build();
    let (rest, depth) = rest_pose(&topology)?;
    let parts = topology.parts();
    let v_n = topology.num_joints();
    let t_n = config.frames;
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let per_class = config.train_per_class + config.test_per_class;
    let mut sequences = Vec::with_capacity(config.num_classes * per_class);
    let mut split = Vec::with_capacity(config.num_classes * per_class);
    for class in 0..config.num_classes {
        let family = &FAMILIES[class % FAMILIES.len()];
        let speed = 1.0 + (class / FAMILIES.len()) as f64 * 0.75;
        for i in 0..per_class {
            let amp = family.amplitude * rng.random_range(0.7..1.3);
            let phase = rng.random_range(0.0..2.0 * PI);
            let cycles = family.cycles * speed * rng.random_range(0.9..1.1);
            let scale = rng.random_range(0.9..1.1);
            let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
            let mut seq = SkeletonSequence::zeros(3, t_n, v_n).with_label(class);
            seq.subject = (i % 10) as u32;
            for t in 0..t_n {
                let tau = t as f64 / (t_n - 1) as f64;
                for v in 0..v_n {
                    let mut p = rest[v].map(|x| x * scale);
                    let active = v != topology.root() && family.parts.contains(&parts[v]);
                    if active {
                        let side = if family.antiphase && is_right(parts[v]) { PI } else { 0.0 };
                        let wave = (2.0 * PI * cycles * tau + phase + side).sin();
                        p[family.axis] += amp * depth[v] * wave;
                    }
                    for c in 0..3 {
                        let jitter = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        seq.set(c, t, v, ((p[c] + offset[c] + jitter) as f32) as f64);
                    }
                }
            }
            sequences.push(seq);
            split.push(if i < config.train_per_class {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    Dataset::new(sequences, topology, split, config.num_classes)
}
