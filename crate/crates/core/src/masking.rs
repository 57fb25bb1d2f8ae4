//! Central spatial masking and motion-attention temporal masking.
//!
//! Spatial masking removes joints sampled with probability proportional to
//! their degree, together with the matching adjacency rows and columns, so a
//! masked joint never enters the encoder. Temporal masking removes the `K`
//! frames with the largest motion attention plus `K` further frames drawn
//! uniformly from the rest.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BodyPart, SkeletonSequence, Topology};
use crate::error::{Error, Result};

/// Default number of masked joints on a 25-joint skeleton.
pub const DEFAULT_MASKED_JOINTS: usize = 9;
/// Default number of attention-selected key frames.
pub const DEFAULT_KEY_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Joints removed per spatial view; 0 disables spatial masking.
    pub masked_joints: usize,
    /// `K`: key frames removed per temporal view, plus `K` random ones.
    pub key_frames: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            masked_joints: DEFAULT_MASKED_JOINTS,
            key_frames: DEFAULT_KEY_FRAMES,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self, num_joints: usize, frames: usize) -> Result<()> {
        if self.masked_joints + 2 > num_joints && self.masked_joints > 0 {
            return Err(Error::Config(format!(
                "mask.masked_joints = {} must be at most {} for {num_joints} joints",
                self.masked_joints,
                num_joints.saturating_sub(2)
            )));
        }
        if 2 * self.key_frames + 2 > frames {
            return Err(Error::Config(format!(
                "mask.key_frames = {} removes too many of {frames} frames",
                self.key_frames
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMaskPlan {
    /// Sorted indices of removed joints.
    pub masked_joints: Vec<usize>,
    /// Per-joint selection probabilities the mask was drawn from.
    pub probabilities: Vec<f64>,
}

impl SpatialMaskPlan {
    pub fn empty(num_joints: usize) -> Self {
        SpatialMaskPlan {
            masked_joints: Vec::new(),
            probabilities: vec![1.0 / num_joints as f64; num_joints],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionAttention {
    /// `a_t` for each of the `T - 1` frame transitions; sums to one.
    pub weights: Vec<f64>,
    /// Set when the sequence is static and uniform weights were substituted.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMaskPlan {
    /// Sorted indices of the top-`K` attention frames.
    pub key_frames: Vec<usize>,
    /// Sorted indices of the `K` uniformly drawn frames.
    pub random_frames: Vec<usize>,
    pub attention: MotionAttention,
}

impl TemporalMaskPlan {
    pub fn masked_frames(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .key_frames
            .iter()
            .chain(&self.random_frames)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }

    pub fn surviving_frames(&self, frames: usize) -> Vec<usize> {
        let mut keep = vec![true; frames];
        for &t in self.key_frames.iter().chain(&self.random_frames) {
            keep[t] = false;
        }
        (0..frames).filter(|&t| keep[t]).collect()
    }
}

/// `p_i = w_i / Σ_j w_j` for strictly positive weights.
pub fn normalized_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidTopology(format!(
            "joint {i} has non-positive weight {}",
            weights[i]
        )));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Degree-centrality masking probabilities `p_i = d_i / Σ_j d_j`.
pub fn csm_probabilities(topology: &Topology) -> Result<Vec<f64>> {
    let degrees: Vec<f64> = topology
        .degree_vector()
        .into_iter()
        .map(|d| d as f64)
        .collect();
    normalized_weights(&degrees)
}

/// Sequential proportional sampling without replacement: each round picks a
/// remaining joint with probability proportional to its `p_i`.
pub fn sample_spatial_mask<R: Rng + ?Sized>(
    probabilities: &[f64],
    n_mask: usize,
    rng: &mut R,
) -> Result<SpatialMaskPlan> {
    let v_n = probabilities.len();
    if n_mask < 1 || n_mask + 2 > v_n {
        return Err(Error::OutOfRange(format!(
            "n_mask = {n_mask} must lie in 1..={} for {v_n} joints",
            v_n.saturating_sub(2)
        )));
    }
    let mut remaining: Vec<usize> = (0..v_n).collect();
    let mut masked = Vec::with_capacity(n_mask);
    for _ in 0..n_mask {
        let total: f64 = remaining.iter().map(|&j| probabilities[j]).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (k, &j) in remaining.iter().enumerate() {
            acc += probabilities[j];
            if target < acc {
                pick = k;
                break;
            }
        }
        masked.push(remaining.remove(pick));
    }
    masked.sort_unstable();
    Ok(SpatialMaskPlan {
        masked_joints: masked,
        probabilities: probabilities.to_vec(),
    })
}

/// `n` distinct joints drawn uniformly.
pub fn sample_uniform_joints<R: Rng + ?Sized>(
    num_joints: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n + 2 > num_joints && n > 0 {
        return Err(Error::OutOfRange(format!(
            "cannot shade {n} of {num_joints} joints; at most {} allowed",
            num_joints.saturating_sub(2)
        )));
    }
    let mut joints = index::sample(rng, num_joints, n).into_vec();
    joints.sort_unstable();
    Ok(joints)
}

/// All joints of `n` distinct body parts drawn uniformly from the five.
pub fn sample_part_joints<R: Rng + ?Sized>(
    topology: &Topology,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<BodyPart>, Vec<usize>)> {
    if n > BodyPart::ALL.len() - 1 {
        return Err(Error::OutOfRange(format!(
            "cannot shade {n} body parts; at most {} allowed",
            BodyPart::ALL.len() - 1
        )));
    }
    let mut parts: Vec<BodyPart> = index::sample(rng, BodyPart::ALL.len(), n)
        .into_iter()
        .map(|i| BodyPart::ALL[i])
        .collect();
    parts.sort_unstable();
    let joints = (0..topology.num_joints())
        .filter(|&j| parts.contains(&topology.parts()[j]))
        .collect();
    Ok((parts, joints))
}

/// Induced subgraph on unmasked joints with the old→new index map.
pub fn restrict_topology(
    topology: &Topology,
    masked_joints: &[usize],
) -> Result<(Topology, Vec<Option<usize>>)> {
    topology.restrict(masked_joints)
}

/// Removes the masked joints from the joint axis.
pub fn apply_spatial_mask(seq: &SkeletonSequence, masked_joints: &[usize]) -> Result<SkeletonSequence> {
    let mut keep = vec![true; seq.joints()];
    for &j in masked_joints {
        if j >= seq.joints() {
            return Err(Error::OutOfRange(format!(
                "masked joint {j} outside 0..{}",
                seq.joints()
            )));
        }
        keep[j] = false;
    }
    let survivors: Vec<usize> = (0..seq.joints()).filter(|&j| keep[j]).collect();
    if survivors.is_empty() {
        return Err(Error::InvalidInput("all joints are masked".into()));
    }
    Ok(seq.select_joints(&survivors))
}

/// Normalized squared displacement energy per frame transition.
pub fn motion_attention(seq: &SkeletonSequence) -> Result<MotionAttention> {
    let t_n = seq.frames();
    if t_n < 2 {
        return Err(Error::InvalidInput(format!(
            "motion attention needs at least 2 frames, got {t_n}"
        )));
    }
    let mut energy = vec![0.0; t_n - 1];
    for c in 0..seq.channels() {
        for (t, e) in energy.iter_mut().enumerate() {
            let a = seq.index(c, t, 0);
            let b = seq.index(c, t + 1, 0);
            let data = seq.data();
            for v in 0..seq.joints() {
                let d = data[b + v] - data[a + v];
                *e += d * d;
            }
        }
    }
    let total: f64 = energy.iter().sum();
    if total > 0.0 {
        Ok(MotionAttention {
            weights: energy.iter().map(|e| e / total).collect(),
            degenerate: false,
        })
    } else {
        Ok(MotionAttention {
            weights: vec![1.0 / (t_n - 1) as f64; t_n - 1],
            degenerate: true,
        })
    }
}

/// Indices of the `k` largest weights; ties go to the lower index.
pub fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

pub fn sample_temporal_mask<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    k: usize,
    rng: &mut R,
) -> Result<TemporalMaskPlan> {
    let t_n = seq.frames();
    if 2 * k + 2 > t_n {
        return Err(Error::OutOfRange(format!(
            "2K = {} leaves fewer than 2 of {t_n} frames",
            2 * k
        )));
    }
    let attention = motion_attention(seq)?;
    let key_frames = top_k_indices(&attention.weights, k);
    let mut is_key = vec![false; t_n];
    for &t in &key_frames {
        is_key[t] = true;
    }
    let rest: Vec<usize> = (0..t_n).filter(|&t| !is_key[t]).collect();
    let mut random_frames: Vec<usize> = index::sample(rng, rest.len(), k)
        .into_iter()
        .map(|i| rest[i])
        .collect();
    random_frames.sort_unstable();
    Ok(TemporalMaskPlan {
        key_frames,
        random_frames,
        attention,
    })
}

/// Removes masked frames, preserving the order of the survivors.
pub fn apply_temporal_mask(seq: &SkeletonSequence, plan: &TemporalMaskPlan) -> Result<SkeletonSequence> {
    if let Some(&t) = plan
        .key_frames
        .iter()
        .chain(&plan.random_frames)
        .find(|&&t| t >= seq.frames())
    {
        return Err(Error::OutOfRange(format!(
            "masked frame {t} outside 0..{}",
            seq.frames()
        )));
    }
    Ok(seq.select_frames(&plan.surviving_frames(seq.frames())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path4() -> Topology {
        Topology::from_edges(4, vec![(0, 1), (1, 2), (2, 3)]).unwrap()
    }

    fn star5() -> Topology {
        Topology::from_edges(5, vec![(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap()
    }

    fn random_seq(c: usize, t: usize, v: usize, seed: u64) -> SkeletonSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SkeletonSequence::from_fn(c, t, v, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn csm_probabilities_on_path_and_star() {
        let p = csm_probabilities(&path4()).unwrap();
        let want = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            csm_probabilities(&star5()).unwrap(),
            vec![0.5, 0.125, 0.125, 0.125, 0.125]
        );
    }

    #[test]
    fn csm_argmax_tracks_degree_and_sums_to_one() {
        let t = Topology::ntu25();
        let p = csm_probabilities(&t).unwrap();
        let d = t.degree_vector();
        let argmax_p = top_k_indices(&p, 1)[0];
        let argmax_d = (0..25).max_by_key(|&i| (d[i], std::cmp::Reverse(i))).unwrap();
        assert_eq!(argmax_p, argmax_d);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn csm_is_scale_free() {
        let d = [1.0, 2.0, 2.0, 3.0, 1.0];
        let p = normalized_weights(&d).unwrap();
        let doubled: Vec<f64> = d.iter().map(|x| 2.0 * x).collect();
        let q = normalized_weights(&doubled).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_joint_is_rejected() {
        assert!(matches!(
            normalized_weights(&[1.0, 0.0, 1.0]),
            Err(Error::InvalidTopology(_))
        ));
    }

    #[test]
    fn single_joint_draws_follow_degree() {
        let p = csm_probabilities(&path4()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_spatial_mask(&p, 1, &mut rng).unwrap().masked_joints[0]] += 1;
        }
        for j in 0..4 {
            let sigma = (n as f64 * p[j] * (1.0 - p[j])).sqrt();
            assert!((counts[j] as f64 - n as f64 * p[j]).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn high_degree_joint_is_masked_more_often_than_leaves() {
        let p = csm_probabilities(&star5()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut counts = [0f64; 5];
        for _ in 0..n {
            counts[sample_spatial_mask(&p, 1, &mut rng).unwrap().masked_joints[0]] += 1.0;
        }
        for leaf in 1..5 {
            let sigma = (counts[0] + counts[leaf]).sqrt();
            assert!(counts[0] - counts[leaf] > 3.0 * sigma);
        }
    }

    #[test]
    fn uniform_degrees_reach_every_subset_uniformly() {
        // cycle of 5: all degrees 2, n_mask = 3 → C(5,3) = 10 subsets
        let t = Topology::from_edges(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        let p = csm_probabilities(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..n {
            let m = sample_spatial_mask(&p, 3, &mut rng).unwrap().masked_joints;
            *counts.entry(m).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        let q = 0.1;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - n as f64 * q).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn mask_size_bounds_and_determinism() {
        let p = csm_probabilities(&path4()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_spatial_mask(&p, 0, &mut rng).is_err());
        assert!(sample_spatial_mask(&p, 3, &mut rng).is_err());
        let a = sample_spatial_mask(&p, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_spatial_mask(&p, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masked_joints.len(), 2);
    }

    #[test]
    fn ntu_mask_of_nine_leaves_sixteen_joints() {
        let t = Topology::ntu25();
        let p = csm_probabilities(&t).unwrap();
        let plan = sample_spatial_mask(&p, DEFAULT_MASKED_JOINTS, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = random_seq(3, 5, 25, 0);
        let out = apply_spatial_mask(&s, &plan.masked_joints).unwrap();
        assert_eq!(out.joints(), 16);
        let (r, remap) = restrict_topology(&t, &plan.masked_joints).unwrap();
        assert_eq!(r.num_joints(), 16);
        for old in 0..25 {
            if let Some(new) = remap[old] {
                for c in 0..3 {
                    for f in 0..5 {
                        assert_eq!(out.get(c, f, new), s.get(c, f, old));
                    }
                }
            }
        }
    }

    #[test]
    fn empty_spatial_mask_is_identity() {
        let s = random_seq(3, 4, 6, 2);
        assert_eq!(apply_spatial_mask(&s, &[]).unwrap(), s);
    }

    #[test]
    fn attention_on_single_transition() {
        let s = SkeletonSequence::from_fn(3, 8, 4, |c, t, v| {
            (c + v) as f64 + if t >= 4 { 1.5 } else { 0.0 }
        });
        let a = motion_attention(&s).unwrap();
        assert!(!a.degenerate);
        for (t, w) in a.weights.iter().enumerate() {
            assert_eq!(*w, if t == 3 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn attention_of_uniform_motion_is_flat() {
        let s = SkeletonSequence::from_fn(3, 9, 2, |c, t, _| t as f64 * (c as f64 + 1.0));
        let a = motion_attention(&s).unwrap();
        for w in &a.weights {
            assert!((w - 1.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_brute_force() {
        let s = random_seq(3, 8, 4, 12);
        let a = motion_attention(&s).unwrap();
        let mut e = vec![0.0; 7];
        for t in 0..7 {
            for c in 0..3 {
                for v in 0..4 {
                    e[t] += (s.get(c, t + 1, v) - s.get(c, t, v)).powi(2);
                }
            }
        }
        let total: f64 = e.iter().sum();
        for t in 0..7 {
            assert!((a.weights[t] - e[t] / total).abs() < 1e-15);
        }
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn static_sequence_falls_back_to_uniform() {
        let s = SkeletonSequence::zeros(3, 5, 2);
        let a = motion_attention(&s).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.weights, vec![0.25; 4]);
    }

    #[test]
    fn attention_ignores_constant_offset() {
        let s = random_seq(3, 10, 5, 1);
        let mut shifted = s.clone();
        for x in shifted.data_mut() {
            *x += 3.25;
        }
        let a = motion_attention(&s).unwrap().weights;
        let b = motion_attention(&shifted).unwrap().weights;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.3, 0.3, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn zero_k_plan_is_empty() {
        let s = random_seq(3, 6, 3, 4);
        let plan = sample_temporal_mask(&s, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(plan.key_frames.is_empty() && plan.random_frames.is_empty());
        assert_eq!(apply_temporal_mask(&s, &plan).unwrap(), s);
    }

    #[test]
    fn fifty_frames_k_ten_keeps_thirty() {
        let s = random_seq(3, 50, 10, 6);
        let plan = sample_temporal_mask(&s, DEFAULT_KEY_FRAMES, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(plan.masked_frames().len(), 20);
        let out = apply_temporal_mask(&s, &plan).unwrap();
        assert_eq!(out.frames(), 30);
        let keep = plan.surviving_frames(50);
        assert_eq!(out, s.select_frames(&keep));
        assert!(keep.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn too_many_masked_frames_is_rejected() {
        let s = random_seq(3, 10, 2, 0);
        assert!(sample_temporal_mask(&s, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(sample_temporal_mask(&s, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn key_frames_carry_maximal_attention() {
        let s = random_seq(3, 12, 3, 21);
        let plan = sample_temporal_mask(&s, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = &plan.attention.weights;
        let key_mass: f64 = plan.key_frames.iter().map(|&t| w[t]).sum();
        // exhaustive over all 3-subsets of the 11 transitions
        for a in 0..11 {
            for b in a + 1..11 {
                for c in b + 1..11 {
                    assert!(key_mass >= w[a] + w[b] + w[c] - 1e-15);
                }
            }
        }
    }

    #[test]
    fn part_shading_of_four_leaves_one_part() {
        let t = Topology::desk10();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (parts, joints) = sample_part_joints(&t, 4, &mut rng).unwrap();
            assert_eq!(parts.len(), 4);
            let left: Vec<BodyPart> = BodyPart::ALL
                .into_iter()
                .filter(|p| !parts.contains(p))
                .collect();
            assert_eq!(left.len(), 1);
            let survivors: Vec<usize> = (0..10).filter(|j| !joints.contains(j)).collect();
            assert_eq!(survivors, t.joints_in(left[0]));
        }
        assert!(sample_part_joints(&t, 5, &mut rng).is_err());
    }
}
