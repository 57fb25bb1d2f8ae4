//! Ordinary view augmentations: shear, rotate, spatial flip and temporal crop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SkeletonSequence, Topology};
use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Shear factors are drawn from `[-shear_amplitude, shear_amplitude]`.
    pub shear_amplitude: f64,
    /// Frames padded before cropping, as a fraction of `T`.
    pub crop_pad_ratio: f64,
    pub rotate_main_max: f64,
    pub rotate_minor_max: f64,
    pub flip_probability: f64,
    /// When false, shear and rotate are skipped (for inputs whose channels are
    /// not 3D coordinates).
    pub spatial_transforms: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            shear_amplitude: 1.0,
            crop_pad_ratio: 1.0 / 6.0,
            rotate_main_max: std::f64::consts::PI / 6.0,
            rotate_minor_max: std::f64::consts::PI / 180.0,
            flip_probability: 0.5,
            spatial_transforms: true,
        }
    }
}

impl AugmentParams {
    /// Parameters under which every augmentation is the identity.
    pub fn identity() -> Self {
        AugmentParams {
            shear_amplitude: 0.0,
            crop_pad_ratio: 0.0,
            rotate_main_max: 0.0,
            rotate_minor_max: 0.0,
            flip_probability: 0.0,
            spatial_transforms: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.shear_amplitude >= 0.0
            && self.crop_pad_ratio >= 0.0
            && self.rotate_main_max >= 0.0
            && self.rotate_minor_max >= 0.0
            && (0.0..=1.0).contains(&self.flip_probability)
            && self.shear_amplitude.is_finite()
            && self.crop_pad_ratio.is_finite()
            && self.rotate_main_max.is_finite()
            && self.rotate_minor_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation parameters {self:?}")))
        }
    }
}

fn require_xyz(seq: &SkeletonSequence) -> Result<()> {
    if seq.channels() != 3 {
        return Err(Error::InvalidModality {
            expected: 3,
            got: seq.channels(),
        });
    }
    Ok(())
}

/// Unit-diagonal shear matrix; off-diagonal factors drawn in the order
/// `s12, s13, s21, s23, s31, s32`.
pub fn sample_shear_matrix<R: Rng + ?Sized>(amplitude: f64, rng: &mut R) -> Mat3 {
    let mut draw = || amplitude * (2.0 * rng.random::<f64>() - 1.0);
    let (s12, s13, s21, s23, s31, s32) = (draw(), draw(), draw(), draw(), draw(), draw());
    [[1.0, s12, s13], [s21, 1.0, s23], [s31, s32, 1.0]]
}

pub fn rotation_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rotation_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rotation_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Angles `[x, y, z]` for one rotation: a main axis is picked uniformly, it
/// gets an angle in `[0, main_max]`, the other two in `[0, minor_max]`.
pub fn sample_rotation_angles<R: Rng + ?Sized>(params: &AugmentParams, rng: &mut R) -> [f64; 3] {
    let main = rng.random_range(0..3usize);
    std::array::from_fn(|axis| {
        let bound = if axis == main {
            params.rotate_main_max
        } else {
            params.rotate_minor_max
        };
        bound * rng.random::<f64>()
    })
}

/// `R = Rx · Ry · Rz`.
pub fn rotation_matrix(angles: [f64; 3]) -> Mat3 {
    mat3_mul(
        &mat3_mul(&rotation_x(angles[0]), &rotation_y(angles[1])),
        &rotation_z(angles[2]),
    )
}

/// Left-multiplies every joint coordinate by `m`.
pub fn apply_linear(seq: &SkeletonSequence, m: &Mat3) -> Result<SkeletonSequence> {
    require_xyz(seq)?;
    let mut out = seq.clone();
    let plane = seq.frames() * seq.joints();
    let src = seq.data();
    let dst = out.data_mut();
    for i in 0..plane {
        let p = [src[i], src[plane + i], src[2 * plane + i]];
        for (c, row) in m.iter().enumerate() {
            dst[c * plane + i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
        }
    }
    Ok(out)
}

pub fn shear<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    require_xyz(seq)?;
    let s = sample_shear_matrix(params.shear_amplitude, rng);
    apply_linear(seq, &s)
}

pub fn rotate<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    require_xyz(seq)?;
    let r = rotation_matrix(sample_rotation_angles(params, rng));
    apply_linear(seq, &r)
}

/// Number of padding frames for a sequence of `frames` frames.
pub fn crop_padding(frames: usize, ratio: f64) -> usize {
    // tolerance absorbs representation error in ratios like 1/6
    (ratio * frames as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Source frame for padded position `i` when `left` reflected frames precede
/// a sequence of `frames` frames.
fn reflect_index(i: isize, frames: usize) -> usize {
    if frames == 1 {
        return 0;
    }
    let period = 2 * (frames as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= frames as isize {
        k = period - k;
    }
    k as usize
}

/// Frame indices of the reflection-padded sequence, `T + pad` entries.
pub fn padded_frame_indices(frames: usize, pad: usize) -> Vec<usize> {
    let left = pad / 2;
    (0..frames + pad)
        .map(|i| reflect_index(i as isize - left as isize, frames))
        .collect()
}

pub fn temporal_crop<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    let t_n = seq.frames();
    if t_n < 2 {
        return Err(Error::InvalidInput(format!(
            "temporal crop needs at least 2 frames, got {t_n}"
        )));
    }
    let pad = crop_padding(t_n, params.crop_pad_ratio);
    let padded = padded_frame_indices(t_n, pad);
    let start = rng.random_range(0..=pad);
    Ok(seq.select_frames(&padded[start..start + t_n]))
}

/// Swaps left and right joints with probability `flip_probability`.
pub fn spatial_flip<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    topology: &Topology,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    if topology.num_joints() != seq.joints() {
        return Err(Error::shape(
            "spatial_flip",
            &[seq.joints()],
            &[topology.num_joints()],
        ));
    }
    if rng.random::<f64>() < params.flip_probability {
        Ok(seq.select_joints(topology.flip_permutation()))
    } else {
        Ok(seq.clone())
    }
}

/// shear → rotate → spatial flip → temporal crop.
pub fn ordinary_augment<R: Rng + ?Sized>(
    seq: &SkeletonSequence,
    topology: &Topology,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<SkeletonSequence> {
    let mut x = if params.spatial_transforms {
        let sheared = shear(seq, params, rng)?;
        rotate(&sheared, params, rng)?
    } else {
        seq.clone()
    };
    x = spatial_flip(&x, topology, params, rng)?;
    temporal_crop(&x, params, rng)
}
