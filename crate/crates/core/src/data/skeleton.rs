use serde::{Deserialize, Serialize};

use super::topology::Topology;
use crate::error::{Error, Result};

/// A `C × T × V` array of joint coordinates with its action label.
///
/// Values are stored channel-major: index `(c * T + t) * V + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    channels: usize,
    frames: usize,
    joints: usize,
    data: Vec<f64>,
    pub label: usize,
    pub subject: u32,
}

/// Input representation fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    /// Joint coordinates.
    J,
    /// Frame-to-frame displacement.
    M,
    /// Child-minus-parent bone vectors.
    B,
}

impl SkeletonSequence {
    pub fn new(
        channels: usize,
        frames: usize,
        joints: usize,
        data: Vec<f64>,
        label: usize,
    ) -> Result<Self> {
        if channels < 1 || frames < 1 || joints < 1 {
            return Err(Error::InvalidInput(format!(
                "degenerate sequence shape {channels}x{frames}x{joints}"
            )));
        }
        if data.len() != channels * frames * joints {
            return Err(Error::shape(
                "SkeletonSequence::new",
                &[channels, frames, joints],
                &[data.len()],
            ));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at offset {i}")));
        }
        Ok(SkeletonSequence {
            channels,
            frames,
            joints,
            data,
            label,
            subject: 0,
        })
    }

    pub fn zeros(channels: usize, frames: usize, joints: usize) -> Self {
        SkeletonSequence {
            channels,
            frames,
            joints,
            data: vec![0.0; channels * frames * joints],
            label: 0,
            subject: 0,
        }
    }

    /// Builds a sequence from `f(c, t, v)`.
    pub fn from_fn(
        channels: usize,
        frames: usize,
        joints: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * frames * joints);
        for c in 0..channels {
            for t in 0..frames {
                for v in 0..joints {
                    data.push(f(c, t, v));
                }
            }
        }
        SkeletonSequence {
            channels,
            frames,
            joints,
            data,
            label: 0,
            subject: 0,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.frames, self.joints]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, v: usize) -> usize {
        (c * self.frames + t) * self.joints + v
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, v: usize) -> f64 {
        self.data[self.index(c, t, v)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, v: usize, x: f64) {
        let i = self.index(c, t, v);
        self.data[i] = x;
    }

    /// Same metadata, new payload shape.
    pub(crate) fn rebuild(&self, frames: usize, joints: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.channels * frames * joints);
        SkeletonSequence {
            channels: self.channels,
            frames,
            joints,
            data,
            label: self.label,
            subject: self.subject,
        }
    }

    /// Keeps the listed frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Self {
        let (c_n, v_n) = (self.channels, self.joints);
        let mut data = Vec::with_capacity(c_n * frames.len() * v_n);
        for c in 0..c_n {
            for &t in frames {
                let start = self.index(c, t, 0);
                data.extend_from_slice(&self.data[start..start + v_n]);
            }
        }
        self.rebuild(frames.len(), v_n, data)
    }

    /// Keeps the listed joints, in the given order.
    pub fn select_joints(&self, joints: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.channels * self.frames * joints.len());
        for c in 0..self.channels {
            for t in 0..self.frames {
                let row = self.index(c, t, 0);
                data.extend(joints.iter().map(|&v| self.data[row + v]));
            }
        }
        self.rebuild(self.frames, joints.len(), data)
    }

    /// Temporal displacement `x[t+1] - x[t]`; `T - 1` frames.
    pub fn to_motion(&self) -> Result<Self> {
        if self.frames < 2 {
            return Err(Error::InvalidInput(format!(
                "motion needs at least 2 frames, got {}",
                self.frames
            )));
        }
        let t_out = self.frames - 1;
        let v_n = self.joints;
        let mut data = Vec::with_capacity(self.channels * t_out * v_n);
        for c in 0..self.channels {
            for t in 0..t_out {
                let a = self.index(c, t, 0);
                let b = self.index(c, t + 1, 0);
                data.extend((0..v_n).map(|v| self.data[b + v] - self.data[a + v]));
            }
        }
        Ok(self.rebuild(t_out, v_n, data))
    }

    /// Motion stream padded with a trailing zero frame so `T` is unchanged.
    pub fn to_motion_padded(&self) -> Result<Self> {
        let m = self.to_motion()?;
        let mut frames: Vec<usize> = (0..m.frames).collect();
        frames.push(0);
        let mut padded = m.select_frames(&frames);
        for c in 0..padded.channels {
            for v in 0..padded.joints {
                padded.set(c, m.frames, v, 0.0);
            }
        }
        Ok(padded)
    }

    /// Bone vectors along the breadth-first spanning tree of `topology`; the
    /// root bone is zero.
    pub fn to_bone(&self, topology: &Topology) -> Result<Self> {
        if topology.num_joints() != self.joints {
            return Err(Error::shape(
                "to_bone",
                &[self.joints],
                &[topology.num_joints()],
            ));
        }
        let parents = topology.bfs_parents()?;
        let mut out = self.clone();
        for c in 0..self.channels {
            for t in 0..self.frames {
                let row = self.index(c, t, 0);
                for (v, p) in parents.iter().enumerate() {
                    out.data[row + v] = match p {
                        Some(p) => self.data[row + v] - self.data[row + p],
                        None => 0.0,
                    };
                }
            }
        }
        Ok(out)
    }

    pub fn to_modality(&self, modality: Modality, topology: &Topology) -> Result<Self> {
        match modality {
            Modality::J => Ok(self.clone()),
            Modality::M => self.to_motion_padded(),
            Modality::B => self.to_bone(topology),
        }
    }

    /// Linear interpolation along the frame axis to `target` frames;
    /// endpoints are preserved.
    pub fn resize_temporal(&self, target: usize) -> Result<Self> {
        if target < 2 {
            return Err(Error::InvalidInput(format!(
                "target frame count must be at least 2, got {target}"
            )));
        }
        if target == self.frames {
            return Ok(self.clone());
        }
        let v_n = self.joints;
        let last = self.frames - 1;
        let mut data = Vec::with_capacity(self.channels * target * v_n);
        for c in 0..self.channels {
            for i in 0..target {
                let pos = (i * last) as f64 / (target - 1) as f64;
                let lo = (pos.floor() as usize).min(last);
                let frac = pos - lo as f64;
                let a = self.index(c, lo, 0);
                if lo == last || frac == 0.0 {
                    data.extend_from_slice(&self.data[a..a + v_n]);
                } else {
                    let b = self.index(c, lo + 1, 0);
                    data.extend(
                        (0..v_n).map(|v| self.data[a + v] * (1.0 - frac) + self.data[b + v] * frac),
                    );
                }
            }
        }
        Ok(self.rebuild(target, v_n, data))
    }
}
