//! Labelled collections of skeleton sequences and their on-disk format.
//!
//! A dataset is stored as a TOML manifest plus a binary payload of
//! little-endian `f32` values laid out sequence-major, then `C`, `T`, `V`.
//! The manifest records the shape, labels, subjects, split and the full
//! topology (edges, flip permutation, part assignment, root joint).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::skeleton::SkeletonSequence;
use super::topology::{BodyPart, Topology};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "pstl-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SkeletonSequence>,
    pub topology: Topology,
    pub split: Vec<Split>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        sequences: Vec<SkeletonSequence>,
        topology: Topology,
        split: Vec<Split>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            sequences,
            topology,
            split,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.len() != self.sequences.len() {
            return Err(Error::shape(
                "Dataset",
                &[self.sequences.len()],
                &[self.split.len()],
            ));
        }
        if let Some(first) = self.sequences.first() {
            let shape = first.shape();
            if shape[2] != self.topology.num_joints() {
                return Err(Error::shape(
                    "Dataset",
                    &shape,
                    &[self.topology.num_joints()],
                ));
            }
            for s in &self.sequences {
                if s.shape() != shape {
                    return Err(Error::shape("Dataset", &shape, &s.shape()));
                }
                if s.label >= self.num_classes {
                    return Err(Error::OutOfRange(format!(
                        "label {} outside 0..{}",
                        s.label, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// `[C, T, V]` shared by every sequence, or `None` when empty.
    pub fn shape(&self) -> Option<[usize; 3]> {
        self.sequences.first().map(|s| s.shape())
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.sequences[i].label).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    payload: String,
    num_sequences: usize,
    #[serde(rename = "C")]
    channels: usize,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "V")]
    joints: usize,
    num_classes: usize,
    labels: Vec<usize>,
    subjects: Vec<u32>,
    split: Vec<Split>,
    root: usize,
    edges: Vec<[usize; 2]>,
    flip: Vec<usize>,
    parts: Vec<BodyPart>,
}

fn payload_path(manifest_path: &Path, payload: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.join(payload))
        .unwrap_or_else(|| PathBuf::from(payload))
}

/// Writes `<path>` (manifest) and a sibling `<stem>.bin` payload.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let path = path.as_ref();
    let [channels, frames, joints] = dataset.shape().unwrap_or([0, 0, 0]);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    let payload = format!("{stem}.bin");
    let topo = &dataset.topology;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        payload: payload.clone(),
        num_sequences: dataset.len(),
        channels,
        frames,
        joints,
        num_classes: dataset.num_classes,
        labels: dataset.sequences.iter().map(|s| s.label).collect(),
        subjects: dataset.sequences.iter().map(|s| s.subject).collect(),
        split: dataset.split.clone(),
        root: topo.root(),
        edges: topo.edges().iter().map(|&(a, b)| [a, b]).collect(),
        flip: topo.flip_permutation().to_vec(),
        parts: topo.parts().to_vec(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Config(format!("serializing dataset manifest: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;

    let mut bytes = Vec::with_capacity(dataset.len() * channels * frames * joints * 4);
    for s in &dataset.sequences {
        for &x in s.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let bin = payload_path(path, &payload);
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
        return Err(malformed(format!(
            "unsupported format {:?} version {}",
            m.format, m.version
        )));
    }
    for (name, len) in [
        ("labels", m.labels.len()),
        ("subjects", m.subjects.len()),
        ("split", m.split.len()),
    ] {
        if len != m.num_sequences {
            return Err(malformed(format!(
                "{name} has {len} entries for {} sequences",
                m.num_sequences
            )));
        }
    }
    if m.num_sequences > 0 && (m.channels == 0 || m.frames == 0 || m.joints == 0) {
        return Err(malformed("zero-sized sequence shape".into()));
    }
    let topology = Topology::new(
        m.joints,
        m.edges.iter().map(|e| (e[0], e[1])).collect(),
        m.flip.clone(),
        m.parts.clone(),
        m.root,
    )
    .map_err(|e| malformed(e.to_string()))?;

    let bin = payload_path(path, &m.payload);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let per_seq = m.channels * m.frames * m.joints;
    let expected = m.num_sequences * per_seq;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::PayloadShape {
            path: bin,
            expected,
            found: bytes.len() / 4,
        });
    }
    let mut values = Vec::with_capacity(expected);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !x.is_finite() {
            return Err(Error::NonFinite {
                path: bin,
                offset: i,
            });
        }
        values.push(x as f64);
    }
    let mut sequences = Vec::with_capacity(m.num_sequences);
    for (i, chunk) in values.chunks_exact(per_seq.max(1)).enumerate().take(m.num_sequences) {
        let mut s =
            SkeletonSequence::new(m.channels, m.frames, m.joints, chunk.to_vec(), m.labels[i])?;
        s.subject = m.subjects[i];
        sequences.push(s);
    }
    Dataset::new(sequences, topology, m.split, m.num_classes)
        .map_err(|e| malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sequence_dataset() -> Dataset {
        let seq = SkeletonSequence::from_fn(3, 4, 10, |c, t, v| {
            ((c * 7 + t * 3 + v) as f32 * 0.37).sin() as f64
        })
        .with_label(1);
        Dataset::new(vec![seq], Topology::desk10(), vec![Split::Train], 2).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.toml");
        let ds = one_sequence_dataset();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.topology, ds.topology);
        for (a, b) in back.sequences[0].data().iter().zip(ds.sequences[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_payload_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.toml");
        save_dataset(&one_sequence_dataset(), &path).unwrap();
        let bin = dir.path().join("ds.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::PayloadShape { .. })));
    }

    #[test]
    fn manifest_joint_count_disagreeing_with_payload() {
        // 25-joint manifest over a payload written for 24 joints
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.toml");
        let seq = SkeletonSequence::from_fn(3, 4, 25, |_, _, _| 0.5);
        let ds = Dataset::new(vec![seq], Topology::ntu25(), vec![Split::Test], 1).unwrap();
        save_dataset(&ds, &path).unwrap();
        std::fs::write(dir.path().join("ds.bin"), vec![0u8; 3 * 4 * 24 * 4]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::PayloadShape { .. })));
    }

    #[test]
    fn malformed_manifest_and_non_finite_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.toml");
        save_dataset(&one_sequence_dataset(), &path).unwrap();

        let bin = dir.path().join("ds.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::NonFinite { offset: 2, .. })
        ));

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("num_classes", "n_classes")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn rejects_out_of_range_label() {
        let seq = SkeletonSequence::zeros(3, 2, 10).with_label(3);
        assert!(Dataset::new(vec![seq], Topology::desk10(), vec![Split::Train], 3).is_err());
    }
}
