//! Skeleton graph topology: joints, bones, left/right symmetry and body parts.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five coarse body regions used by part-level shading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Torso,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl BodyPart {
    pub const ALL: [BodyPart; 5] = [
        BodyPart::Torso,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::LeftLeg,
        BodyPart::RightLeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BodyPart::Torso => "torso",
            BodyPart::LeftArm => "left_arm",
            BodyPart::RightArm => "right_arm",
            BodyPart::LeftLeg => "left_leg",
            BodyPart::RightLeg => "right_leg",
        }
    }
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BodyPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BodyPart::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidTopology(format!("unknown body part {s:?}")))
    }
}

/// Built-in skeleton layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Compact 10-joint stick figure used for desk-scale experiments.
    Desk10,
    /// The 25-joint Kinect v2 layout used by NTU RGB+D.
    Ntu25,
}

impl TopologyKind {
    pub fn build(self) -> Topology {
        match self {
            TopologyKind::Desk10 => Topology::desk10(),
            TopologyKind::Ntu25 => Topology::ntu25(),
        }
    }
}

/// An undirected skeleton graph.
///
/// Base topologies are connected, loop-free and duplicate-free. Topologies
/// produced by [`Topology::restrict`] keep the remaining invariants but may be
/// disconnected.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    flip: Vec<usize>,
    parts: Vec<BodyPart>,
    root: usize,
}

impl Topology {
    pub fn new(
        num_joints: usize,
        edges: Vec<(usize, usize)>,
        flip: Vec<usize>,
        parts: Vec<BodyPart>,
        root: usize,
    ) -> Result<Self> {
        if num_joints < 2 {
            return Err(Error::InvalidTopology(format!(
                "need at least 2 joints, got {num_joints}"
            )));
        }
        if root >= num_joints {
            return Err(Error::InvalidTopology(format!("root {root} out of range")));
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= num_joints || b >= num_joints {
                return Err(Error::InvalidTopology(format!(
                    "edge ({a}, {b}) references a joint outside 0..{num_joints}"
                )));
            }
            if a == b {
                return Err(Error::InvalidTopology(format!("self-loop on joint {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::InvalidTopology(format!("duplicate edge ({a}, {b})")));
            }
            normalized.push(e);
        }
        if flip.len() != num_joints {
            return Err(Error::InvalidTopology(format!(
                "flip permutation has {} entries for {num_joints} joints",
                flip.len()
            )));
        }
        for (j, &f) in flip.iter().enumerate() {
            if f >= num_joints || flip[f] != j {
                return Err(Error::InvalidTopology(
                    "flip permutation is not an involution".into(),
                ));
            }
        }
        if parts.len() != num_joints {
            return Err(Error::InvalidTopology(format!(
                "part assignment has {} entries for {num_joints} joints",
                parts.len()
            )));
        }
        let topo = Topology {
            num_joints,
            edges: normalized,
            flip,
            parts,
            root,
        };
        if !topo.is_connected() {
            return Err(Error::InvalidTopology("graph is not connected".into()));
        }
        Ok(topo)
    }

    /// A connected graph with identity flip and every joint on the torso.
    pub fn from_edges(num_joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        Topology::new(
            num_joints,
            edges,
            (0..num_joints).collect(),
            vec![BodyPart::Torso; num_joints],
            0,
        )
    }

    /// Ten joints: pelvis, chest, two-segment arms and legs.
    ///
    /// ```text
    ///   3 - 2 - 1 - 4 - 5
    ///           |
    ///   7 - 6 - 0 - 8 - 9
    /// ```
    pub fn desk10() -> Self {
        use BodyPart::*;
        let edges = vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (1, 4),
            (4, 5),
            (0, 6),
            (6, 7),
            (0, 8),
            (8, 9),
        ];
        let flip = vec![0, 1, 4, 5, 2, 3, 8, 9, 6, 7];
        let parts = vec![
            Torso, Torso, LeftArm, LeftArm, RightArm, RightArm, LeftLeg, LeftLeg, RightLeg,
            RightLeg,
        ];
        Topology::new(10, edges, flip, parts, 0).expect("desk10 layout is valid")
    }

    /// NTU RGB+D 25-joint layout (0-indexed), rooted at the spine base.
    pub fn ntu25() -> Self {
        use BodyPart::*;
        let one_based = [
            (1, 2),
            (2, 21),
            (3, 21),
            (4, 3),
            (5, 21),
            (6, 5),
            (7, 6),
            (8, 7),
            (9, 21),
            (10, 9),
            (11, 10),
            (12, 11),
            (13, 1),
            (14, 13),
            (15, 14),
            (16, 15),
            (17, 1),
            (18, 17),
            (19, 18),
            (20, 19),
            (22, 23),
            (23, 8),
            (24, 25),
            (25, 12),
        ];
        let edges = one_based.iter().map(|&(a, b)| (a - 1, b - 1)).collect();
        let mut flip: Vec<usize> = (0..25).collect();
        let pairs = [
            (5, 9),
            (6, 10),
            (7, 11),
            (8, 12),
            (13, 17),
            (14, 18),
            (15, 19),
            (16, 20),
            (22, 24),
            (23, 25),
        ];
        for (l, r) in pairs {
            flip[l - 1] = r - 1;
            flip[r - 1] = l - 1;
        }
        let mut parts = vec![Torso; 25];
        for j in [5, 6, 7, 8, 22, 23] {
            parts[j - 1] = LeftArm;
        }
        for j in [9, 10, 11, 12, 24, 25] {
            parts[j - 1] = RightArm;
        }
        for j in 13..=16 {
            parts[j - 1] = LeftLeg;
        }
        for j in 17..=20 {
            parts[j - 1] = RightLeg;
        }
        Topology::new(25, edges, flip, parts, 0).expect("ntu25 layout is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn flip_permutation(&self) -> &[usize] {
        &self.flip
    }

    pub fn parts(&self) -> &[BodyPart] {
        &self.parts
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joints_in(&self, part: BodyPart) -> Vec<usize> {
        (0..self.num_joints)
            .filter(|&j| self.parts[j] == part)
            .collect()
    }

    /// Number of incident edges per joint.
    pub fn degree_vector(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_joints];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Dense symmetric 0/1 adjacency, row-major `V × V`.
    pub fn adjacency(&self) -> Vec<f64> {
        let v = self.num_joints;
        let mut a = vec![0.0; v * v];
        for &(i, j) in &self.edges {
            a[i * v + j] = 1.0;
            a[j * v + i] = 1.0;
        }
        a
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.num_joints];
        for &(a, b) in &self.edges {
            nb[a].push(b);
            nb[b].push(a);
        }
        for list in &mut nb {
            list.sort_unstable();
        }
        nb
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let nb = self.neighbors();
        let mut label = vec![usize::MAX; self.num_joints];
        let mut out = Vec::new();
        for start in 0..self.num_joints {
            if label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut comp = vec![start];
            label[start] = id;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &w in &nb[u] {
                    if label[w] == usize::MAX {
                        label[w] = id;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Parent pointers of the breadth-first spanning tree from the root.
    ///
    /// Requires the graph to be a tree (connected, `V - 1` edges).
    pub fn bfs_parents(&self) -> Result<Vec<Option<usize>>> {
        if self.edges.len() + 1 != self.num_joints || !self.is_connected() {
            return Err(Error::InvalidTopology(format!(
                "bone stream needs a tree; graph has {} joints and {} edges",
                self.num_joints,
                self.edges.len()
            )));
        }
        let nb = self.neighbors();
        let mut parent = vec![None; self.num_joints];
        let mut visited = vec![false; self.num_joints];
        visited[self.root] = true;
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &w in &nb[u] {
                if !visited[w] {
                    visited[w] = true;
                    parent[w] = Some(u);
                    queue.push_back(w);
                }
            }
        }
        Ok(parent)
    }

    /// Induced subgraph on the joints not in `masked`.
    ///
    /// Returns the restricted topology and the old→new index map (`None` for
    /// masked joints). The result may be disconnected. Flip partners that were
    /// masked map to themselves.
    pub fn restrict(&self, masked: &[usize]) -> Result<(Topology, Vec<Option<usize>>)> {
        let mut is_masked = vec![false; self.num_joints];
        for &j in masked {
            if j >= self.num_joints {
                return Err(Error::OutOfRange(format!(
                    "masked joint {j} outside 0..{}",
                    self.num_joints
                )));
            }
            is_masked[j] = true;
        }
        let mut remap = vec![None; self.num_joints];
        let mut next = 0;
        for j in 0..self.num_joints {
            if !is_masked[j] {
                remap[j] = Some(next);
                next += 1;
            }
        }
        if next == 0 {
            return Err(Error::InvalidInput("all joints are masked".into()));
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(a, b)| Some((remap[a]?, remap[b]?)))
            .collect();
        let mut flip = vec![0; next];
        let mut parts = vec![BodyPart::Torso; next];
        for j in 0..self.num_joints {
            if let Some(n) = remap[j] {
                flip[n] = remap[self.flip[j]].unwrap_or(n);
                parts[n] = self.parts[j];
            }
        }
        // The root may itself be masked; fall back to the first survivor.
        let root = remap[self.root].unwrap_or(0);
        Ok((
            Topology {
                num_joints: next,
                edges,
                flip,
                parts,
                root,
            },
            remap,
        ))
    }
}
