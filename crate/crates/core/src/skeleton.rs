//! Skeleton graph, its spectral operators, pyramid pooling groups, and the
//! left/right mirror used for flip augmentation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SKELETON16: &str = include_str!("../assets/skeleton16.json");
const SKELETON17: &str = include_str!("../assets/skeleton17.json");

/// Joint set and bone list of a human skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    name: String,
    n_joints: usize,
    edges: Vec<[usize; 2]>,
    root: usize,
    mirror: Vec<usize>,
    names: Vec<String>,
    parents: Vec<Option<usize>>,
}

impl SkeletonGraph {
    pub fn new(
        name: impl Into<String>,
        n_joints: usize,
        edges: Vec<[usize; 2]>,
        root: usize,
        mirror: Vec<usize>,
        names: Vec<String>,
    ) -> Result<Self> {
        if n_joints == 0 || root >= n_joints {
            return Err(Error::Graph(format!("root {root} invalid for {n_joints} joints")));
        }
        for &[a, b] in &edges {
            if a >= n_joints || b >= n_joints {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on joint {a}")));
            }
        }
        if mirror.len() != n_joints
            || mirror.iter().any(|&m| m >= n_joints)
            || (0..n_joints).any(|i| mirror[mirror[i]] != i)
        {
            return Err(Error::Graph("mirror map is not an involution".into()));
        }
        if names.len() != n_joints {
            return Err(Error::Graph(format!("{} names for {n_joints} joints", names.len())));
        }
        let parents = bfs_parents(n_joints, &edges, root);
        if let Some(j) = (0..n_joints).find(|&j| j != root && parents[j].is_none()) {
            return Err(Error::Graph(format!("joint {j} is not connected to the root")));
        }
        Ok(Self { name: name.into(), n_joints, edges, root, mirror, names, parents })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn mirror(&self) -> &[usize] {
        &self.mirror
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Parent of each joint in the tree rooted at the hip (breadth-first).
    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend((0..self.n_joints).filter(|&j| self.parents[j] == Some(p)));
            i += 1;
        }
        order
    }

    pub fn adjacency(&self) -> Tensor {
        let n = self.n_joints;
        let mut a = Tensor::zeros(&[n, n]);
        for &[i, j] in &self.edges {
            a.data_mut()[i * n + j] = 1.0;
            a.data_mut()[j * n + i] = 1.0;
        }
        a
    }

    /// `I − D^{-1/2} A D^{-1/2}`, the symmetric normalized Laplacian.
    pub fn normalized_adjacency(&self) -> Result<Tensor> {
        let n = self.n_joints;
        let a = self.adjacency();
        let deg: Vec<f64> = (0..n).map(|i| a.data()[i * n..(i + 1) * n].iter().sum()).collect();
        if let Some(i) = deg.iter().position(|d| *d == 0.0) {
            return Err(Error::Graph(format!("joint {i} has no edges")));
        }
        let inv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        Ok(Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let eye = if i == j { 1.0 } else { 0.0 };
            eye - inv[i] * a.data()[idx] * inv[j]
        }))
    }

    /// Mirrors a `[N, C]` pose: negates x and swaps left/right joints.
    pub fn flip_pose(&self, pose: &Tensor) -> Result<Tensor> {
        let s = pose.shape();
        if s.len() != 2 || s[0] != self.n_joints || !(s[1] == 2 || s[1] == 3) {
            return Err(Error::shape("flip_pose", s, &[self.n_joints, 3]));
        }
        let c = s[1];
        let src = pose.data();
        Ok(Tensor::from_fn(s, |idx| {
            let (j, k) = (idx / c, idx % c);
            let v = src[self.mirror[j] * c + k];
            if k == 0 {
                -v
            } else {
                v
            }
        }))
    }

    /// [`SkeletonGraph::flip_pose`] over plain coordinate arrays.
    pub fn flip_points<const C: usize>(&self, pts: &[[f64; C]]) -> Vec<[f64; C]> {
        (0..pts.len())
            .map(|j| {
                let mut p = pts[self.mirror[j]];
                p[0] = -p[0];
                p
            })
            .collect()
    }
}

fn bfs_parents(n: usize, edges: &[[usize; 2]], root: usize) -> Vec<Option<usize>> {
    let mut parents = vec![None; n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(p) = queue.pop_front() {
        for &[a, b] in edges {
            let other = if a == p {
                b
            } else if b == p {
                a
            } else {
                continue;
            };
            if !seen[other] {
                seen[other] = true;
                parents[other] = Some(p);
                queue.push_back(other);
            }
        }
    }
    parents
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &Tensor) -> Result<f64> {
    let n = square_dim(m)?;
    let mat = nalgebra::DMatrix::from_row_slice(n, n, m.data());
    let eig = nalgebra::SymmetricEigen::new(mat);
    Ok(eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

fn square_dim(m: &Tensor) -> Result<usize> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Contract(format!("expected a square matrix, got {s:?}")));
    }
    Ok(s[0])
}

/// `2Ã/λ_max − I`, mapping the spectrum of `Ã` into `[−1, 1]`.
pub fn scaled_laplacian(adjn: &Tensor) -> Result<Tensor> {
    let n = square_dim(adjn)?;
    let d = adjn.data();
    if (0..n).any(|i| (0..n).any(|j| d[i * n + j] != d[j * n + i])) {
        return Err(Error::Contract("scaled_laplacian needs a symmetric matrix".into()));
    }
    let lambda = max_eigenvalue(adjn)?;
    if !(lambda > 0.0) {
        return Err(Error::Numeric(format!("largest eigenvalue {lambda} is not positive")));
    }
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let eye = if idx / n == idx % n { 1.0 } else { 0.0 };
        2.0 * d[idx] / lambda - eye
    }))
}

/// Nested partitions of the joints into coarser and coarser groups.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingScheme {
    n_joints: usize,
    levels: Vec<PoolingLevel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingLevel {
    #[serde(default)]
    pub names: Vec<String>,
    /// Joint indices of each group.
    pub groups: Vec<Vec<usize>>,
}

impl PoolingScheme {
    pub fn new(n_joints: usize, levels: Vec<PoolingLevel>) -> Result<Self> {
        let mut prev_size = n_joints;
        let mut prev_owner: Vec<usize> = (0..n_joints).collect();
        for (li, level) in levels.iter().enumerate() {
            let mut owner = vec![usize::MAX; n_joints];
            for (g, members) in level.groups.iter().enumerate() {
                if members.is_empty() {
                    return Err(Error::Graph(format!("level {li} group {g} is empty")));
                }
                for &j in members {
                    if j >= n_joints || owner[j] != usize::MAX {
                        return Err(Error::Graph(format!(
                            "level {li}: joint {j} missing from range or assigned twice"
                        )));
                    }
                    owner[j] = g;
                }
            }
            if let Some(j) = owner.iter().position(|o| *o == usize::MAX) {
                return Err(Error::Graph(format!("level {li}: joint {j} has no group")));
            }
            if level.groups.len() >= prev_size {
                return Err(Error::Graph(format!(
                    "level {li} has {} groups, not fewer than {prev_size}",
                    level.groups.len()
                )));
            }
            // every finer node must land in exactly one coarser group
            for a in 0..n_joints {
                for b in 0..n_joints {
                    if prev_owner[a] == prev_owner[b] && owner[a] != owner[b] {
                        return Err(Error::Graph(format!("level {li} splits a group of the previous level")));
                    }
                }
            }
            if !level.names.is_empty() && level.names.len() != level.groups.len() {
                return Err(Error::Graph(format!("level {li}: names/groups length differ")));
            }
            prev_size = level.groups.len();
            prev_owner = owner;
        }
        Ok(Self { n_joints, levels })
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn levels(&self) -> &[PoolingLevel] {
        &self.levels
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.groups.len()).collect()
    }

    /// `N + ΣM_i`: joints plus every pooled node.
    pub fn fused_len(&self) -> usize {
        self.n_joints + self.level_sizes().iter().sum::<usize>()
    }

    /// `[M, N]` averaging matrix for `level` (0-based).
    pub fn pooling_matrix(&self, level: usize) -> Result<Tensor> {
        let lv = self.levels.get(level).ok_or_else(|| Error::Param(format!("pooling level {level} does not exist")))?;
        let n = self.n_joints;
        let mut p = Tensor::zeros(&[lv.groups.len(), n]);
        for (g, members) in lv.groups.iter().enumerate() {
            let w = 1.0 / members.len() as f64;
            for &j in members {
                p.data_mut()[g * n + j] = w;
            }
        }
        Ok(p)
    }

    /// Column labels of the fused sequence: joints, then each pooled node.
    pub fn fused_labels(&self, joint_names: &[String]) -> Vec<String> {
        let mut labels: Vec<String> = joint_names.iter().map(|n| format!("joint:{n}")).collect();
        for (li, level) in self.levels.iter().enumerate() {
            for g in 0..level.groups.len() {
                let name = level.names.get(g).cloned().unwrap_or_else(|| g.to_string());
                labels.push(format!("level{}:{name}", li + 1));
            }
        }
        labels
    }
}

/// A skeleton together with its pyramid pooling scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub graph: SkeletonGraph,
    pub scheme: PoolingScheme,
}

#[derive(Serialize, Deserialize)]
struct SkeletonAsset {
    name: String,
    #[serde(default)]
    version: u32,
    n_joints: usize,
    root: usize,
    names: Vec<String>,
    edges: Vec<[usize; 2]>,
    mirror: Vec<usize>,
    levels: Vec<PoolingLevel>,
}

impl Skeleton {
    pub fn from_json(text: &str) -> Result<Self> {
        let a: SkeletonAsset = serde_json::from_str(text)?;
        let graph = SkeletonGraph::new(a.name, a.n_joints, a.edges, a.root, a.mirror, a.names)?;
        let scheme = PoolingScheme::new(a.n_joints, a.levels)?;
        Ok(Self { graph, scheme })
    }

    pub fn to_json(&self) -> Result<String> {
        let g = &self.graph;
        let asset = SkeletonAsset {
            name: g.name.clone(),
            version: 1,
            n_joints: g.n_joints,
            root: g.root,
            names: g.names.clone(),
            edges: g.edges.clone(),
            mirror: g.mirror.clone(),
            levels: self.scheme.levels.clone(),
        };
        Ok(serde_json::to_string_pretty(&asset)?)
    }

    /// Canonical 16-joint layout (hip-rooted, no nose joint).
    pub fn h36m16() -> Self {
        Self::from_json(SKELETON16).expect("bundled 16-joint asset is valid")
    }

    /// 17-joint layout with the nose pooled into the head part.
    pub fn h36m17() -> Self {
        Self::from_json(SKELETON17).expect("bundled 17-joint asset is valid")
    }

    /// Looks up a bundled asset by name (`skeleton16` / `skeleton17`).
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "skeleton16" => Ok(Self::h36m16()),
            "skeleton17" => Ok(Self::h36m17()),
            other => Err(Error::Data(format!("unknown skeleton asset {other:?}"))),
        }
    }

    pub fn name(&self) -> &str {
        self.graph.name()
    }

    pub fn n_joints(&self) -> usize {
        self.graph.n_joints()
    }
}
