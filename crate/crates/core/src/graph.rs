//! Joint hierarchies and the three adjacency subsets used by the graph
//! convolution: physical bones, self loops, and fully connected edges
//! between adjacent hierarchy levels.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::DenseArray;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid hierarchy: {0}")]
    Hierarchy(String),
    #[error("hierarchy file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// A rooted tree over the skeleton joints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointHierarchy {
    parents: Vec<Option<usize>>,
    levels: Vec<usize>,
    names: Vec<String>,
}

impl JointHierarchy {
    /// Validates parent links (exactly one root, no cycles) and derives levels.
    pub fn from_parents(parents: Vec<Option<usize>>) -> Result<Self, GraphError> {
        let names = (0..parents.len()).map(|i| format!("joint{i}")).collect();
        Self::with_names(parents, names)
    }

    pub fn with_names(parents: Vec<Option<usize>>, names: Vec<String>) -> Result<Self, GraphError> {
        let v = parents.len();
        if v == 0 {
            return Err(GraphError::Hierarchy("no joints".into()));
        }
        if names.len() != v {
            return Err(GraphError::Hierarchy(format!(
                "{} names for {v} joints",
                names.len()
            )));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(GraphError::Hierarchy(format!(
                "expected exactly one root, found {roots}"
            )));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= v {
                    return Err(GraphError::Hierarchy(format!(
                        "joint {i} has out-of-range parent {p}"
                    )));
                }
                if p == i {
                    return Err(GraphError::Hierarchy(format!("joint {i} is its own parent")));
                }
            }
        }
        let mut levels = vec![usize::MAX; v];
        for start in 0..v {
            // Walk up to a joint whose level is known (or the root).
            let mut chain = vec![start];
            let mut cur = start;
            loop {
                if levels[cur] != usize::MAX {
                    break;
                }
                match parents[cur] {
                    None => {
                        levels[cur] = 0;
                        break;
                    }
                    Some(p) => {
                        if chain.contains(&p) {
                            return Err(GraphError::Hierarchy(format!(
                                "cycle through joint {p}"
                            )));
                        }
                        chain.push(p);
                        cur = p;
                    }
                }
            }
            let mut level = levels[cur];
            for &j in chain.iter().rev() {
                if levels[j] == usize::MAX {
                    level += 1;
                    levels[j] = level;
                } else {
                    level = levels[j];
                }
            }
        }
        Ok(Self {
            parents,
            levels,
            names,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn level(&self, joint: usize) -> usize {
        self.levels[joint]
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(|p| p.is_none()).expect("validated root")
    }

    /// 25-joint NTU RGB+D layout rooted at the base of the spine.
    pub fn ntu25() -> Self {
        const PARENTS: [i32; 25] = [
            -1, 0, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 1, 22, 7, 24,
            11,
        ];
        const NAMES: [&str; 25] = [
            "spine_base",
            "spine_mid",
            "neck",
            "head",
            "shoulder_left",
            "elbow_left",
            "wrist_left",
            "hand_left",
            "shoulder_right",
            "elbow_right",
            "wrist_right",
            "hand_right",
            "hip_left",
            "knee_left",
            "ankle_left",
            "foot_left",
            "hip_right",
            "knee_right",
            "ankle_right",
            "foot_right",
            "spine_shoulder",
            "hand_tip_left",
            "thumb_left",
            "hand_tip_right",
            "thumb_right",
        ];
        let parents = PARENTS
            .iter()
            .map(|&p| usize::try_from(p).ok())
            .collect();
        Self::with_names(parents, NAMES.iter().map(|s| s.to_string()).collect())
            .expect("built-in hierarchy is valid")
    }

    /// Small 11-joint body used for synthetic desk-scale data.
    pub fn toy11() -> Self {
        const PARENTS: [i32; 11] = [-1, 0, 1, 1, 3, 1, 5, 0, 7, 0, 9];
        const NAMES: [&str; 11] = [
            "pelvis",
            "spine",
            "head",
            "shoulder_left",
            "hand_left",
            "shoulder_right",
            "hand_right",
            "hip_left",
            "foot_left",
            "hip_right",
            "foot_right",
        ];
        let parents = PARENTS
            .iter()
            .map(|&p| usize::try_from(p).ok())
            .collect();
        Self::with_names(parents, NAMES.iter().map(|s| s.to_string()).collect())
            .expect("built-in hierarchy is valid")
    }

    /// Parses `<joint_index> <parent_index|-1> [name]` lines. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut entries: Vec<(usize, Option<usize>, Option<String>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| GraphError::Parse {
                line: lineno + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let idx: usize = fields
                .next()
                .ok_or_else(|| err("missing joint index".into()))?
                .parse()
                .map_err(|e| err(format!("bad joint index: {e}")))?;
            let parent: i64 = fields
                .next()
                .ok_or_else(|| err("missing parent index".into()))?
                .parse()
                .map_err(|e| err(format!("bad parent index: {e}")))?;
            let parent = match parent {
                -1 => None,
                p if p >= 0 => Some(p as usize),
                p => return Err(err(format!("parent index {p} is negative"))),
            };
            let name = fields.next().map(str::to_string);
            if let Some(extra) = fields.next() {
                return Err(err(format!("unexpected trailing field `{extra}`")));
            }
            if entries.iter().any(|e| e.0 == idx) {
                return Err(err(format!("duplicate joint index {idx}")));
            }
            entries.push((idx, parent, name));
        }
        let v = entries.len();
        let mut parents = vec![None; v];
        let mut names = vec![String::new(); v];
        let mut seen = vec![false; v];
        for (idx, parent, name) in entries {
            if idx >= v {
                return Err(GraphError::Hierarchy(format!(
                    "joint index {idx} outside 0..{v}"
                )));
            }
            seen[idx] = true;
            parents[idx] = parent;
            names[idx] = name.unwrap_or_else(|| format!("joint{idx}"));
        }
        debug_assert!(seen.iter().all(|&s| s));
        Self::with_names(parents, names)
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (p, name)) in self.parents.iter().zip(&self.names).enumerate() {
            let p = p.map_or(-1, |p| p as i64);
            writeln!(out, "{i} {p} {name}").expect("write to string");
        }
        out
    }
}

/// Binary adjacency with `A[i][j] = 1` iff one joint is the other's parent.
pub fn build_physical(h: &JointHierarchy) -> DenseArray {
    let v = h.joint_count();
    let mut a = DenseArray::zeros(&[v, v]);
    for (i, p) in h.parents().iter().enumerate() {
        if let Some(p) = *p {
            a.data_mut()[i * v + p] = 1.0;
            a.data_mut()[p * v + i] = 1.0;
        }
    }
    a
}

pub fn build_self_loop(v: usize) -> DenseArray {
    let mut a = DenseArray::zeros(&[v, v]);
    for i in 0..v {
        a.data_mut()[i * v + i] = 1.0;
    }
    a
}

/// Connects every pair of joints whose hierarchy levels differ by one.
pub fn build_hierarchical_fc(h: &JointHierarchy) -> DenseArray {
    let v = h.joint_count();
    let mut a = DenseArray::zeros(&[v, v]);
    for i in 0..v {
        for j in 0..v {
            if h.level(i).abs_diff(h.level(j)) == 1 {
                a.data_mut()[i * v + j] = 1.0;
            }
        }
    }
    a
}

/// Symmetric normalization `D^{-1/2} A D^{-1/2}`; zero-degree rows stay zero.
pub fn normalize(adjacency: &DenseArray) -> Result<DenseArray, GraphError> {
    let s = adjacency.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(GraphError::Argument(format!(
            "adjacency must be square, got {s:?}"
        )));
    }
    let v = s[0];
    let a = adjacency.data();
    for i in 0..v {
        for j in (i + 1)..v {
            if a[i * v + j] != a[j * v + i] {
                return Err(GraphError::Argument(format!(
                    "adjacency is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let degree: Vec<f64> = (0..v).map(|i| a[i * v..(i + 1) * v].iter().sum()).collect();
    let mut out = DenseArray::zeros(&[v, v]);
    for i in 0..v {
        for j in 0..v {
            let x = a[i * v + j];
            if x != 0.0 {
                out.data_mut()[i * v + j] = x / (degree[i] * degree[j]).sqrt();
            }
        }
    }
    Ok(out)
}

/// Graph subset identifiers, in the order the convolution sums them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    Physical,
    SelfLoop,
    HierarchicalFc,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Physical, Subset::SelfLoop, Subset::HierarchicalFc];

    pub fn tag(self) -> &'static str {
        match self {
            Subset::Physical => "pc",
            Subset::SelfLoop => "sl",
            Subset::HierarchicalFc => "fc",
        }
    }
}

/// Raw and normalized adjacency for all three subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    joint_count: usize,
    raw: [DenseArray; 3],
    normalized: [DenseArray; 3],
}

impl GraphTopology {
    pub fn from_hierarchy(h: &JointHierarchy) -> Self {
        let raw = [
            build_physical(h),
            build_self_loop(h.joint_count()),
            build_hierarchical_fc(h),
        ];
        let normalized = [
            normalize(&raw[0]).expect("symmetric by construction"),
            normalize(&raw[1]).expect("symmetric by construction"),
            normalize(&raw[2]).expect("symmetric by construction"),
        ];
        Self {
            joint_count: h.joint_count(),
            raw,
            normalized,
        }
    }

    /// Builds a topology from explicit normalized matrices (testing and
    /// degenerate single-subset configurations).
    pub fn from_normalized(normalized: [DenseArray; 3]) -> Result<Self, GraphError> {
        let v = normalized[0].shape().first().copied().unwrap_or(0);
        if normalized.iter().any(|m| m.shape() != [v, v]) {
            return Err(GraphError::Argument("subsets must share a V x V shape".into()));
        }
        let raw = normalized.clone().map(|m| {
            let data = m.data().iter().map(|&x| f64::from(u8::from(x != 0.0))).collect();
            DenseArray::new(vec![v, v], data).expect("same shape")
        });
        Ok(Self {
            joint_count: v,
            raw,
            normalized,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn raw(&self, subset: Subset) -> &DenseArray {
        &self.raw[subset as usize]
    }

    pub fn normalized(&self, subset: Subset) -> &DenseArray {
        &self.normalized[subset as usize]
    }
}
