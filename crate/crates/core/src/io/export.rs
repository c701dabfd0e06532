//! JSON and DOT serialization of trees, masks and score maps.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tree::DependencyTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub weight: f64,
    pub depth: usize,
    pub subtree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
}

impl From<&DependencyTree> for TreeJson {
    fn from(t: &DependencyTree) -> Self {
        let nodes = (0..t.len())
            .map(|i| TreeNode {
                id: i,
                parent: t.parent[i],
                weight: t.weight[i],
                depth: t.depth[i],
                subtree: t.subtree[i],
            })
            .collect();
        TreeJson { nodes, root: t.root }
    }
}

impl TreeJson {
    /// Rebuilds the tree; depths are recomputed and must agree with the stored ones.
    pub fn to_tree(&self) -> Result<DependencyTree> {
        let mut nodes: Vec<&TreeNode> = self.nodes.iter().collect();
        nodes.sort_by_key(|n| n.id);
        if nodes.iter().enumerate().any(|(i, n)| n.id != i) {
            return Err(Error::Integrity("tree node ids must be 0..N without gaps".into()));
        }
        let mut t = DependencyTree::from_parents(
            nodes.iter().map(|n| n.parent).collect(),
            nodes.iter().map(|n| n.weight).collect(),
        )?;
        if t.root != self.root {
            return Err(Error::Integrity(format!("root field {} but node {} has no parent", self.root, t.root)));
        }
        if nodes.iter().any(|n| t.depth[n.id] != n.depth) {
            return Err(Error::Integrity("stored depths disagree with the parent links".into()));
        }
        t.subtree = nodes.iter().map(|n| n.subtree).collect();
        Ok(t)
    }
}

/// Graphviz digraph with parent → child edges labelled by weight.
pub fn tree_to_dot(t: &DependencyTree) -> String {
    let mut s = String::from("digraph dependency {\n  node [shape=circle];\n");
    for i in 0..t.len() {
        let _ = writeln!(s, "  {i} [label=\"{i}\\npart {}\"];", t.subtree[i]);
    }
    for (c, p) in t.parent.iter().enumerate() {
        if let Some(p) = p {
            let _ = writeln!(s, "  {p} -> {c} [label=\"{:.4}\"];", t.weight[c]);
        }
    }
    s.push_str("}\n");
    s
}

/// A square mask, entry `[j][i]` = mass from token `i` to token `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskJson {
    pub size: usize,
    pub rows: Vec<Vec<f64>>,
}

impl MaskJson {
    pub fn from_tensor<T: Scalar>(m: &Tensor<T>) -> Result<Self> {
        if m.rank() != 2 || m.rows() != m.cols() {
            return Err(Error::shape(format!("mask must be square, got {:?}", m.dims())));
        }
        let rows = (0..m.rows())
            .map(|i| m.row(i).iter().map(|v| v.to_f64_lossless()).collect())
            .collect();
        Ok(MaskJson { size: m.rows(), rows })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.rows.len() != self.size || self.rows.iter().any(|r| r.len() != self.size) {
            return Err(Error::shape(format!("mask rows do not form a {0}x{0} square", self.size)));
        }
        let flat: Vec<f64> = self.rows.concat();
        Tensor::from_f64([self.size, self.size], &flat)
    }
}

/// Per-cell saliency scores on a grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScoreGrid {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.width * self.height {
            return Err(Error::shape(format!(
                "{} scores for a {}x{} grid",
                self.values.len(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

pub fn to_json<V: Serialize>(v: &V) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

pub fn read_json<V: DeserializeOwned>(path: impl AsRef<Path>) -> Result<V> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}
