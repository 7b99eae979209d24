//! Structure-aware block identification.
//!
//! Walks the module tree depth-first with an explicit LIFO worklist and sorts
//! every visited child into a CNN list or a transformer list. The lists steer
//! which quantizer each part of the model receives.

use serde::{Deserialize, Serialize};

use crate::package::{join_path, LayerKind, ModelPackage, ModuleNode, PATH_SEP};

/// Name fragments that mark a module as part of a transformer block.
pub const TRANSFORMER_MARKERS: [&str; 3] = ["attn", "attention", "transformer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockClass {
    Cnn,
    Transformer,
}

/// Classification rule for a single child. Conv2d wins over every other test.
///
/// Name markers are matched case-insensitively against the node's own name,
/// not its full path, so layers nested in a `transformer_block` are only
/// listed when they are Linear or carry a marker themselves.
pub fn classify(kind: &LayerKind, name: &str) -> Option<BlockClass> {
    if *kind == LayerKind::Conv2d {
        return Some(BlockClass::Cnn);
    }
    if *kind == LayerKind::Linear || has_transformer_marker(name) {
        return Some(BlockClass::Transformer);
    }
    None
}

pub fn has_transformer_marker(name: &str) -> bool {
    let lower = name.to_lowercase();
    TRANSFORMER_MARKERS.iter().any(|m| lower.contains(m))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub cnn: Vec<String>,
    pub transformer: Vec<String>,
}

impl BlockPartition {
    /// True if `path` is a transformer entry or lies beneath one.
    pub fn under_transformer(&self, path: &str) -> bool {
        self.transformer
            .iter()
            .any(|t| is_same_or_descendant(path, t))
    }

    pub fn is_empty(&self) -> bool {
        self.cnn.is_empty() && self.transformer.is_empty()
    }
}

fn is_same_or_descendant(path: &str, ancestor: &str) -> bool {
    path == ancestor
        || (path.len() > ancestor.len()
            && path.starts_with(ancestor)
            && path[ancestor.len()..].starts_with(PATH_SEP))
}

/// Partition plus the number of worklist pops it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Traversal {
    pub partition: BlockPartition,
    pub visits: usize,
}

pub fn traverse(root: &ModuleNode) -> Traversal {
    let mut partition = BlockPartition::default();
    let mut visits = 0;
    let mut worklist: Vec<(&ModuleNode, String)> = vec![(root, root.name.clone())];
    while let Some((module, parent_path)) = worklist.pop() {
        visits += 1;
        for child in &module.children {
            let path = join_path(&parent_path, &child.name);
            match classify(&child.kind, &child.name) {
                Some(BlockClass::Cnn) => partition.cnn.push(path.clone()),
                Some(BlockClass::Transformer) => partition.transformer.push(path.clone()),
                None => {}
            }
            worklist.push((child, path));
        }
    }
    Traversal { partition, visits }
}

pub fn identify_tree(root: &ModuleNode) -> BlockPartition {
    traverse(root).partition
}

pub fn identify_blocks(pkg: &ModelPackage) -> BlockPartition {
    identify_tree(pkg.root())
}

pub fn visit_count(pkg: &ModelPackage) -> usize {
    traverse(pkg.root()).visits
}

/// Full paths of Softmax nodes at or beneath a transformer entry, in
/// pre-order.
pub fn softmax_sites(root: &ModuleNode, partition: &BlockPartition) -> Vec<String> {
    root.walk()
        .into_iter()
        .filter(|(path, n)| n.kind == LayerKind::Softmax && partition.under_transformer(path))
        .map(|(path, _)| path)
        .collect()
}
