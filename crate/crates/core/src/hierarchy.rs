//! Dialect taxonomy, per-parent-node classifier training and top-down
//! classification.
//!
//! Each internal node owns one classifier choosing among its children, trained
//! on every utterance whose dialect descends from that node, with its own
//! ANOVA-ranked feature subset.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuralnet::{self, init_mlp, Mlp, Mode, NnError, TrainConfig, MODEL_FORMAT_VERSION};
use crate::par;
use crate::prosody::{Feature, FeatureVector, FEATURE_COUNT};
use crate::stats::{rank_features, StatsError};
use crate::table::FeatureRow;

/// Feature count for nodes that do not set one.
pub const DEFAULT_K: usize = 7;

const DEFAULT_HIERARCHY: &str = include_str!("../data/default_hierarchy.json");

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("CycleDetected: {0}")]
    CycleDetected(String),
    #[error("DuplicateLabel: {0}")]
    DuplicateLabel(String),
    #[error("UnaryNode: `{0}` has a single child")]
    UnaryNode(String),
    #[error("Disconnected: `{0}` is not reachable from the root")]
    Disconnected(String),
    #[error("UnknownRoot: `{0}`")]
    UnknownRoot(String),
    #[error("InvalidLevel: {0}")]
    InvalidLevel(String),
    #[error("InvalidK: node `{node}` sets k = {k}, expected 1..=14")]
    InvalidK { node: String, k: usize },
    #[error("UnknownLabel: `{0}` is not a leaf of the hierarchy")]
    UnknownLabel(String),
    #[error("EmptyDataset")]
    EmptyDataset,
    #[error("UntrainedModel: {0}")]
    UntrainedModel(String),
    #[error("non-finite feature vector")]
    NonFiniteInput,
    #[error("feature selection at node `{node}`: {source}")]
    Selection { node: String, source: StatsError },
    #[error("training node `{node}`: {source}")]
    Training { node: String, source: NnError },
    #[error("MissingFile: {0}")]
    MissingFile(String),
    #[error("malformed hierarchy: {0}")]
    Parse(String),
    #[error("bad model bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HierarchyError>;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
struct Node {
    label: String,
    children: Vec<NodeId>,
    parent: Option<NodeId>,
    k: Option<usize>,
    level: usize,
}

/// A validated, rooted taxonomy: unique labels, no cycles, every internal
/// node has at least two children.
#[derive(Debug, Clone, PartialEq)]
pub struct DialectTree {
    nodes: Vec<Node>,
    root: NodeId,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    root: String,
    nodes: Vec<NodeEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeEntry {
    label: String,
    #[serde(default)]
    children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<usize>,
}

impl DialectTree {
    /// Parses the JSON hierarchy document. Children that have no entry of
    /// their own are leaves; `level` defaults to the parent's level + 1.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: TreeFile = serde_json::from_str(text).map_err(|e| HierarchyError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    fn from_file(file: TreeFile) -> Result<Self> {
        let mut index: HashMap<String, NodeId> = HashMap::new();
        let mut nodes: Vec<Node> = Vec::new();
        let mut levels: Vec<Option<usize>> = Vec::new();
        for entry in &file.nodes {
            if index.insert(entry.label.clone(), nodes.len()).is_some() {
                return Err(HierarchyError::DuplicateLabel(entry.label.clone()));
            }
            if let Some(k) = entry.k {
                if !(1..=FEATURE_COUNT).contains(&k) {
                    return Err(HierarchyError::InvalidK {
                        node: entry.label.clone(),
                        k,
                    });
                }
            }
            nodes.push(Node {
                label: entry.label.clone(),
                children: Vec::new(),
                parent: None,
                k: entry.k,
                level: 0,
            });
            levels.push(entry.level);
        }
        for (id, entry) in file.nodes.iter().enumerate() {
            for child in &entry.children {
                let cid = match index.get(child) {
                    Some(&c) => c,
                    None => {
                        index.insert(child.clone(), nodes.len());
                        nodes.push(Node {
                            label: child.clone(),
                            children: Vec::new(),
                            parent: None,
                            k: None,
                            level: 0,
                        });
                        levels.push(None);
                        nodes.len() - 1
                    }
                };
                if cid == id {
                    return Err(HierarchyError::CycleDetected(format!("`{child}` is its own child")));
                }
                if nodes[id].children.contains(&cid) {
                    return Err(HierarchyError::DuplicateLabel(format!("`{child}` listed twice under `{}`", entry.label)));
                }
                if let Some(p) = nodes[cid].parent {
                    return Err(HierarchyError::DuplicateLabel(format!(
                        "`{child}` appears under both `{}` and `{}`",
                        nodes[p].label, entry.label
                    )));
                }
                nodes[cid].parent = Some(id);
                nodes[id].children.push(cid);
            }
        }
        let root = *index
            .get(&file.root)
            .ok_or_else(|| HierarchyError::UnknownRoot(file.root.clone()))?;
        if let Some(p) = nodes[root].parent {
            return Err(HierarchyError::CycleDetected(format!(
                "root `{}` is a child of `{}`",
                file.root, nodes[p].label
            )));
        }

        // reachability and levels in one preorder walk
        let mut reached = vec![false; nodes.len()];
        let mut stack = vec![root];
        nodes[root].level = levels[root].unwrap_or(0);
        while let Some(id) = stack.pop() {
            reached[id] = true;
            let level = nodes[id].level;
            for &c in nodes[id].children.clone().iter().rev() {
                let lc = levels[c].unwrap_or(level + 1);
                if lc <= level {
                    return Err(HierarchyError::InvalidLevel(format!(
                        "`{}` has level {lc}, not above its parent `{}` at {level}",
                        nodes[c].label, nodes[id].label
                    )));
                }
                nodes[c].level = lc;
                stack.push(c);
            }
        }
        if let Some(lost) = (0..nodes.len()).find(|&i| !reached[i]) {
            // an unreachable node either sits on a parent cycle or hangs loose
            let mut seen = vec![false; nodes.len()];
            let mut cur = Some(lost);
            while let Some(c) = cur {
                if seen[c] {
                    return Err(HierarchyError::CycleDetected(format!("cycle through `{}`", nodes[c].label)));
                }
                seen[c] = true;
                cur = nodes[c].parent;
            }
            return Err(HierarchyError::Disconnected(nodes[lost].label.clone()));
        }
        // renumber in preorder so equal trees compare equal
        let raw = DialectTree { nodes, root };
        let tree = raw.rebuild(root, &|_| true, |id| raw.nodes[id].k);
        tree.check_arity()?;
        Ok(tree)
    }

    fn check_arity(&self) -> Result<()> {
        for id in self.preorder() {
            if self.nodes[id].children.len() == 1 {
                return Err(HierarchyError::UnaryNode(self.nodes[id].label.clone()));
            }
        }
        Ok(())
    }

    /// The bundled taxonomy of Algerian Arabic dialects.
    pub fn default_tree() -> Self {
        Self::from_json_str(DEFAULT_HIERARCHY).expect("bundled hierarchy is valid")
    }

    pub fn default_json() -> &'static str {
        DEFAULT_HIERARCHY
    }

    /// Keeps only nodes with `level ≤ max_level`; nodes losing all children
    /// become leaves. Fails if a node is left with a single child.
    pub fn limit_depth(&self, max_level: usize) -> Result<Self> {
        let keep = |id: NodeId| self.nodes[id].level <= max_level;
        if !keep(self.root) {
            return Err(HierarchyError::InvalidLevel(format!(
                "depth limit {max_level} removes the root"
            )));
        }
        let tree = self.rebuild(self.root, &keep, |id| self.nodes[id].k);
        tree.check_arity()?;
        Ok(tree)
    }

    /// Copy of the subtree rooted at `label`.
    pub fn subtree(&self, label: &str) -> Result<Self> {
        let id = self.find(label).ok_or_else(|| HierarchyError::UnknownLabel(label.to_string()))?;
        Ok(self.rebuild(id, &|_| true, |n| self.nodes[n].k))
    }

    /// Root directly above every leaf, for single-classifier baselines.
    pub fn flattened(&self, k: usize) -> Self {
        let root = Node {
            label: self.label(self.root).to_string(),
            children: (1..=self.leaves().len()).collect(),
            parent: None,
            k: Some(k),
            level: 0,
        };
        let mut nodes = vec![root];
        for leaf in self.leaves() {
            nodes.push(Node {
                label: self.label(leaf).to_string(),
                children: Vec::new(),
                parent: Some(0),
                k: None,
                level: 1,
            });
        }
        DialectTree { nodes, root: 0 }
    }

    fn rebuild(&self, from: NodeId, keep: &dyn Fn(NodeId) -> bool, k_of: impl Fn(NodeId) -> Option<usize>) -> Self {
        let mut nodes: Vec<Node> = Vec::new();
        let mut map: HashMap<NodeId, NodeId> = HashMap::new();
        for id in self.preorder_from(from) {
            if !keep(id) || (id != from && !map.contains_key(&self.nodes[id].parent.expect("non-root"))) {
                continue;
            }
            let new_id = nodes.len();
            map.insert(id, new_id);
            let parent = if id == from {
                None
            } else {
                self.nodes[id].parent.map(|p| map[&p])
            };
            if let Some(p) = parent {
                nodes[p].children.push(new_id);
            }
            nodes.push(Node {
                label: self.nodes[id].label.clone(),
                children: Vec::new(),
                parent,
                k: k_of(id),
                level: self.nodes[id].level,
            });
        }
        DialectTree { nodes, root: 0 }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id].label
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    pub fn level(&self, id: NodeId) -> usize {
        self.nodes[id].level
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].children.is_empty()
    }

    /// Configured feature count for an internal node.
    pub fn k(&self, id: NodeId) -> usize {
        self.nodes[id].k.unwrap_or(DEFAULT_K)
    }

    /// Overrides the feature count of the internal node `label`.
    pub fn with_k(mut self, label: &str, k: usize) -> Result<Self> {
        let id = self.find(label).ok_or_else(|| HierarchyError::UnknownLabel(label.to_string()))?;
        if !(1..=FEATURE_COUNT).contains(&k) || self.is_leaf(id) {
            return Err(HierarchyError::InvalidK {
                node: label.to_string(),
                k,
            });
        }
        self.nodes[id].k = Some(k);
        Ok(self)
    }

    pub fn find(&self, label: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.label == label)
    }

    pub fn find_leaf(&self, label: &str) -> Option<NodeId> {
        self.find(label).filter(|&id| self.is_leaf(id))
    }

    pub fn preorder(&self) -> Vec<NodeId> {
        self.preorder_from(self.root)
    }

    fn preorder_from(&self, from: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![from];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id].children.iter().rev());
        }
        out
    }

    /// Leaves in declaration (preorder) order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder().into_iter().filter(|&id| self.is_leaf(id)).collect()
    }

    pub fn leaf_labels(&self) -> Vec<String> {
        self.leaves().into_iter().map(|id| self.label(id).to_string()).collect()
    }

    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.preorder().into_iter().filter(|&id| !self.is_leaf(id)).collect()
    }

    /// Node ids from the root down to `id`, both included.
    pub fn path_to(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn path_labels(&self, id: NodeId) -> Vec<String> {
        self.path_to(id).into_iter().map(|n| self.label(n).to_string()).collect()
    }

    /// The root child above `id` (`None` for the root itself).
    pub fn top_branch(&self, id: NodeId) -> Option<NodeId> {
        self.path_to(id).get(1).copied()
    }

    /// Index of the child of `ancestor` on the way to `id`.
    pub fn branch_toward(&self, ancestor: NodeId, id: NodeId) -> Option<usize> {
        let path = self.path_to(id);
        let pos = path.iter().position(|&n| n == ancestor)?;
        let next = *path.get(pos + 1)?;
        self.nodes[ancestor].children.iter().position(|&c| c == next)
    }

    pub fn to_json(&self) -> String {
        let nodes = self
            .preorder()
            .into_iter()
            .map(|id| NodeEntry {
                label: self.nodes[id].label.clone(),
                children: self.nodes[id].children.iter().map(|&c| self.nodes[c].label.clone()).collect(),
                k: self.nodes[id].k,
                level: Some(self.nodes[id].level),
            })
            .collect();
        let file = TreeFile {
            root: self.label(self.root).to_string(),
            nodes,
        };
        serde_json::to_string_pretty(&file).expect("plain data serializes")
    }
}

/// Reads a hierarchy file and applies an optional depth limit.
pub fn load_hierarchy(path: impl AsRef<Path>, depth_limit: Option<usize>) -> Result<DialectTree> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| HierarchyError::MissingFile(path.display().to_string()))?;
    apply_limit(DialectTree::from_json_str(&text)?, depth_limit)
}

pub fn apply_limit(tree: DialectTree, depth_limit: Option<usize>) -> Result<DialectTree> {
    match depth_limit {
        Some(l) => tree.limit_depth(l),
        None => Ok(tree),
    }
}

/// Classifier topology and training settings shared by every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcpnConfig {
    pub hidden_layers: Vec<usize>,
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for LcpnConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![560; 4],
            dropout: 0.5,
            train: TrainConfig::default(),
        }
    }
}

/// One trained parent-node classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeClassifier {
    pub features: Vec<Feature>,
    pub f_stats: Vec<f64>,
    pub mlp: Mlp,
    pub training_accuracy: f64,
    pub epochs_run: usize,
    pub examples: usize,
}

/// What an internal node does at classification time.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeRule {
    Classifier(Box<NodeClassifier>),
    /// Training data covered fewer than two branches; always take this child.
    PassThrough(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HadidModel {
    pub tree: DialectTree,
    /// Keyed by internal node id.
    pub rules: BTreeMap<NodeId, NodeRule>,
    pub seed: u64,
    pub fold: Option<usize>,
}

/// A node's seed depends on its label only, so it survives re-indexing.
pub fn node_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trains one classifier per internal node.
pub fn train_lcpn(tree: &DialectTree, rows: &[FeatureRow], cfg: &LcpnConfig, seed: u64) -> Result<HadidModel> {
    if rows.is_empty() {
        return Err(HierarchyError::EmptyDataset);
    }
    let mut leaf_of = Vec::with_capacity(rows.len());
    for r in rows {
        leaf_of.push(tree.find_leaf(&r.dialect).ok_or_else(|| HierarchyError::UnknownLabel(r.dialect.clone()))?);
    }
    let internal = tree.internal_nodes();
    let trained = par::map(&internal, |&node| train_node(tree, node, rows, &leaf_of, cfg, seed));
    let mut rules = BTreeMap::new();
    for (node, rule) in internal.into_iter().zip(trained) {
        rules.insert(node, rule?);
    }
    Ok(HadidModel {
        tree: tree.clone(),
        rules,
        seed,
        fold: None,
    })
}

fn train_node(
    tree: &DialectTree,
    node: NodeId,
    rows: &[FeatureRow],
    leaf_of: &[NodeId],
    cfg: &LcpnConfig,
    seed: u64,
) -> Result<NodeRule> {
    let label = tree.label(node);
    let mut vectors: Vec<FeatureVector> = Vec::new();
    let mut branches: Vec<usize> = Vec::new();
    for (r, &leaf) in rows.iter().zip(leaf_of) {
        if let Some(b) = tree.branch_toward(node, leaf) {
            vectors.push(r.features);
            branches.push(b);
        }
    }
    let mut present = branches.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        let forced = present.first().copied().unwrap_or(0);
        log::warn!(
            "node `{label}`: training data covers {} branch(es); passing through to `{}`",
            present.len(),
            tree.label(tree.children(node)[forced])
        );
        return Ok(NodeRule::PassThrough(forced));
    }

    let branch_names: Vec<String> = branches.iter().map(|b| b.to_string()).collect();
    let ranked = rank_features(&vectors, &branch_names, tree.k(node)).map_err(|source| HierarchyError::Selection {
        node: label.to_string(),
        source,
    })?;
    let features: Vec<Feature> = ranked.iter().map(|r| r.feature).collect();
    let xs: Vec<Vec<f64>> = vectors.iter().map(|v| v.select(&features)).collect();

    let mut sizes = vec![features.len()];
    sizes.extend(&cfg.hidden_layers);
    sizes.push(tree.children(node).len());
    let wrap = |source| HierarchyError::Training {
        node: label.to_string(),
        source,
    };
    let mlp = init_mlp(&sizes, cfg.dropout, node_seed(seed, label)).map_err(wrap)?;
    let (mlp, history) = neuralnet::train(mlp, &xs, &branches, &cfg.train).map_err(wrap)?;
    let training_accuracy = mlp.accuracy(&xs, &branches).map_err(wrap)?;
    log::info!(
        "node `{label}`: {} examples, features [{}], {} epochs, training accuracy {:.3}",
        xs.len(),
        features.iter().map(|f| f.name()).collect::<Vec<_>>().join(", "),
        history.epochs_run(),
        training_accuracy
    );
    Ok(NodeRule::Classifier(Box::new(NodeClassifier {
        f_stats: ranked.iter().map(|r| r.f_stat).collect(),
        features,
        mlp,
        training_accuracy,
        epochs_run: history.epochs_run(),
        examples: xs.len(),
    })))
}

/// One node's decision during descent.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecision {
    pub node: String,
    /// Child labels with their probabilities, in declaration order.
    pub probabilities: Vec<(String, f64)>,
    pub chosen: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub leaf: String,
    /// Root-to-leaf labels, root included.
    pub path: Vec<String>,
    /// Decisions of trained nodes only; pass-through nodes leave no record.
    pub decisions: Vec<NodeDecision>,
}

impl HadidModel {
    pub fn classifier_count(&self) -> usize {
        self.rules.values().filter(|r| matches!(r, NodeRule::Classifier(_))).count()
    }

    pub fn classifier(&self, label: &str) -> Option<&NodeClassifier> {
        match self.rules.get(&self.tree.find(label)?)? {
            NodeRule::Classifier(c) => Some(c),
            NodeRule::PassThrough(_) => None,
        }
    }

    /// Greedy descent from the root; ties go to the first-declared child.
    pub fn classify(&self, x: &FeatureVector) -> Result<Classification> {
        if !x.is_finite() {
            return Err(HierarchyError::NonFiniteInput);
        }
        if self.classifier_count() == 0 {
            return Err(HierarchyError::UntrainedModel("no node classifier".into()));
        }
        let tree = &self.tree;
        let mut node = tree.root();
        let mut decisions = Vec::new();
        while !tree.is_leaf(node) {
            let children = tree.children(node);
            let branch = match self.rules.get(&node) {
                Some(NodeRule::PassThrough(b)) => *b,
                Some(NodeRule::Classifier(c)) => {
                    let p = c
                        .mlp
                        .forward(&x.select(&c.features), Mode::Infer)
                        .map_err(|e| HierarchyError::UntrainedModel(e.to_string()))?;
                    let mut best = 0;
                    for (i, &v) in p.iter().enumerate() {
                        if v > p[best] {
                            best = i;
                        }
                    }
                    decisions.push(NodeDecision {
                        node: tree.label(node).to_string(),
                        probabilities: children.iter().map(|&ch| tree.label(ch).to_string()).zip(p).collect(),
                        chosen: tree.label(children[best]).to_string(),
                    });
                    best
                }
                None => {
                    return Err(HierarchyError::UntrainedModel(format!(
                        "node `{}` has no classifier",
                        tree.label(node)
                    )))
                }
            };
            node = children[branch];
        }
        Ok(Classification {
            leaf: tree.label(node).to_string(),
            path: tree.path_labels(node),
            decisions,
        })
    }

    /// The part of the model below `label`, as a model of its own.
    pub fn restrict(&self, label: &str) -> Result<HadidModel> {
        let sub = self.tree.subtree(label)?;
        let mut rules = BTreeMap::new();
        for id in sub.internal_nodes() {
            let original = self.tree.find(sub.label(id)).expect("subtree labels exist");
            if let Some(rule) = self.rules.get(&original) {
                rules.insert(id, rule.clone());
            }
        }
        Ok(HadidModel {
            tree: sub,
            rules,
            seed: self.seed,
            fold: self.fold,
        })
    }

    /// Writes `hierarchy.json`, `manifest.json` and one `node_<i>.json` per classifier.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("hierarchy.json"), self.tree.to_json())?;
        let mut entries = Vec::new();
        for (i, (&node, rule)) in self.rules.iter().enumerate() {
            let label = self.tree.label(node).to_string();
            entries.push(match rule {
                NodeRule::Classifier(c) => {
                    let file = format!("node_{i}.json");
                    c.mlp
                        .save(dir.join(&file))
                        .map_err(|e| HierarchyError::Bundle(e.to_string()))?;
                    ManifestNode {
                        node: label,
                        model_file: Some(file),
                        features: c.features.clone(),
                        f_stats: c.f_stats.clone(),
                        training_accuracy: Some(c.training_accuracy),
                        epochs_run: Some(c.epochs_run),
                        examples: Some(c.examples),
                        pass_through: None,
                    }
                }
                NodeRule::PassThrough(b) => ManifestNode {
                    node: label,
                    model_file: None,
                    features: Vec::new(),
                    f_stats: Vec::new(),
                    training_accuracy: None,
                    epochs_run: None,
                    examples: None,
                    pass_through: Some(self.tree.label(self.tree.children(node)[*b]).to_string()),
                },
            });
        }
        let manifest = BundleManifest {
            format_version: MODEL_FORMAT_VERSION,
            seed: self.seed,
            fold: self.fold,
            nodes: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("plain data serializes");
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<HadidModel> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            fs::read_to_string(dir.join(name)).map_err(|_| HierarchyError::MissingFile(dir.join(name).display().to_string()))
        };
        let tree = DialectTree::from_json_str(&read("hierarchy.json")?)?;
        let manifest: BundleManifest =
            serde_json::from_str(&read("manifest.json")?).map_err(|e| HierarchyError::Bundle(format!("manifest: {e}")))?;
        if manifest.format_version != MODEL_FORMAT_VERSION {
            return Err(HierarchyError::Bundle(format!(
                "format version {} (expected {MODEL_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let mut rules = BTreeMap::new();
        for entry in manifest.nodes {
            let node = tree
                .find(&entry.node)
                .filter(|&n| !tree.is_leaf(n))
                .ok_or_else(|| HierarchyError::Bundle(format!("`{}` is not an internal node", entry.node)))?;
            let children = tree.children(node);
            let rule = match (&entry.model_file, &entry.pass_through) {
                (Some(file), None) => {
                    let mlp = Mlp::load(dir.join(file)).map_err(|e| HierarchyError::Bundle(format!("{file}: {e}")))?;
                    if mlp.output_size() != children.len() || mlp.input_size() != entry.features.len() {
                        return Err(HierarchyError::Bundle(format!(
                            "{file}: shape {:?} does not fit node `{}`",
                            mlp.layer_sizes(),
                            entry.node
                        )));
                    }
                    NodeRule::Classifier(Box::new(NodeClassifier {
                        features: entry.features,
                        f_stats: entry.f_stats,
                        mlp,
                        training_accuracy: entry.training_accuracy.unwrap_or(f64::NAN),
                        epochs_run: entry.epochs_run.unwrap_or(0),
                        examples: entry.examples.unwrap_or(0),
                    }))
                }
                (None, Some(child)) => NodeRule::PassThrough(
                    children
                        .iter()
                        .position(|&c| tree.label(c) == child)
                        .ok_or_else(|| HierarchyError::Bundle(format!("`{child}` is not a child of `{}`", entry.node)))?,
                ),
                _ => {
                    return Err(HierarchyError::Bundle(format!(
                        "node `{}` needs exactly one of model_file and pass_through",
                        entry.node
                    )))
                }
            };
            rules.insert(node, rule);
        }
        Ok(HadidModel {
            tree,
            rules,
            seed: manifest.seed,
            fold: manifest.fold,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format_version: u32,
    seed: u64,
    fold: Option<usize>,
    nodes: Vec<ManifestNode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestNode {
    node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_file: Option<String>,
    #[serde(default)]
    features: Vec<Feature>,
    #[serde(default)]
    f_stats: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epochs_run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    examples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pass_through: Option<String>,
}
