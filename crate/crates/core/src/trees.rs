//! Binary classification trees and bagged forests.
//!
//! Two split rules share one tree grower: the impurity-driven rule used by
//! random forests, and the fully randomized rule of completely-random
//! forests. Both are registered by name and selected through [`ForestKind`].

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Features, SingleRow};
use crate::error::{DafError, Result};
use crate::registry::Registry;
use crate::seed;

pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ForestKind {
    Random,
    CompletelyRandom,
}

impl ForestKind {
    pub fn name(&self) -> &'static str {
        match self {
            ForestKind::Random => "random",
            ForestKind::CompletelyRandom => "completely_random",
        }
    }

    pub fn rule(&self) -> &'static dyn SplitRule {
        match self {
            ForestKind::Random => &GiniSplit,
            ForestKind::CompletelyRandom => &RandomSplit,
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            ForestKind::Random => 0,
            ForestKind::CompletelyRandom => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ForestKind::Random),
            1 => Some(ForestKind::CompletelyRandom),
            _ => None,
        }
    }
}

impl fmt::Display for ForestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForestKind {
    type Err = DafError;

    fn from_str(s: &str) -> Result<Self> {
        split_rules()
            .lookup(s)
            .map(|r| r.kind())
            .map_err(|e| DafError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features examined per impurity-driven node; `None` means `ceil(sqrt(d))`.
    pub candidate_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 64,
            min_samples_split: 2,
            candidate_features: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(DafError::Config("n_trees must be at least 1".into()));
        }
        if self.max_depth == 0 || self.min_samples_split == 0 {
            return Err(DafError::Config(
                "max_depth and min_samples_split must be positive".into(),
            ));
        }
        if self.candidate_features == Some(0) {
            return Err(DafError::Config("candidate_features must be positive".into()));
        }
        Ok(())
    }

    pub fn candidates_for(&self, dim: usize) -> usize {
        self.candidate_features
            .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
            .clamp(1, dim.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf { counts: [u32; CLASSES] },
}

/// Arena-allocated tree; `nodes[0]` is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(DafError::Format("tree without nodes".into()));
        }
        for n in &nodes {
            match *n {
                Node::Split { left, right, .. } => {
                    if left as usize >= nodes.len() || right as usize >= nodes.len() {
                        return Err(DafError::Format("tree child index out of range".into()));
                    }
                }
                Node::Leaf { counts } => {
                    if counts.iter().sum::<u32>() == 0 {
                        return Err(DafError::Format("empty leaf".into()));
                    }
                }
            }
        }
        Ok(Tree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(nodes, left as usize).max(go(nodes, right as usize))
                }
            }
        }
        go(&self.nodes, 0)
    }

    pub fn leaf_counts<F: Features + ?Sized>(&self, data: &F, row: usize) -> [u32; CLASSES] {
        let mut i = 0usize;
        // cycles are impossible for grown trees; loaded trees are bounded by
        // the node count
        for _ in 0..=self.nodes.len() {
            match self.nodes[i] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if data.value(row, feature as usize) < threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
        panic!("tree routing did not reach a leaf");
    }

    pub fn proba<F: Features + ?Sized>(&self, data: &F, row: usize) -> [f64; CLASSES] {
        let c = self.leaf_counts(data, row);
        let total = f64::from(c[0] + c[1]);
        [f64::from(c[0]) / total, f64::from(c[1]) / total]
    }
}

/// Chosen split at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Receives every split candidate evaluated while growing a tree.
pub trait SplitObserver {
    fn candidate(&mut self, node: usize, split: Split);
    fn chosen(&mut self, node: usize, split: Split);
}

/// Per-node state handed to a split rule.
pub struct NodeContext<'a> {
    pub id: usize,
    pub samples: &'a [usize],
    pub labels: &'a [u8],
    pub counts: [u32; CLASSES],
    pub candidate_features: usize,
    pub scratch: &'a mut Vec<f64>,
}

/// Strategy for choosing a node split.
pub trait SplitRule: Send + Sync {
    fn kind(&self) -> ForestKind;

    /// Returns a split leaving both sides nonempty, or `None` to make a leaf.
    fn choose(
        &self,
        data: &dyn Features,
        node: NodeContext<'_>,
        rng: &mut ChaCha8Rng,
        observer: Option<&mut dyn SplitObserver>,
    ) -> Option<Split>;
}

pub fn split_rules() -> Registry<dyn SplitRule> {
    let mut r: Registry<dyn SplitRule> = Registry::new("forest kind");
    r.register("random", Box::new(GiniSplit))
        .register("completely_random", Box::new(RandomSplit));
    r
}

pub fn gini(counts: [u32; CLASSES]) -> f64 {
    let n = f64::from(counts[0] + counts[1]);
    if n == 0.0 {
        return 0.0;
    }
    let p0 = f64::from(counts[0]) / n;
    let p1 = f64::from(counts[1]) / n;
    1.0 - p0 * p0 - p1 * p1
}

/// Impurity decrease of splitting `parent` into `left` and the remainder.
pub fn gini_gain(parent: [u32; CLASSES], left: [u32; CLASSES]) -> f64 {
    let right = [parent[0] - left[0], parent[1] - left[1]];
    let n = f64::from(parent[0] + parent[1]);
    let nl = f64::from(left[0] + left[1]);
    let nr = f64::from(right[0] + right[1]);
    gini(parent) - (nl / n) * gini(left) - (nr / n) * gini(right)
}

/// Best Gini split among a random subset of features, exact threshold search.
pub struct GiniSplit;

impl SplitRule for GiniSplit {
    fn kind(&self) -> ForestKind {
        ForestKind::Random
    }

    fn choose(
        &self,
        data: &dyn Features,
        node: NodeContext<'_>,
        rng: &mut ChaCha8Rng,
        mut observer: Option<&mut dyn SplitObserver>,
    ) -> Option<Split> {
        let dim = data.dim();
        let k = node.candidate_features.min(dim);
        let mut features = index::sample(rng, dim, k).into_vec();
        features.sort_unstable();
        let mut best: Option<Split> = None;
        let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(node.samples.len());
        for &f in &features {
            data.gather(f, node.samples, node.scratch);
            pairs.clear();
            pairs.extend(
                node.scratch
                    .iter()
                    .zip(node.samples)
                    .map(|(&v, &s)| (v, node.labels[s])),
            );
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0u32; CLASSES];
            for i in 0..pairs.len() - 1 {
                left[pairs[i].1 as usize] += 1;
                let (a, b) = (pairs[i].0, pairs[i + 1].0);
                if a == b {
                    continue;
                }
                let mid = a + (b - a) / 2.0;
                let threshold = if mid > a { mid } else { b };
                let split = Split {
                    feature: f,
                    threshold,
                    gain: gini_gain(node.counts, left),
                };
                if let Some(o) = reborrow(&mut observer) {
                    o.candidate(node.id, split);
                }
                // features and thresholds are visited in ascending order, so
                // keeping the first maximum realizes the tie-break
                if best.is_none_or(|b| split.gain > b.gain) {
                    best = Some(split);
                }
            }
        }
        if let (Some(o), Some(b)) = (observer, best) {
            o.chosen(node.id, b);
        }
        best
    }
}

/// Uniformly random feature and threshold inside the node's range.
pub struct RandomSplit;

impl SplitRule for RandomSplit {
    fn kind(&self) -> ForestKind {
        ForestKind::CompletelyRandom
    }

    fn choose(
        &self,
        data: &dyn Features,
        node: NodeContext<'_>,
        rng: &mut ChaCha8Rng,
        mut observer: Option<&mut dyn SplitObserver>,
    ) -> Option<Split> {
        let dim = data.dim();
        // try features in random order until one is not constant at the node
        let first = rng.random_range(0..dim);
        let mut rest: Option<Vec<usize>> = None;
        for tried in 0..dim {
            let f = if tried == 0 {
                first
            } else {
                let rest = rest.get_or_insert_with(|| {
                    index::sample(rng, dim, dim)
                        .into_iter()
                        .filter(|&g| g != first)
                        .collect()
                });
                rest[tried - 1]
            };
            data.gather(f, node.samples, node.scratch);
            let (lo, hi) = node
                .scratch
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if !(hi > lo) {
                continue;
            }
            let mut threshold = lo + rng.random::<f64>() * (hi - lo);
            if threshold <= lo {
                threshold = lo + (hi - lo) / 2.0;
                if threshold <= lo {
                    threshold = hi;
                }
            }
            let mut left = [0u32; CLASSES];
            for (&v, &s) in node.scratch.iter().zip(node.samples) {
                if v < threshold {
                    left[node.labels[s] as usize] += 1;
                }
            }
            let split = Split {
                feature: f,
                threshold,
                gain: gini_gain(node.counts, left),
            };
            if let Some(o) = reborrow(&mut observer) {
                o.candidate(node.id, split);
                o.chosen(node.id, split);
            }
            return Some(split);
        }
        None
    }
}

struct Grower<'a> {
    data: &'a dyn Features,
    labels: &'a [u8],
    rule: &'a dyn SplitRule,
    params: &'a ForestParams,
    candidates: usize,
    nodes: Vec<Node>,
    scratch: Vec<f64>,
}

impl Grower<'_> {
    fn grow(
        &mut self,
        samples: &mut [usize],
        depth: usize,
        rng: &mut ChaCha8Rng,
        observer: &mut Option<&mut dyn SplitObserver>,
    ) -> u32 {
        let mut counts = [0u32; CLASSES];
        for &s in samples.iter() {
            counts[self.labels[s] as usize] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { counts });
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || samples.len() < self.params.min_samples_split || depth >= self.params.max_depth
        {
            return id as u32;
        }
        let ctx = NodeContext {
            id,
            samples,
            labels: self.labels,
            counts,
            candidate_features: self.candidates,
            scratch: &mut self.scratch,
        };
        let Some(split) = self
            .rule
            .choose(self.data, ctx, rng, reborrow(observer))
        else {
            return id as u32;
        };
        // partition samples in place: left block first
        let mut mid = 0;
        for i in 0..samples.len() {
            if self.data.value(samples[i], split.feature) < split.threshold {
                samples.swap(i, mid);
                mid += 1;
            }
        }
        debug_assert!(mid > 0 && mid < samples.len());
        let (l, r) = samples.split_at_mut(mid);
        let left = self.grow(l, depth + 1, rng, observer);
        let right = self.grow(r, depth + 1, rng, observer);
        self.nodes[id] = Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left,
            right,
        };
        id as u32
    }
}

fn reborrow<'a>(o: &'a mut Option<&mut dyn SplitObserver>) -> Option<&'a mut dyn SplitObserver> {
    match o {
        Some(o) => Some(&mut **o),
        None => None,
    }
}

fn check_inputs(data: &dyn Features, labels: &[u8]) -> Result<()> {
    if data.n_rows() == 0 || labels.is_empty() {
        return Err(DafError::EmptyData);
    }
    if data.n_rows() != labels.len() {
        return Err(DafError::DimensionMismatch {
            expected: data.n_rows(),
            found: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(DafError::Config(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Grows one tree on the rows listed in `samples` (duplicates allowed).
pub fn grow_tree(
    data: &dyn Features,
    labels: &[u8],
    samples: &mut [usize],
    kind: ForestKind,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
    mut observer: Option<&mut dyn SplitObserver>,
) -> Result<Tree> {
    check_inputs(data, labels)?;
    if samples.is_empty() {
        return Err(DafError::EmptyData);
    }
    let mut g = Grower {
        data,
        labels,
        rule: kind.rule(),
        params,
        candidates: params.candidates_for(data.dim()),
        nodes: Vec::new(),
        scratch: Vec::with_capacity(samples.len()),
    };
    g.grow(samples, 0, rng, &mut observer);
    Ok(Tree { nodes: g.nodes })
}

/// Fits a single tree on all rows, without resampling.
pub fn fit_tree(
    data: &dyn Features,
    labels: &[u8],
    kind: ForestKind,
    params: &ForestParams,
    rng_seed: u64,
) -> Result<Tree> {
    let mut samples: Vec<usize> = (0..labels.len()).collect();
    grow_tree(data, labels, &mut samples, kind, params, &mut seed::rng(rng_seed), None)
}

pub fn fit_tree_observed(
    data: &dyn Features,
    labels: &[u8],
    kind: ForestKind,
    params: &ForestParams,
    rng_seed: u64,
    observer: &mut dyn SplitObserver,
) -> Result<Tree> {
    let mut samples: Vec<usize> = (0..labels.len()).collect();
    grow_tree(
        data,
        labels,
        &mut samples,
        kind,
        params,
        &mut seed::rng(rng_seed),
        Some(observer),
    )
}

/// `n` row indices drawn uniformly with replacement.
pub fn bootstrap_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bagged ensemble of trees of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    kind: ForestKind,
    trees: Vec<Tree>,
    feature_dim: usize,
    val_accuracy: Option<f64>,
}

impl Forest {
    pub fn from_parts(
        kind: ForestKind,
        trees: Vec<Tree>,
        feature_dim: usize,
        val_accuracy: Option<f64>,
    ) -> Result<Self> {
        if trees.is_empty() {
            return Err(DafError::Format("forest without trees".into()));
        }
        for t in &trees {
            for n in t.nodes() {
                if let Node::Split { feature, .. } = n {
                    if *feature as usize >= feature_dim {
                        return Err(DafError::Format(format!(
                            "split on feature {feature} beyond dimension {feature_dim}"
                        )));
                    }
                }
            }
        }
        Ok(Forest {
            kind,
            trees,
            feature_dim,
            val_accuracy,
        })
    }

    pub fn kind(&self) -> ForestKind {
        self.kind
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn val_accuracy(&self) -> Option<f64> {
        self.val_accuracy
    }

    pub fn set_val_accuracy(&mut self, acc: Option<f64>) {
        self.val_accuracy = acc;
    }

    /// Class distribution for row `row` of `data`; dimensions are not checked.
    pub fn proba_row<F: Features + ?Sized>(&self, data: &F, row: usize) -> [f64; CLASSES] {
        let mut acc = [0.0; CLASSES];
        for t in &self.trees {
            let p = t.proba(data, row);
            acc[0] += p[0];
            acc[1] += p[1];
        }
        let t = self.trees.len() as f64;
        [acc[0] / t, acc[1] / t]
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; CLASSES]> {
        if x.len() != self.feature_dim {
            return Err(DafError::DimensionMismatch {
                expected: self.feature_dim,
                found: x.len(),
            });
        }
        Ok(self.proba_row(&SingleRow(x), 0))
    }
}

/// Fits `params.n_trees` trees, each on its own bootstrap resample drawn
/// from a seed derived from `(rng_seed, tree index)`.
pub fn fit_forest(
    data: &dyn Features,
    labels: &[u8],
    kind: ForestKind,
    params: &ForestParams,
    rng_seed: u64,
) -> Result<Forest> {
    let rows: Vec<usize> = (0..labels.len()).collect();
    fit_forest_rows(data, labels, &rows, kind, params, rng_seed)
}

/// As [`fit_forest`], restricted to the listed rows of `data`.
pub fn fit_forest_rows(
    data: &dyn Features,
    labels: &[u8],
    rows: &[usize],
    kind: ForestKind,
    params: &ForestParams,
    rng_seed: u64,
) -> Result<Forest> {
    params.validate()?;
    check_inputs(data, labels)?;
    if rows.is_empty() {
        return Err(DafError::EmptyData);
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= labels.len()) {
        return Err(DafError::IndexOutOfRange {
            index: bad,
            len: labels.len(),
        });
    }
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::child_rng(rng_seed, &[t as u64]);
            let mut samples = if params.bootstrap {
                bootstrap_indices(rows.len(), &mut rng)
                    .into_iter()
                    .map(|i| rows[i])
                    .collect()
            } else {
                rows.to_vec()
            };
            grow_tree(data, labels, &mut samples, kind, params, &mut rng, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest {
        kind,
        trees,
        feature_dim: data.dim(),
        val_accuracy: None,
    })
}
