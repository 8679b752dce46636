//! CART-style decision trees: Gini impurity for classification, variance
//! reduction for regression. Split search runs over presorted per-feature
//! index segments (exact mode) or equal-frequency bins (histogram mode).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize, gain: f64 },
    /// Classification leaf: per-class sample counts.
    ClassLeaf { counts: [u64; 2] },
    /// Regression leaf: mean target.
    ValueLeaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub task: Task,
    pub n_features: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features considered per split; `None` means all.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: 16, min_samples_leaf: 1, features_per_split: None, seed: 0 }
    }
}

/// Equal-frequency binning for histogram split search. Built once from the
/// training matrix; prediction always uses real-valued thresholds.
#[derive(Debug, Clone)]
pub struct Binning {
    /// Per feature: sorted candidate thresholds (midpoints between adjacent bins).
    edges: Vec<Vec<f64>>,
    /// Per feature, per sample: bin id. `x <= edges[b]` iff `bin(x) <= b`.
    bins: Vec<Vec<u16>>,
    pub n_bins: usize,
}

pub fn build_binning(x: &Matrix, n_bins: usize) -> Binning {
    let n = x.rows();
    let d = x.cols();
    let mut edges = Vec::with_capacity(d);
    let mut bins = Vec::with_capacity(d);
    for j in 0..d {
        let mut vals: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut feat_edges: Vec<f64> = Vec::new();
        for k in 1..n_bins {
            let pos = k * n / n_bins;
            if pos == 0 || pos >= n {
                continue;
            }
            let (lo, hi) = (vals[pos - 1], vals[pos]);
            if hi > lo {
                let edge = 0.5 * (lo + hi);
                if feat_edges.last().map_or(true, |&e| edge > e) {
                    feat_edges.push(edge);
                }
            }
        }
        let feat_bins: Vec<u16> = (0..n)
            .map(|i| feat_edges.partition_point(|&e| x.get(i, j) > e) as u16)
            .collect();
        edges.push(feat_edges);
        bins.push(feat_bins);
    }
    Binning { edges, bins, n_bins }
}

enum Targets<'a> {
    Class(&'a [usize]),
    Reg(&'a [f64]),
}

impl Targets<'_> {
    #[inline]
    fn value(&self, i: usize) -> f64 {
        match self {
            Targets::Class(y) => y[i] as f64,
            Targets::Reg(y) => y[i],
        }
    }
}

/// Weighted node cost to minimize: `n * gini` for classification,
/// sum of squared errors for regression.
#[inline]
fn node_cost(task: Task, n: f64, sum: f64, sumsq: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    match task {
        Task::Classification => {
            let p = sum / n;
            n * 2.0 * p * (1.0 - p)
        }
        Task::Regression => sumsq - sum * sum / n,
    }
}

struct Fitter<'a> {
    x: &'a Matrix,
    y: Targets<'a>,
    task: Task,
    params: &'a TreeParams,
    binning: Option<&'a Binning>,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    side: Vec<bool>, // scratch: per-row split side
}

struct NodeStats {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl NodeStats {
    fn cost(&self, task: Task) -> f64 {
        node_cost(task, self.n, self.sum, self.sumsq)
    }
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl<'a> Fitter<'a> {
    fn stats(&self, idx: &[u32]) -> NodeStats {
        let mut s = NodeStats { n: idx.len() as f64, sum: 0.0, sumsq: 0.0 };
        for &i in idx {
            let v = self.y.value(i as usize);
            s.sum += v;
            s.sumsq += v * v;
        }
        s
    }

    fn leaf(&mut self, idx: &[u32]) -> usize {
        let node = match self.task {
            Task::Classification => {
                let mut counts = [0u64; 2];
                for &i in idx {
                    counts[match self.y {
                        Targets::Class(y) => y[i as usize],
                        Targets::Reg(_) => unreachable!(),
                    }] += 1;
                }
                Node::ClassLeaf { counts }
            }
            Task::Regression => {
                let sum: f64 = idx.iter().map(|&i| self.y.value(i as usize)).sum();
                Node::ValueLeaf { value: sum / idx.len() as f64 }
            }
        };
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let d = self.x.cols();
        match self.params.features_per_split {
            None => (0..d).collect(),
            Some(m) if m >= d => (0..d).collect(),
            Some(m) => {
                // partial Fisher-Yates, then sorted so the search order is
                // independent of the draw order
                let mut pool: Vec<usize> = (0..d).collect();
                for i in 0..m {
                    let j = self.rng.gen_range(i..d);
                    pool.swap(i, j);
                }
                let mut chosen = pool[..m].to_vec();
                chosen.sort_unstable();
                chosen
            }
        }
    }

    /// Exact split search: sweep the presorted segment of each candidate
    /// feature; thresholds are midpoints of adjacent distinct values.
    fn best_split_exact(
        &self,
        segments: &[Vec<u32>],
        features: &[usize],
        parent: &NodeStats,
    ) -> Option<BestSplit> {
        let parent_cost = parent.cost(self.task);
        let msl = self.params.min_samples_leaf as f64;
        let mut best: Option<BestSplit> = None;
        for &f in features {
            let seg = &segments[f];
            let mut ln = 0.0;
            let mut lsum = 0.0;
            let mut lsumsq = 0.0;
            for w in 0..seg.len() - 1 {
                let i = seg[w] as usize;
                let v = self.y.value(i);
                ln += 1.0;
                lsum += v;
                lsumsq += v * v;
                let cur = self.x.get(i, f);
                let next = self.x.get(seg[w + 1] as usize, f);
                if next <= cur {
                    continue;
                }
                if ln < msl || (parent.n - ln) < msl {
                    continue;
                }
                let cost = node_cost(self.task, ln, lsum, lsumsq)
                    + node_cost(
                        self.task,
                        parent.n - ln,
                        parent.sum - lsum,
                        parent.sumsq - lsumsq,
                    );
                // impure nodes split on the best valid candidate even at zero
                // gain; purity and depth limits do the stopping
                let gain = parent_cost - cost;
                if best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(BestSplit { feature: f, threshold: 0.5 * (cur + next), gain });
                }
            }
        }
        best
    }

    /// Histogram split search over the precomputed equal-frequency bins.
    fn best_split_histogram(
        &self,
        segments: &[Vec<u32>],
        features: &[usize],
        parent: &NodeStats,
    ) -> Option<BestSplit> {
        let binning = self.binning.unwrap();
        let parent_cost = parent.cost(self.task);
        let msl = self.params.min_samples_leaf as f64;
        let mut best: Option<BestSplit> = None;
        for &f in features {
            let edges = &binning.edges[f];
            if edges.is_empty() {
                continue;
            }
            let n_bins = edges.len() + 1;
            let mut hn = vec![0.0; n_bins];
            let mut hsum = vec![0.0; n_bins];
            let mut hsumsq = vec![0.0; n_bins];
            let fbins = &binning.bins[f];
            for &i in &segments[f] {
                let b = fbins[i as usize] as usize;
                let v = self.y.value(i as usize);
                hn[b] += 1.0;
                hsum[b] += v;
                hsumsq[b] += v * v;
            }
            let mut ln = 0.0;
            let mut lsum = 0.0;
            let mut lsumsq = 0.0;
            for b in 0..n_bins - 1 {
                ln += hn[b];
                lsum += hsum[b];
                lsumsq += hsumsq[b];
                if ln < msl || (parent.n - ln) < msl || ln == 0.0 || ln == parent.n {
                    continue;
                }
                let cost = node_cost(self.task, ln, lsum, lsumsq)
                    + node_cost(
                        self.task,
                        parent.n - ln,
                        parent.sum - lsum,
                        parent.sumsq - lsumsq,
                    );
                let gain = parent_cost - cost;
                if best.as_ref().map_or(true, |b2| gain > b2.gain) {
                    best = Some(BestSplit { feature: f, threshold: edges[b], gain });
                }
            }
        }
        best
    }

    fn fit_node(&mut self, segments: Vec<Vec<u32>>, depth: usize) -> usize {
        let stats = self.stats(&segments[0]);
        let pure = stats.cost(self.task) <= 1e-12;
        if depth >= self.params.max_depth
            || pure
            || segments[0].len() < 2 * self.params.min_samples_leaf.max(1)
        {
            return self.leaf(&segments[0]);
        }
        let features = self.candidate_features();
        let best = if self.binning.is_some() {
            self.best_split_histogram(&segments, &features, &stats)
        } else {
            self.best_split_exact(&segments, &features, &stats)
        };
        let Some(best) = best else {
            return self.leaf(&segments[0]);
        };

        for &i in &segments[best.feature] {
            self.side[i as usize] = self.x.get(i as usize, best.feature) <= best.threshold;
        }
        let d = segments.len();
        let mut left_segs = Vec::with_capacity(d);
        let mut right_segs = Vec::with_capacity(d);
        for seg in segments {
            let mut l = Vec::with_capacity(seg.len());
            let mut r = Vec::with_capacity(seg.len());
            for i in seg {
                if self.side[i as usize] {
                    l.push(i);
                } else {
                    r.push(i);
                }
            }
            left_segs.push(l);
            right_segs.push(r);
        }

        let me = self.nodes.len();
        self.nodes.push(Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: 0,
            right: 0,
            gain: best.gain,
        });
        let left = self.fit_node(left_segs, depth + 1);
        let right = self.fit_node(right_segs, depth + 1);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[me] {
            *l = left;
            *r = right;
        }
        me
    }
}

fn fit(
    x: &Matrix,
    y: Targets<'_>,
    task: Task,
    params: &TreeParams,
    indices: Option<&[u32]>,
    binning: Option<&Binning>,
) -> Result<DecisionTree, ModelError> {
    if x.rows() == 0 {
        return Err(ModelError::EmptyInput);
    }
    let y_len = match &y {
        Targets::Class(v) => v.len(),
        Targets::Reg(v) => v.len(),
    };
    if y_len != x.rows() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} rows vs {} targets",
            x.rows(),
            y_len
        )));
    }
    if let Targets::Class(labels) = &y {
        if labels.iter().any(|&l| l > 1) {
            return Err(ModelError::InvalidConfig("classification targets must be binary".into()));
        }
    }
    let base: Vec<u32> = match indices {
        Some(idx) => idx.to_vec(),
        None => (0..x.rows() as u32).collect(),
    };
    if base.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let d = x.cols();
    let mut segments = Vec::with_capacity(d);
    for f in 0..d {
        let mut seg = base.clone();
        seg.sort_by(|&a, &b| {
            self_cmp(x.get(a as usize, f), x.get(b as usize, f))
        });
        segments.push(seg);
    }
    let mut fitter = Fitter {
        x,
        y,
        task,
        params,
        binning,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        nodes: Vec::new(),
        side: vec![false; x.rows()],
    };
    fitter.fit_node(segments, 0);
    Ok(DecisionTree { nodes: fitter.nodes, task, n_features: d })
}

#[inline]
fn self_cmp(a: f64, b: f64) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap()
}

pub fn fit_classification_tree(
    x: &Matrix,
    y: &[usize],
    params: &TreeParams,
) -> Result<DecisionTree, ModelError> {
    fit(x, Targets::Class(y), Task::Classification, params, None, None)
}

pub fn fit_classification_tree_on(
    x: &Matrix,
    y: &[usize],
    params: &TreeParams,
    indices: &[u32],
) -> Result<DecisionTree, ModelError> {
    fit(x, Targets::Class(y), Task::Classification, params, Some(indices), None)
}

pub fn fit_regression_tree(
    x: &Matrix,
    y: &[f64],
    params: &TreeParams,
) -> Result<DecisionTree, ModelError> {
    fit(x, Targets::Reg(y), Task::Regression, params, None, None)
}

pub fn fit_regression_tree_binned(
    x: &Matrix,
    y: &[f64],
    params: &TreeParams,
    binning: &Binning,
) -> Result<DecisionTree, ModelError> {
    fit(x, Targets::Reg(y), Task::Regression, params, None, Some(binning))
}

impl DecisionTree {
    fn leaf_for(&self, x: &[f64]) -> &Node {
        assert_eq!(x.len(), self.n_features, "feature dimension mismatch");
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
                leaf => return leaf,
            }
        }
    }

    /// Class probabilities from leaf frequencies.
    pub fn predict_proba(&self, x: &[f64]) -> [f64; 2] {
        match self.leaf_for(x) {
            Node::ClassLeaf { counts } => {
                let total = (counts[0] + counts[1]) as f64;
                [counts[0] as f64 / total, counts[1] as f64 / total]
            }
            Node::ValueLeaf { .. } => panic!("predict_proba on a regression tree"),
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        let p = self.predict_proba(x);
        if p[0] >= p[1] {
            0
        } else {
            1
        }
    }

    pub fn predict_value(&self, x: &[f64]) -> f64 {
        match self.leaf_for(x) {
            Node::ValueLeaf { value } => *value,
            Node::ClassLeaf { .. } => panic!("predict_value on a classification tree"),
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
                _ => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Accumulate per-feature weighted impurity decrease into `acc`.
    pub fn accumulate_importance(&self, acc: &mut [f64]) {
        for node in &self.nodes {
            if let Node::Split { feature, gain, .. } = node {
                acc[*feature] += gain;
            }
        }
    }
}
