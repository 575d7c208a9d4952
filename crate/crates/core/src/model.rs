//! Learned frequency model: squared-loss gradient boosting over regression
//! trees on a single scalar feature (the item key), plus the boundary that
//! splits high- from low-frequent items.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::ItemKey;
use crate::server::estimate_cms;
use crate::sketch::AggregateSketch;

const MODEL_FORMAT_VERSION: u32 = 1;

/// Frequency threshold separating high- from low-frequent items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Items predicted at or above the value are high-frequent.
    Finite(f64),
    /// No item is high-frequent.
    Unbounded,
}

impl Boundary {
    pub fn is_high(&self, prediction: f64) -> bool {
        match *self {
            Boundary::Finite(p) => prediction >= p,
            Boundary::Unbounded => false,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Boundary::Finite(p) => p,
            Boundary::Unbounded => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Classification {
    High { prediction: f64 },
    Low,
}

/// Anything that predicts item frequencies and carries a boundary.
///
/// Clients and the estimator classify through [`FrequencyOracle::classify`],
/// so they always agree on which items are high-frequent.
pub trait FrequencyOracle: Sync {
    fn predict(&self, d: ItemKey) -> f64;

    fn boundary(&self) -> Option<Boundary>;

    fn classify(&self, d: ItemKey) -> Result<Classification> {
        let boundary = self
            .boundary()
            .ok_or_else(|| Error::contract("frequency boundary has not been computed"))?;
        let prediction = self.predict(d);
        Ok(if boundary.is_high(prediction) {
            Classification::High { prediction }
        } else {
            Classification::Low
        })
    }
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub max_depth: usize,
}

impl Hyperparams {
    /// Settings used for large skewed synthetic domains.
    pub const ZIPF: Hyperparams = Hyperparams {
        learning_rate: 0.05,
        n_estimators: 350,
        max_depth: 5,
    };

    /// Settings used for smaller real-world domains.
    pub const SMALL_DOMAIN: Hyperparams = Hyperparams {
        learning_rate: 0.1,
        n_estimators: 100,
        max_depth: 3,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::parameter(format!(
                "learning rate must lie in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if self.max_depth == 0 {
            return Err(Error::parameter("max depth must be at least 1"));
        }
        Ok(())
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::ZIPF
    }
}

/// How an item key becomes the model's scalar input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCodec {
    KeyAsReal,
}

impl FeatureCodec {
    pub fn encode(&self, d: ItemKey) -> f64 {
        match self {
            FeatureCodec::KeyAsReal => d.0 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    /// Inputs `<= threshold` go left.
    Split {
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegressionTree {
    root: TreeNode,
}

impl RegressionTree {
    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn predict(&self, x: f64) -> f64 {
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    threshold,
                    left,
                    right,
                } => node = if x <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(node: &TreeNode) -> usize {
            match node {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(left).max(walk(right)),
            }
        }
        walk(&self.root)
    }

    pub fn is_stump(&self) -> bool {
        matches!(self.root, TreeNode::Leaf { .. })
    }

    fn check(&self, max_depth: usize) -> Result<()> {
        fn walk(node: &TreeNode) -> bool {
            match node {
                TreeNode::Leaf { value } => value.is_finite(),
                TreeNode::Split {
                    threshold,
                    left,
                    right,
                } => threshold.is_finite() && walk(left) && walk(right),
            }
        }
        if !walk(&self.root) {
            return Err(Error::format("model", "non-finite tree value"));
        }
        if self.depth() > max_depth {
            return Err(Error::format(
                "model",
                format!("tree depth {} exceeds max depth {max_depth}", self.depth()),
            ));
        }
        Ok(())
    }

    /// Fits one tree by exact greedy variance reduction.
    ///
    /// `xs` must be sorted ascending. With one feature every node owns a
    /// contiguous range of the sorted points, so a split scan is a pass over
    /// that range with running sums.
    pub fn fit(xs: &[f64], targets: &[f64], max_depth: usize) -> RegressionTree {
        assert_eq!(xs.len(), targets.len());
        assert!(!xs.is_empty());
        let mut prefix = Vec::with_capacity(targets.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &t in targets {
            acc += t;
            prefix.push(acc);
        }
        RegressionTree {
            root: build_node(xs, targets, &prefix, 0, xs.len(), max_depth),
        }
    }
}

fn build_node(
    xs: &[f64],
    targets: &[f64],
    prefix: &[f64],
    lo: usize,
    hi: usize,
    depth_left: usize,
) -> TreeNode {
    let count = (hi - lo) as f64;
    let sum = prefix[hi] - prefix[lo];
    let mean = targets[lo..hi].iter().sum::<f64>() / count;
    let leaf = TreeNode::Leaf { value: mean };
    if depth_left == 0 || hi - lo < 2 {
        return leaf;
    }
    let spread: f64 = targets[lo..hi].iter().map(|t| (t - mean).powi(2)).sum();
    let scale: f64 = targets[lo..hi].iter().map(|t| t * t).sum();
    if spread <= f64::EPSILON * scale {
        return leaf;
    }
    let parent = sum * sum / count;
    let mut best: Option<(usize, f64)> = None;
    for s in lo + 1..hi {
        if xs[s - 1] == xs[s] {
            continue;
        }
        let left_sum = prefix[s] - prefix[lo];
        let right_sum = sum - left_sum;
        let nl = (s - lo) as f64;
        let nr = (hi - s) as f64;
        let gain = left_sum * left_sum / nl + right_sum * right_sum / nr - parent;
        if best.is_none_or(|(_, g)| gain > g) {
            best = Some((s, gain));
        }
    }
    match best {
        Some((s, gain)) if gain > f64::EPSILON * scale => TreeNode::Split {
            threshold: 0.5 * (xs[s - 1] + xs[s]),
            left: Box::new(build_node(xs, targets, prefix, lo, s, depth_left - 1)),
            right: Box::new(build_node(xs, targets, prefix, s, hi, depth_left - 1)),
        },
        _ => leaf,
    }
}

/// Sketch parameters a model was trained against; used to refuse mixing
/// artifacts from different runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchParams {
    pub k: usize,
    pub m: usize,
    pub epsilon: f64,
    pub master_seed: u64,
}

impl SketchParams {
    pub fn of(sketch: &AggregateSketch) -> Self {
        Self {
            k: sketch.k(),
            m: sketch.m(),
            epsilon: sketch.params().epsilon(),
            master_seed: sketch.family().master_seed(),
        }
    }
}

/// A fitted boosting ensemble with its boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyModel {
    format_version: u32,
    hyperparameters: Hyperparams,
    base_prediction: f64,
    learning_rate: f64,
    theta: Option<f64>,
    boundary: Option<Boundary>,
    feature_codec: FeatureCodec,
    #[serde(default)]
    sketch: Option<SketchParams>,
    #[serde(default)]
    domain_size: Option<u64>,
    trees: Vec<RegressionTree>,
}

impl FrequencyModel {
    /// A model with no trees.
    pub fn constant(value: f64, hyper: Hyperparams) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            hyperparameters: hyper,
            base_prediction: value,
            learning_rate: hyper.learning_rate,
            theta: None,
            boundary: None,
            feature_codec: FeatureCodec::KeyAsReal,
            sketch: None,
            domain_size: None,
            trees: Vec::new(),
        }
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn base_prediction(&self) -> f64 {
        self.base_prediction
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn hyperparameters(&self) -> Hyperparams {
        self.hyperparameters
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn feature_codec(&self) -> FeatureCodec {
        self.feature_codec
    }

    pub fn sketch_params(&self) -> Option<SketchParams> {
        self.sketch
    }

    pub fn set_sketch_params(&mut self, params: SketchParams) {
        self.sketch = Some(params);
    }

    pub fn domain_size(&self) -> Option<u64> {
        self.domain_size
    }

    pub fn set_domain_size(&mut self, domain_size: u64) {
        self.domain_size = Some(domain_size);
    }

    /// Attaches the boundary and the θ it was computed for.
    pub fn set_boundary(&mut self, boundary: Boundary, theta: f64) {
        self.boundary = Some(boundary);
        self.theta = Some(theta);
    }

    pub fn predict(&self, d: ItemKey) -> f64 {
        let x = self.feature_codec.encode(d);
        let total: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        self.base_prediction + self.learning_rate * total
    }

    /// Compact JSON.
    pub fn serialize(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("model serialization cannot fail")
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header =
            serde_json::from_slice(bytes).map_err(|e| Error::format("model", e.to_string()))?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::format(
                "model",
                format!(
                    "unsupported version {}, expected {MODEL_FORMAT_VERSION}",
                    header.format_version
                ),
            ));
        }
        let model: FrequencyModel =
            serde_json::from_slice(bytes).map_err(|e| Error::format("model", e.to_string()))?;
        for tree in &model.trees {
            tree.check(model.hyperparameters.max_depth)?;
        }
        Ok(model)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::deserialize(&bytes)
    }
}

impl FrequencyOracle for FrequencyModel {
    fn predict(&self, d: ItemKey) -> f64 {
        FrequencyModel::predict(self, d)
    }

    fn boundary(&self) -> Option<Boundary> {
        self.boundary
    }
}

/// Sampled domain items paired with their scaled phase-one estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub pairs: Vec<(ItemKey, f64)>,
    /// Set when the requested sample size exceeded the domain.
    pub clamped_from: Option<usize>,
}

impl TrainingSet {
    pub fn t(&self) -> usize {
        self.pairs.len()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemKey> + '_ {
        self.pairs.iter().map(|&(d, _)| d)
    }
}

/// Draws `t` domain items without replacement and labels each with its
/// sketch estimate divided by the sampling rate `r`.
pub fn build_training_set<R: Rng + ?Sized>(
    sketch: &AggregateSketch,
    domain_size: u64,
    t: usize,
    r: f64,
    rng: &mut R,
) -> Result<TrainingSet> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::parameter(format!("sampling rate must lie in (0, 1], got {r}")));
    }
    if t == 0 {
        return Err(Error::parameter("training sample size must be at least 1"));
    }
    if domain_size == 0 {
        return Err(Error::parameter("domain is empty"));
    }
    let domain = usize::try_from(domain_size)
        .map_err(|_| Error::parameter("domain size exceeds addressable memory"))?;
    let clamped_from = (t > domain).then_some(t);
    if let Some(requested) = clamped_from {
        log::warn!("training sample size {requested} exceeds domain size {domain}; clamping");
    }
    let t = t.min(domain);
    let mut items: Vec<u64> = rand::seq::index::sample(rng, domain, t)
        .into_iter()
        .map(|i| i as u64)
        .collect();
    items.sort_unstable();
    let pairs = items
        .into_iter()
        .map(|d| {
            let d = ItemKey(d);
            Ok((d, estimate_cms(sketch, d)? / r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        pairs,
        clamped_from,
    })
}

/// Gradient boosting with squared loss.
pub fn fit(train: &TrainingSet, hyper: Hyperparams) -> Result<FrequencyModel> {
    fit_traced(train, hyper).map(|(model, _)| model)
}

/// Like [`fit`], also returning the training SSE after each stage
/// (index 0 is the constant base model).
pub fn fit_traced(train: &TrainingSet, hyper: Hyperparams) -> Result<(FrequencyModel, Vec<f64>)> {
    hyper.validate()?;
    if train.pairs.is_empty() {
        return Err(Error::parameter("training set is empty"));
    }
    let codec = FeatureCodec::KeyAsReal;
    let mut points: Vec<(f64, f64)> = train
        .pairs
        .iter()
        .map(|&(d, target)| (codec.encode(d), target))
        .collect();
    if points.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::parameter("training targets must be finite"));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let targets: Vec<f64> = points.iter().map(|p| p.1).collect();

    let base = targets.iter().sum::<f64>() / targets.len() as f64;
    let mut model = FrequencyModel::constant(base, hyper);
    let mut residuals: Vec<f64> = targets.iter().map(|t| t - base).collect();
    let sse = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut losses = vec![sse(&residuals)];

    for _ in 0..hyper.n_estimators {
        let tree = RegressionTree::fit(&xs, &residuals, hyper.max_depth);
        if tree.is_stump() {
            break;
        }
        for (r, &x) in residuals.iter_mut().zip(&xs) {
            *r -= hyper.learning_rate * tree.predict(x);
        }
        losses.push(sse(&residuals));
        model.trees.push(tree);
    }
    Ok((model, losses))
}

/// Boundary from `(item, prediction)` pairs.
///
/// Predictions are sorted descending with ties broken by ascending key. The
/// boundary is the prediction at the longest prefix whose sum does not exceed
/// `θ` times the total; when even the first prediction exceeds that mass the
/// result is [`Boundary::Unbounded`].
pub fn boundary_from_predictions(predictions: &[(ItemKey, f64)], theta: f64) -> Result<Boundary> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::parameter(format!("theta must lie in (0, 1], got {theta}")));
    }
    if predictions.is_empty() {
        return Err(Error::parameter("boundary needs at least one probe item"));
    }
    let mut sorted = predictions.to_vec();
    sorted.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        other => other,
    });
    let total: f64 = sorted.iter().map(|p| p.1).sum();
    let budget = theta * total;
    let mut prefix = 0.0;
    let mut best = None;
    for (i, &(_, value)) in sorted.iter().enumerate() {
        prefix += value;
        if prefix <= budget {
            best = Some(i);
        }
    }
    Ok(match best {
        Some(i) => Boundary::Finite(sorted[i].1),
        None => Boundary::Unbounded,
    })
}

pub fn compute_boundary(
    model: &dyn FrequencyOracle,
    probe_items: &[ItemKey],
    theta: f64,
) -> Result<Boundary> {
    let predictions: Vec<(ItemKey, f64)> =
        probe_items.iter().map(|&d| (d, model.predict(d))).collect();
    boundary_from_predictions(&predictions, theta)
}
