//! Relation graphs over region proposals and graph-based aggregation.
//!
//! A relation graph ties proposals together by spatial affinity: either a
//! Gaussian kernel over center distances or pairwise IoU. Features and
//! confidences then propagate through the symmetrically normalized
//! adjacency so that proposals covering the same instance pool their
//! information.

use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, BBox};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Entries below this threshold count as zero when measuring sparsity.
pub const SPARSITY_THRESHOLD: f64 = 1e-3;

/// Detector stage a proposal batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Proposal-generation stage: two classes (background, foreground).
    Rpn,
    /// Classification stage: full per-category confidences.
    Rcnn,
}

/// A batch of proposals with their embeddings and per-class confidences.
///
/// Row `i` of `features` and `confidences` belongs to `boxes[i]`.
/// Column 0 of `confidences` is the background class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalBatch {
    boxes: Vec<BBox>,
    features: Array2<f64>,
    confidences: Array2<f64>,
    stage: Stage,
}

impl ProposalBatch {
    pub fn new(
        boxes: Vec<BBox>,
        features: Array2<f64>,
        confidences: Array2<f64>,
        stage: Stage,
    ) -> Result<Self> {
        let n = boxes.len();
        if n == 0 {
            return Err(Error::InvalidInput("batch needs at least one proposal".into()));
        }
        if features.nrows() != n || confidences.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} boxes but features have {} rows and confidences {} rows",
                n,
                features.nrows(),
                confidences.nrows()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidInput("feature dimension must be >= 1".into()));
        }
        let classes = confidences.ncols();
        if classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 confidence columns, got {classes}"
            )));
        }
        if stage == Stage::Rpn && classes != 2 {
            return Err(Error::InvalidInput(format!(
                "RPN-stage batches carry exactly 2 confidence columns, got {classes}"
            )));
        }
        for (i, row) in confidences.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidInput(format!(
                        "confidence out of [0,1] at proposal {i}: {p}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "confidence row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(ProposalBatch {
            boxes,
            features,
            confidences,
            stage,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one proposal
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.confidences.ncols()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn confidences(&self) -> &Array2<f64> {
        &self.confidences
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }
}

/// How a relation graph's adjacency was derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GraphKind {
    /// No relations: the adjacency is the identity matrix.
    Identity,
    /// Pairwise IoU of the proposal boxes.
    Iou,
    /// Gaussian kernel over center distances with bandwidth `sigma`.
    Gaussian { sigma: f64 },
}

/// Symmetric adjacency over a proposal set, with cached degrees.
///
/// Invariants: entries in [0,1], unit diagonal, `A = A^T`. The unit
/// diagonal guarantees every degree is >= 1.
#[derive(Debug, Clone)]
pub struct RelationGraph {
    adjacency: Array2<f64>,
    degrees: Array1<f64>,
    kind: GraphKind,
}

impl RelationGraph {
    /// Gaussian-kernel adjacency: `A[i][j] = exp(-dist(i,j)^2 / (2 sigma^2))`.
    pub fn gaussian(boxes: &[BBox], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid_parameter("sigma", format!("must be > 0, got {sigma}")));
        }
        if boxes.is_empty() {
            return Err(Error::InvalidInput("need at least one box".into()));
        }
        let n = boxes.len();
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            a[[i, i]] = 1.0;
            for j in (i + 1)..n {
                let d = center_distance(&boxes[i], &boxes[j]);
                let w = (-d * d / (2.0 * sigma * sigma)).exp();
                a[[i, j]] = w;
                a[[j, i]] = w;
            }
        }
        Ok(Self::from_parts(a, GraphKind::Gaussian { sigma }))
    }

    /// IoU adjacency: `A[i][j] = iou(box_i, box_j)`. Every box must have
    /// positive area so the diagonal is exactly 1.
    pub fn iou(boxes: &[BBox]) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::InvalidInput("need at least one box".into()));
        }
        if let Some(i) = boxes.iter().position(|b| b.area() <= 0.0) {
            return Err(Error::InvalidInput(format!(
                "box {i} has zero area; IoU graphs need positive-area boxes"
            )));
        }
        let n = boxes.len();
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            a[[i, i]] = 1.0;
            for j in (i + 1)..n {
                let w = iou(&boxes[i], &boxes[j]);
                a[[i, j]] = w;
                a[[j, i]] = w;
            }
        }
        Ok(Self::from_parts(a, GraphKind::Iou))
    }

    /// Identity adjacency over `n` proposals (the no-graph baseline).
    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("need at least one node".into()));
        }
        Ok(Self::from_parts(Array2::eye(n), GraphKind::Identity))
    }

    /// Validate an explicit adjacency matrix and wrap it.
    pub fn from_adjacency(adjacency: Array2<f64>, kind: GraphKind) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 || adjacency.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "adjacency must be square and nonempty, got {}x{}",
                n,
                adjacency.ncols()
            )));
        }
        for i in 0..n {
            if (adjacency[[i, i]] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "adjacency diagonal must be 1, got {} at {i}",
                    adjacency[[i, i]]
                )));
            }
            for j in 0..n {
                let v = adjacency[[i, j]];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "adjacency entry ({i},{j}) = {v} outside [0,1]"
                    )));
                }
                if (v - adjacency[[j, i]]).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "adjacency not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self::from_parts(adjacency, kind))
    }

    fn from_parts(adjacency: Array2<f64>, kind: GraphKind) -> Self {
        let degrees = adjacency.sum_axis(ndarray::Axis(1));
        RelationGraph {
            adjacency,
            degrees,
            kind,
        }
    }

    /// Test-only backdoor for exercising the degenerate-degree guard.
    #[cfg(test)]
    fn from_parts_unchecked(adjacency: Array2<f64>, kind: GraphKind) -> Self {
        Self::from_parts(adjacency, kind)
    }

    pub fn len(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn degrees(&self) -> &Array1<f64> {
        &self.degrees
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    /// Symmetric normalization `D^{-1/2} A D^{-1/2}`.
    ///
    /// Unreachable for constructor-built graphs, but a zero degree still
    /// yields a degenerate-graph error rather than NaN.
    pub fn normalized(&self) -> Result<Array2<f64>> {
        let n = self.len();
        for i in 0..n {
            if self.degrees[i] <= 0.0 {
                return Err(Error::DegenerateGraph { node: i });
            }
        }
        let mut out = self.adjacency.clone();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] /= (self.degrees[i] * self.degrees[j]).sqrt();
            }
        }
        Ok(out)
    }

    /// Fraction of adjacency entries below [`SPARSITY_THRESHOLD`].
    pub fn sparsity(&self) -> f64 {
        let n = self.len();
        let below = self
            .adjacency
            .iter()
            .filter(|&&v| v < SPARSITY_THRESHOLD)
            .count();
        below as f64 / (n * n) as f64
    }
}

/// Feature and confidence matrices after graph propagation.
///
/// Propagated confidences stay nonnegative but their rows no longer sum
/// to 1; prototype merging renormalizes per class downstream.
#[derive(Debug, Clone)]
pub struct AggregatedBatch {
    features: Array2<f64>,
    confidences: Array2<f64>,
}

impl AggregatedBatch {
    pub fn new(features: Array2<f64>, confidences: Array2<f64>) -> Result<Self> {
        if features.nrows() != confidences.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "features have {} rows, confidences {}",
                features.nrows(),
                confidences.nrows()
            )));
        }
        if let Some(v) = confidences.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "aggregated confidences must be nonnegative, got {v}"
            )));
        }
        Ok(AggregatedBatch {
            features,
            confidences,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.confidences.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn confidences(&self) -> &Array2<f64> {
        &self.confidences
    }
}

/// Propagate a batch through the normalized adjacency.
///
/// Features become `norm(A) * F`, optionally right-multiplied by a `d x d`
/// transform (the learnable-parameter ablation). Confidences are always
/// propagated transform-free so they stay nonnegative.
pub fn aggregate(
    batch: &ProposalBatch,
    graph: &RelationGraph,
    transform: Option<&Array2<f64>>,
) -> Result<AggregatedBatch> {
    if graph.len() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "graph over {} nodes, batch has {} proposals",
            graph.len(),
            batch.len()
        )));
    }
    let norm = graph.normalized()?;
    let mut features = norm.dot(batch.features());
    if let Some(t) = transform {
        let d = batch.feature_dim();
        if t.nrows() != d || t.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "transform must be {d}x{d}, got {}x{}",
                t.nrows(),
                t.ncols()
            )));
        }
        features = features.dot(t);
    }
    let confidences = norm.dot(batch.confidences());
    AggregatedBatch::new(features, confidences)
}

/// Find the Gaussian bandwidth whose graph sparsity matches the IoU
/// graph's sparsity on the same boxes, by bisection.
///
/// Sparsity is a decreasing step function of sigma, so the best
/// achievable gap is one step (`2/n^2`); the bisection tracks the
/// closest sigma seen.
pub fn calibrate_sigma(boxes: &[BBox]) -> Result<f64> {
    let target = RelationGraph::iou(boxes)?.sparsity();
    let n = boxes.len();
    if n == 1 {
        return Ok(1.0); // a single node has sparsity 0 at any bandwidth
    }

    let mut d_max: f64 = 0.0;
    let mut d_min_pos = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = center_distance(&boxes[i], &boxes[j]);
            d_max = d_max.max(d);
            if d > 0.0 {
                d_min_pos = d_min_pos.min(d);
            }
        }
    }
    if d_max == 0.0 {
        return Ok(1.0); // all centers coincide; Gaussian sparsity is 0 everywhere
    }
    if !d_min_pos.is_finite() {
        d_min_pos = d_max;
    }

    // exp(-d^2 / (2 s^2)) crosses the sparsity threshold at s = d / sqrt(2 ln(1/t)).
    let k = (1.0 / SPARSITY_THRESHOLD).ln().sqrt() * std::f64::consts::SQRT_2;
    let mut lo = d_min_pos / k / 4.0;
    let mut hi = d_max / k * 4.0;

    let sparsity_at = |s: f64| -> f64 {
        RelationGraph::gaussian(boxes, s)
            .expect("sigma > 0 by construction")
            .sparsity()
    };

    let mut best = (lo, (sparsity_at(lo) - target).abs());
    let consider = |s: f64, best: &mut (f64, f64)| {
        let gap = (sparsity_at(s) - target).abs();
        if gap < best.1 {
            *best = (s, gap);
        }
    };
    consider(hi, &mut best);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        consider(mid, &mut best);
        if sparsity_at(mid) > target {
            // too sparse: widen the kernel
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.0)
}
