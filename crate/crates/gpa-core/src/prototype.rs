//! Per-class prototypes and focal-style class weights.
//!
//! A prototype is the confidence-weighted mean of aggregated proposal
//! features for one class. Classes whose aggregated confidence mass is
//! zero are marked absent (zero vector, zero weight) instead of producing
//! NaN, so batches missing rare classes stay well-defined downstream.

use crate::error::{Error, Result};
use crate::graph::AggregatedBatch;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Which domain a prototype set was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainTag {
    Source,
    Target,
}

/// Per-class prototype vectors with presence mask and class weights.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    vectors: Array2<f64>,
    present: Vec<bool>,
    weights: Array1<f64>,
    domain: DomainTag,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn prototype(&self, class: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(class)
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.present[class]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    /// Attach class weights; absent classes must carry weight 0.
    pub fn with_weights(mut self, weights: Array1<f64>) -> Result<Self> {
        if weights.len() != self.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} classes",
                weights.len(),
                self.num_classes()
            )));
        }
        for (k, &w) in weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidInput(format!(
                    "class weight {w} for class {k} outside [0,1]"
                )));
            }
            if !self.present[k] && w != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "absent class {k} must have zero weight, got {w}"
                )));
            }
        }
        self.weights = weights;
        Ok(self)
    }

    /// Build from explicit parts (used by tests and JSON loading).
    pub fn from_parts(
        vectors: Array2<f64>,
        present: Vec<bool>,
        weights: Array1<f64>,
        domain: DomainTag,
    ) -> Result<Self> {
        if present.len() != vectors.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} presence flags for {} classes",
                present.len(),
                vectors.nrows()
            )));
        }
        let set = PrototypeSet {
            vectors,
            present,
            weights: Array1::zeros(0),
            domain,
        };
        let set = PrototypeSet {
            weights: Array1::zeros(set.num_classes()),
            ..set
        };
        set.with_weights(weights)
    }

    /// Merge and weight in one step.
    pub fn from_aggregated(agg: &AggregatedBatch, gamma: f64, domain: DomainTag) -> Result<Self> {
        let weights = class_weights(agg, gamma)?;
        merge_prototypes(agg, domain).with_weights(weights)
    }

    pub fn to_records(&self) -> Vec<PrototypeRecord> {
        (0..self.num_classes())
            .map(|k| PrototypeRecord {
                class_id: k,
                present: self.present[k],
                weight: self.weights[k],
                vector: self.vectors.row(k).to_vec(),
            })
            .collect()
    }

    pub fn from_records(records: &[PrototypeRecord], domain: DomainTag) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no prototype records".into()));
        }
        let dim = records[0].vector.len();
        let mut vectors = Array2::zeros((records.len(), dim));
        let mut present = vec![false; records.len()];
        let mut weights = Array1::zeros(records.len());
        for r in records {
            if r.class_id >= records.len() {
                return Err(Error::InvalidInput(format!(
                    "class_id {} out of range",
                    r.class_id
                )));
            }
            if r.vector.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "prototype {} has dim {}, expected {dim}",
                    r.class_id,
                    r.vector.len()
                )));
            }
            for (j, &v) in r.vector.iter().enumerate() {
                vectors[[r.class_id, j]] = v;
            }
            present[r.class_id] = r.present;
            weights[r.class_id] = r.weight;
        }
        Self::from_parts(vectors, present, weights, domain)
    }
}

/// JSON-facing view of one class prototype.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub class_id: usize,
    pub present: bool,
    pub weight: f64,
    pub vector: Vec<f64>,
}

/// Confidence-weighted mean of aggregated features per class.
///
/// Class `k` gets `sum_i conf[i][k] * feat[i] / sum_i conf[i][k]`; a zero
/// denominator marks the class absent. Weights are left at zero.
pub fn merge_prototypes(agg: &AggregatedBatch, domain: DomainTag) -> PrototypeSet {
    let (n, d, c) = (agg.len(), agg.feature_dim(), agg.num_classes());
    let conf = agg.confidences();
    let feat = agg.features();
    let mut vectors = Array2::zeros((c, d));
    let mut present = vec![false; c];
    for k in 0..c {
        let mass: f64 = (0..n).map(|i| conf[[i, k]]).sum();
        if mass > 0.0 {
            present[k] = true;
            for i in 0..n {
                let w = conf[[i, k]] / mass;
                if w == 0.0 {
                    continue;
                }
                for j in 0..d {
                    vectors[[k, j]] += w * feat[[i, j]];
                }
            }
        }
    }
    PrototypeSet {
        vectors,
        present,
        weights: Array1::zeros(c),
        domain,
    }
}

/// Focal-style class weights from aggregated confidences.
///
/// The peak confidence of class `k` is its column max; the weight is
/// `(1 - peak)^gamma` when the peak clears the `1/C` presence threshold
/// (C counts all confidence columns, background included) and 0 otherwise.
pub fn class_weights(agg: &AggregatedBatch, gamma: f64) -> Result<Array1<f64>> {
    class_weights_with_threshold(agg, gamma, 1.0 / agg.num_classes() as f64)
}

/// Same as [`class_weights`] with an explicit peak-confidence threshold.
pub fn class_weights_with_threshold(
    agg: &AggregatedBatch,
    gamma: f64,
    threshold: f64,
) -> Result<Array1<f64>> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::invalid_parameter(
            "gamma",
            format!("must be >= 0, got {gamma}"),
        ));
    }
    let (n, c) = (agg.len(), agg.num_classes());
    let conf = agg.confidences();
    let mut alpha = Array1::zeros(c);
    for k in 0..c {
        let peak = (0..n).map(|i| conf[[i, k]]).fold(0.0_f64, f64::max);
        alpha[k] = if peak > threshold {
            (1.0 - peak).max(0.0).powf(gamma)
        } else {
            0.0
        };
    }
    Ok(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn agg(f: Array2<f64>, p: Array2<f64>) -> AggregatedBatch {
        AggregatedBatch::new(f, p).unwrap()
    }

    #[test]
    fn uniform_confidence_gives_mean() {
        let a = agg(
            array![[0.0, 0.0], [2.0, 4.0]],
            array![[0.5, 0.1], [0.5, 0.3]],
        );
        let protos = merge_prototypes(&a, DomainTag::Source);
        assert_eq!(protos.prototype(0).to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn one_hot_confidence_picks_row() {
        let a = agg(
            array![[1.0, 7.0], [2.0, 4.0]],
            array![[0.0, 0.2], [0.9, 0.0]],
        );
        let protos = merge_prototypes(&a, DomainTag::Source);
        assert_eq!(protos.prototype(0).to_vec(), vec![2.0, 4.0]);
        assert_eq!(protos.prototype(1).to_vec(), vec![1.0, 7.0]);
    }

    #[test]
    fn weighted_hand_example() {
        // rows (0,0) and (2,2), column weights (1,3): (1*(0,0)+3*(2,2))/4
        let a = agg(array![[0.0, 0.0], [2.0, 2.0]], array![[1.0], [3.0]]);
        let protos = merge_prototypes(&a, DomainTag::Target);
        assert_eq!(protos.prototype(0).to_vec(), vec![1.5, 1.5]);
    }

    #[test]
    fn absent_class_is_zero_and_unweighted() {
        let a = agg(array![[1.0, 1.0]], array![[0.7, 0.0]]);
        let protos = merge_prototypes(&a, DomainTag::Source);
        assert!(protos.is_present(0));
        assert!(!protos.is_present(1));
        assert_eq!(protos.prototype(1).to_vec(), vec![0.0, 0.0]);
        let alpha = class_weights(&a, 2.0).unwrap();
        assert_eq!(alpha[1], 0.0);
    }

    #[test]
    fn weights_examples() {
        // peak 1 -> weight 0 under gamma > 0
        let a = agg(array![[0.0]], array![[1.0, 0.0]]);
        let alpha = class_weights(&a, 2.0).unwrap();
        assert_eq!(alpha[0], 0.0);

        // peak at/below 1/C -> 0 (hard threshold)
        let a = agg(array![[0.0]], array![[0.5, 0.5]]);
        let alpha = class_weights(&a, 2.0).unwrap();
        assert_eq!(alpha.to_vec(), vec![0.0, 0.0]);

        // gamma = 2, C = 8, peak 0.5 -> 0.25
        let mut p = Array2::zeros((1, 8));
        p[[0, 0]] = 0.5;
        p[[0, 1]] = 0.5;
        let a = agg(Array2::zeros((1, 1)), p);
        let alpha = class_weights(&a, 2.0).unwrap();
        assert_eq!(alpha[0], 0.25);
        assert_eq!(alpha[1], 0.25);
    }

    #[test]
    fn gamma_zero_disables_reweighting() {
        let a = agg(
            array![[0.0], [0.0]],
            array![[0.9, 0.05], [0.1, 0.6]],
        );
        let alpha = class_weights(&a, 0.0).unwrap();
        assert_eq!(alpha.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn gamma_negative_rejected() {
        let a = agg(array![[0.0]], array![[0.6, 0.4]]);
        assert!(class_weights(&a, -0.1).is_err());
    }

    #[test]
    fn weight_monotone_in_peak() {
        let gamma = 2.0;
        let mut last = f64::INFINITY;
        for peak in [0.6, 0.7, 0.8, 0.95] {
            let a = agg(array![[0.0]], array![[peak, 1.0 - peak]]);
            let alpha = class_weights(&a, gamma).unwrap();
            assert!(alpha[0] < last);
            last = alpha[0];
        }
    }

    #[test]
    fn confidence_scaling_leaves_prototype() {
        let f = array![[1.0, -2.0], [3.0, 0.5], [0.2, 0.9]];
        let p = array![[0.1, 0.4], [0.5, 0.2], [0.2, 0.0]];
        let base = merge_prototypes(&agg(f.clone(), p.clone()), DomainTag::Source);
        let scaled = merge_prototypes(&agg(f, p.mapv(|v| v * 7.5)), DomainTag::Source);
        for k in 0..2 {
            for j in 0..2 {
                assert!(
                    (base.vectors()[[k, j]] - scaled.vectors()[[k, j]]).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn record_round_trip() {
        let a = agg(array![[1.0, 2.0]], array![[0.8, 0.0]]);
        let protos = PrototypeSet::from_aggregated(&a, 2.0, DomainTag::Target).unwrap();
        let records = protos.to_records();
        let back = PrototypeSet::from_records(&records, DomainTag::Target).unwrap();
        assert_eq!(back.vectors(), protos.vectors());
        assert_eq!(back.present(), protos.present());
        assert_eq!(back.weights(), protos.weights());
    }
}
