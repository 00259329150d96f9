//! Toy parametric detector: a two-layer feature extractor with a
//! foreground/background head (stage 1) and a per-category head (stage 2).
//!
//! All arithmetic is 64-bit and the forward pass is deterministic given
//! parameters and input, so finite-difference checks stay clean.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Two-head toy detector. The extractor maps raw features through one
/// tanh layer into the embedding space both heads read from.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub u1: Array2<f64>,
    pub c1: Array1<f64>,
    pub u2: Array2<f64>,
    pub c2: Array1<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl ToyModel {
    pub fn init(
        raw_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if raw_dim == 0 || hidden_dim == 0 || embed_dim == 0 {
            return Err(Error::InvalidInput("model dimensions must be >= 1".into()));
        }
        if classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        Ok(ToyModel {
            w1: glorot(raw_dim, hidden_dim, rng),
            b1: Array1::zeros(hidden_dim),
            w2: glorot(hidden_dim, embed_dim, rng),
            b2: Array1::zeros(embed_dim),
            u1: glorot(embed_dim, 2, rng),
            c1: Array1::zeros(2),
            u2: glorot(embed_dim, classes, rng),
            c2: Array1::zeros(classes),
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.u2.ncols()
    }

    /// Full forward pass over a batch of raw feature rows.
    pub fn forward(&self, raw: &Array2<f64>) -> Result<ForwardCache> {
        if raw.ncols() != self.raw_dim() {
            return Err(Error::DimensionMismatch(format!(
                "raw features have dim {}, model expects {}",
                raw.ncols(),
                self.raw_dim()
            )));
        }
        let hidden = (raw.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let features = hidden.dot(&self.w2) + &self.b2;
        let logits1 = features.dot(&self.u1) + &self.c1;
        let logits2 = features.dot(&self.u2) + &self.c2;
        let probs1 = softmax_rows(&logits1);
        let probs2 = softmax_rows(&logits2);
        Ok(ForwardCache {
            hidden,
            features,
            logits1,
            probs1,
            logits2,
            probs2,
        })
    }

    /// Flatten all parameters in a fixed order (for optimizers and
    /// finite-difference probes).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in [&self.w1, &self.w2, &self.u1, &self.u2] {
            out.extend(m.iter());
        }
        for v in [&self.b1, &self.b2, &self.c1, &self.c2] {
            out.extend(v.iter());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter();
        for m in [&mut self.w1, &mut self.w2, &mut self.u1, &mut self.u2] {
            for v in m.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        for b in [&mut self.b1, &mut self.b2, &mut self.c1, &mut self.c2] {
            for v in b.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w1.len()
            + self.w2.len()
            + self.u1.len()
            + self.u2.len()
            + self.b1.len()
            + self.b2.len()
            + self.c1.len()
            + self.c2.len()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden: Array2<f64>,
    pub features: Array2<f64>,
    pub logits1: Array2<f64>,
    pub probs1: Array2<f64>,
    pub logits2: Array2<f64>,
    pub probs2: Array2<f64>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub u1: Array2<f64>,
    pub c1: Array1<f64>,
    pub u2: Array2<f64>,
    pub c2: Array1<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        ModelGrads {
            w1: Array2::zeros(model.w1.dim()),
            b1: Array1::zeros(model.b1.dim()),
            w2: Array2::zeros(model.w2.dim()),
            b2: Array1::zeros(model.b2.dim()),
            u1: Array2::zeros(model.u1.dim()),
            c1: Array1::zeros(model.c1.dim()),
            u2: Array2::zeros(model.u2.dim()),
            c2: Array1::zeros(model.c2.dim()),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ModelGrads, scale: f64) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
        self.u1.scaled_add(scale, &other.u1);
        self.c1.scaled_add(scale, &other.c1);
        self.u2.scaled_add(scale, &other.u2);
        self.c2.scaled_add(scale, &other.c2);
    }

    pub fn scale(&mut self, s: f64) {
        for m in [&mut self.w1, &mut self.w2, &mut self.u1, &mut self.u2] {
            m.mapv_inplace(|v| v * s);
        }
        for b in [&mut self.b1, &mut self.b2, &mut self.c1, &mut self.c2] {
            b.mapv_inplace(|v| v * s);
        }
    }

    /// Same order as [`ToyModel::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.w1, &self.w2, &self.u1, &self.u2] {
            out.extend(m.iter());
        }
        for v in [&self.b1, &self.b2, &self.c1, &self.c2] {
            out.extend(v.iter());
        }
        out
    }
}

/// Row-wise softmax with max-shift for stability.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy of logits against integer labels, with the mean
/// logit-gradient `(softmax - onehot) / n`.
pub fn cross_entropy(
    logits: &Array2<f64>,
    probs: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    let c = logits.ncols();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad[[i, label]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n as f64);
    Ok((loss / n as f64, grad))
}

/// Push a probability-space gradient through a row-wise softmax.
pub fn softmax_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for i in 0..probs.nrows() {
        let dot: f64 = (0..probs.ncols())
            .map(|j| dprobs[[i, j]] * probs[[i, j]])
            .sum();
        for j in 0..probs.ncols() {
            out[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - dot);
        }
    }
    out
}

/// Gradients of one affine head: returns (d_weight, d_bias, d_input).
pub fn head_backward(
    features: &Array2<f64>,
    dlogits: &Array2<f64>,
    weight: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let dw = features.t().dot(dlogits);
    let db = dlogits.sum_axis(Axis(0));
    let dfeat = dlogits.dot(&weight.t());
    (dw, db, dfeat)
}

/// Backward through the extractor given the embedding gradient.
pub fn extractor_backward(
    model: &ToyModel,
    raw: &Array2<f64>,
    cache: &ForwardCache,
    dfeatures: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>) {
    let dw2 = cache.hidden.t().dot(dfeatures);
    let db2 = dfeatures.sum_axis(Axis(0));
    let dhidden = dfeatures.dot(&model.w2.t());
    let dz1 = &dhidden * &cache.hidden.mapv(|h| 1.0 - h * h);
    let dw1 = raw.t().dot(&dz1);
    let db1 = dz1.sum_axis(Axis(0));
    (dw1, db1, dw2, db2)
}

/// Classification surrogate for the detection objective.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    /// Stage-1 cross-entropy against the background/foreground collapse.
    pub stage1: f64,
    /// Stage-2 cross-entropy against full labels.
    pub stage2: f64,
    pub total: f64,
}

/// Cross-entropy of both heads on a labeled source batch, with gradients
/// for every model parameter. Labels use 0 for background.
pub fn detection_surrogate_loss(
    model: &ToyModel,
    raw: &Array2<f64>,
    labels: &[usize],
) -> Result<(DetectionLoss, ModelGrads)> {
    let cache = model.forward(raw)?;
    let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l > 0)).collect();
    for &l in labels {
        if l >= model.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: model.num_classes(),
            });
        }
    }
    let (loss1, dlogits1) = cross_entropy(&cache.logits1, &cache.probs1, &binary)?;
    let (loss2, dlogits2) = cross_entropy(&cache.logits2, &cache.probs2, labels)?;

    let mut grads = ModelGrads::zeros_like(model);
    let (du1, dc1, dfeat1) = head_backward(&cache.features, &dlogits1, &model.u1);
    let (du2, dc2, dfeat2) = head_backward(&cache.features, &dlogits2, &model.u2);
    grads.u1 = du1;
    grads.c1 = dc1;
    grads.u2 = du2;
    grads.c2 = dc2;
    let dfeatures = dfeat1 + dfeat2;
    let (dw1, db1, dw2, db2) = extractor_backward(model, raw, &cache, &dfeatures);
    grads.w1 = dw1;
    grads.b1 = db1;
    grads.w2 = dw2;
    grads.b2 = db2;

    Ok((
        DetectionLoss {
            stage1: loss1,
            stage2: loss2,
            total: loss1 + loss2,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn softmax_rows_are_probabilities() {
        let p = softmax_rows(&array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let logits = Array2::zeros((3, 5));
        let probs = softmax_rows(&logits);
        let (loss, _) = cross_entropy(&logits, &probs, &[0, 2, 4]).unwrap();
        assert!((loss - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_head_costs_nothing() {
        let logits = array![[100.0, 0.0], [0.0, 100.0]];
        let probs = softmax_rows(&logits);
        let (loss, _) = cross_entropy(&logits, &probs, &[0, 1]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Array2::zeros((1, 3));
        let probs = softmax_rows(&logits);
        assert!(matches!(
            cross_entropy(&logits, &probs, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = ToyModel::init(4, 8, 4, 3, &mut r1).unwrap();
        let b = ToyModel::init(4, 8, 4, 3, &mut r2).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ToyModel::init(3, 5, 4, 6, &mut rng).unwrap();
        let flat = model.flatten();
        let mut other = ToyModel::init(3, 5, 4, 6, &mut rng).unwrap();
        other.set_from_flat(&flat).unwrap();
        assert_eq!(other.flatten(), flat);
    }

    #[test]
    fn detection_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = ToyModel::init(3, 6, 4, 4, &mut rng).unwrap();
        let raw = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let labels = vec![0, 1, 2, 3, 1];

        let (_, grads) = detection_surrogate_loss(&model, &raw, &labels).unwrap();
        let analytic = grads.flatten();

        let h = 1e-6;
        let base = model.flatten();
        let mut numeric = vec![0.0; base.len()];
        let mut probe = model.clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            probe.set_from_flat(&plus).unwrap();
            let (lp, _) = detection_surrogate_loss(&probe, &raw, &labels).unwrap();
            let mut minus = base.clone();
            minus[i] -= h;
            probe.set_from_flat(&minus).unwrap();
            let (lm, _) = detection_surrogate_loss(&probe, &raw, &labels).unwrap();
            numeric[i] = (lp.total - lm.total) / (2.0 * h);
        }

        let scale = numeric.iter().fold(1.0_f64, |m, &v| m.max(v.abs()));
        let max_err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (&a, &n)| m.max((a - n).abs()));
        assert!(max_err / scale <= 1e-5, "rel err {}", max_err / scale);
    }
}
