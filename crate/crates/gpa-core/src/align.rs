//! Class-reweighted contrastive alignment of two domains' prototypes.
//!
//! The intra-class term pulls matching prototypes of source and target
//! together; the inter-class term pushes every ordered pair of distinct
//! classes (within and across domains) apart up to a margin. Each term is
//! weighted by the product of the participating class weights and
//! normalized by the weight mass, so rescaling all weights changes
//! nothing.
//!
//! `da_loss_backward` differentiates the full chain graph propagation ->
//! prototype merging -> contrastive loss with respect to the proposal
//! features, and optionally with respect to the confidences through the
//! merge weights. Class weights are always treated as constants: the
//! peak-confidence and threshold steps that produce them are not
//! differentiable.

use crate::error::{Error, Result};
use crate::graph::{aggregate, AggregatedBatch, ProposalBatch, RelationGraph};
use crate::prototype::{class_weights, merge_prototypes, DomainTag, PrototypeSet};
use ndarray::{concatenate, Array1, Array2, Axis};

/// Loss terms and, when produced by the backward pass, gradients with
/// respect to the proposal features (and optionally confidences).
#[derive(Debug, Clone)]
pub struct AlignmentLoss {
    pub intra: f64,
    pub inter_ss: f64,
    pub inter_st: f64,
    pub inter_tt: f64,
    pub total: f64,
    pub grad_f_source: Option<Array2<f64>>,
    pub grad_f_target: Option<Array2<f64>>,
    pub grad_p_source: Option<Array2<f64>>,
    pub grad_p_target: Option<Array2<f64>>,
}

impl AlignmentLoss {
    /// Compose the total from its four terms.
    pub fn from_terms(intra: f64, inter_ss: f64, inter_st: f64, inter_tt: f64) -> Self {
        AlignmentLoss {
            intra,
            inter_ss,
            inter_st,
            inter_tt,
            total: intra + (inter_ss + inter_st + inter_tt) / 3.0,
            grad_f_source: None,
            grad_f_target: None,
            grad_p_source: None,
            grad_p_target: None,
        }
    }
}

fn check_compatible(a: &PrototypeSet, b: &PrototypeSet) -> Result<()> {
    if a.num_classes() != b.num_classes() || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "prototype sets disagree: {}x{} vs {}x{}",
            a.num_classes(),
            a.dim(),
            b.num_classes(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin > 0.0) || !margin.is_finite() {
        return Err(Error::invalid_parameter(
            "margin",
            format!("must be > 0, got {margin}"),
        ));
    }
    Ok(())
}

fn proto_distance(a: &PrototypeSet, i: usize, b: &PrototypeSet, j: usize) -> f64 {
    let (pa, pb) = (a.prototype(i), b.prototype(j));
    pa.iter()
        .zip(pb.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Weighted mean distance between matching classes of the two domains.
/// Returns 0 when no class is active on both sides.
pub fn intra_loss(src: &PrototypeSet, tgt: &PrototypeSet) -> Result<f64> {
    check_compatible(src, tgt)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..src.num_classes() {
        let w = src.weights()[k] * tgt.weights()[k];
        if w > 0.0 {
            num += w * proto_distance(src, k, tgt, k);
            den += w;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Weighted mean hinge `max(0, margin - dist)` over ordered pairs of
/// distinct classes, one prototype from each argument. Returns 0 when the
/// weight mass is 0.
pub fn inter_loss(a: &PrototypeSet, b: &PrototypeSet, margin: f64) -> Result<f64> {
    check_compatible(a, b)?;
    check_margin(margin)?;
    let c = a.num_classes();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let w = a.weights()[i] * b.weights()[j];
            if w > 0.0 {
                num += w * (margin - proto_distance(a, i, b, j)).max(0.0);
                den += w;
            }
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Full alignment loss: intra plus the mean of the three inter terms
/// (source-source, source-target, target-target). Forward only.
pub fn total_da_loss(src: &PrototypeSet, tgt: &PrototypeSet, margin: f64) -> Result<AlignmentLoss> {
    Ok(AlignmentLoss::from_terms(
        intra_loss(src, tgt)?,
        inter_loss(src, src, margin)?,
        inter_loss(src, tgt, margin)?,
        inter_loss(tgt, tgt, margin)?,
    ))
}

/// Options for the backward pass.
#[derive(Debug, Clone)]
pub struct BackwardOptions {
    pub gamma: f64,
    pub margin: f64,
    /// When set, the gradient also flows through the confidence weights of
    /// prototype merging (never through peak-confidence or the threshold),
    /// and per-domain confidence gradients are returned.
    pub confidence_grad: bool,
    /// Optional feature transform applied after propagation, shared by
    /// both domains.
    pub transform: Option<Array2<f64>>,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            gamma: 2.0,
            margin: 1.0,
            confidence_grad: false,
            transform: None,
        }
    }
}

/// Everything the backward pass needs to remember about one domain's
/// forward computation. Scenes keep their own normalized adjacency; rows
/// of the concatenated matrices follow scene order.
pub(crate) struct DomainState {
    norm_adjs: Vec<Array2<f64>>,
    sizes: Vec<usize>,
    /// Propagated features before the optional transform.
    propagated: Array2<f64>,
    /// Propagated features after the optional transform.
    features: Array2<f64>,
    confidences: Array2<f64>,
    mass: Array1<f64>,
    pub(crate) protos: PrototypeSet,
}

pub(crate) fn forward_domain(
    scenes: &[(&ProposalBatch, &RelationGraph)],
    transform: Option<&Array2<f64>>,
    gamma: f64,
    domain: DomainTag,
) -> Result<DomainState> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no scenes in domain batch".into()));
    }
    let d = scenes[0].0.feature_dim();
    let c = scenes[0].0.num_classes();
    let stage = scenes[0].0.stage();
    let mut norm_adjs = Vec::with_capacity(scenes.len());
    let mut sizes = Vec::with_capacity(scenes.len());
    let mut prop_parts = Vec::with_capacity(scenes.len());
    let mut conf_parts = Vec::with_capacity(scenes.len());
    for (batch, graph) in scenes {
        if batch.feature_dim() != d || batch.num_classes() != c || batch.stage() != stage {
            return Err(Error::DimensionMismatch(
                "scenes of one domain batch must share stage, d and class count".into(),
            ));
        }
        if graph.len() != batch.len() {
            return Err(Error::DimensionMismatch(format!(
                "graph over {} nodes for a {}-proposal scene",
                graph.len(),
                batch.len()
            )));
        }
        let norm = graph.normalized()?;
        prop_parts.push(norm.dot(batch.features()));
        conf_parts.push(norm.dot(batch.confidences()));
        norm_adjs.push(norm);
        sizes.push(batch.len());
    }
    let prop_views: Vec<_> = prop_parts.iter().map(|m| m.view()).collect();
    let conf_views: Vec<_> = conf_parts.iter().map(|m| m.view()).collect();
    let propagated = concatenate(Axis(0), &prop_views).expect("scene parts share width");
    let confidences = concatenate(Axis(0), &conf_views).expect("scene parts share width");
    let features = match transform {
        Some(t) => {
            if t.nrows() != d || t.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "transform must be {d}x{d}, got {}x{}",
                    t.nrows(),
                    t.ncols()
                )));
            }
            propagated.dot(t)
        }
        None => propagated.clone(),
    };
    let mass = confidences.sum_axis(Axis(0));
    let agg = AggregatedBatch::new(features.clone(), confidences.clone())?;
    let weights = class_weights(&agg, gamma)?;
    let protos = merge_prototypes(&agg, domain).with_weights(weights)?;
    Ok(DomainState {
        norm_adjs,
        sizes,
        propagated,
        features,
        confidences,
        mass,
        protos,
    })
}

/// Loss terms together with the gradients with respect to both domains'
/// prototype vectors (class weights held constant).
pub(crate) fn loss_and_proto_grads(
    src: &PrototypeSet,
    tgt: &PrototypeSet,
    margin: f64,
) -> Result<(AlignmentLoss, Array2<f64>, Array2<f64>)> {
    check_compatible(src, tgt)?;
    check_margin(margin)?;
    let (c, d) = (src.num_classes(), src.dim());
    let mut g_src = Array2::zeros((c, d));
    let mut g_tgt = Array2::zeros((c, d));

    // intra term
    let mut intra_num = 0.0;
    let mut intra_den = 0.0;
    for k in 0..c {
        let w = src.weights()[k] * tgt.weights()[k];
        if w > 0.0 {
            intra_num += w * proto_distance(src, k, tgt, k);
            intra_den += w;
        }
    }
    let intra = if intra_den > 0.0 {
        intra_num / intra_den
    } else {
        0.0
    };
    if intra_den > 0.0 {
        for k in 0..c {
            let w = src.weights()[k] * tgt.weights()[k];
            if w > 0.0 {
                let dist = proto_distance(src, k, tgt, k);
                if dist > 0.0 {
                    let coef = w / (intra_den * dist);
                    for j in 0..d {
                        let diff = src.vectors()[[k, j]] - tgt.vectors()[[k, j]];
                        g_src[[k, j]] += coef * diff;
                        g_tgt[[k, j]] -= coef * diff;
                    }
                }
            }
        }
    }

    // one inter term; `into` selects which gradient matrix each side of
    // the pair belongs to
    let inter = |a: &PrototypeSet,
                     b: &PrototypeSet,
                     ga_is_src: bool,
                     gb_is_src: bool,
                     g_src: &mut Array2<f64>,
                     g_tgt: &mut Array2<f64>|
     -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                let w = a.weights()[i] * b.weights()[j];
                if w > 0.0 {
                    num += w * (margin - proto_distance(a, i, b, j)).max(0.0);
                    den += w;
                }
            }
        }
        if den == 0.0 {
            return 0.0;
        }
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                let w = a.weights()[i] * b.weights()[j];
                if w > 0.0 {
                    let dist = proto_distance(a, i, b, j);
                    // subgradient 0 at the hinge kink and at coincident prototypes
                    if dist > 0.0 && dist < margin {
                        let base = w / (3.0 * den * dist);
                        for col in 0..d {
                            let diff = a.vectors()[[i, col]] - b.vectors()[[j, col]];
                            let gi = if ga_is_src {
                                &mut g_src[[i, col]]
                            } else {
                                &mut g_tgt[[i, col]]
                            };
                            *gi -= base * diff;
                            let gj = if gb_is_src {
                                &mut g_src[[j, col]]
                            } else {
                                &mut g_tgt[[j, col]]
                            };
                            *gj += base * diff;
                        }
                    }
                }
            }
        }
        num / den
    };

    let inter_ss = inter(src, src, true, true, &mut g_src, &mut g_tgt);
    let inter_st = inter(src, tgt, true, false, &mut g_src, &mut g_tgt);
    let inter_tt = inter(tgt, tgt, false, false, &mut g_src, &mut g_tgt);

    Ok((
        AlignmentLoss::from_terms(intra, inter_ss, inter_st, inter_tt),
        g_src,
        g_tgt,
    ))
}

pub(crate) struct DomainGrads {
    pub grad_features: Array2<f64>,
    pub grad_confidences: Option<Array2<f64>>,
    pub grad_transform: Option<Array2<f64>>,
}

/// Push a prototype-space gradient back through merging, the optional
/// transform and per-scene propagation.
pub(crate) fn backward_domain(
    state: &DomainState,
    proto_grad: &Array2<f64>,
    transform: Option<&Array2<f64>>,
    confidence_grad: bool,
) -> DomainGrads {
    let n = state.features.nrows();
    let (c, d) = (proto_grad.nrows(), proto_grad.ncols());

    // d merge / d aggregated-feature: row i collects P[i][k]/mass[k]
    let mut norm_conf = Array2::zeros((n, c));
    for k in 0..c {
        if state.mass[k] > 0.0 {
            for i in 0..n {
                norm_conf[[i, k]] = state.confidences[[i, k]] / state.mass[k];
            }
        }
    }
    let grad_feat_tilde = norm_conf.dot(proto_grad);

    let grad_transform = transform.map(|_| state.propagated.t().dot(&grad_feat_tilde));
    let grad_prop = match transform {
        Some(t) => grad_feat_tilde.dot(&t.t()),
        None => grad_feat_tilde,
    };

    // propagation is symmetric, so the adjoint reuses the same matrix
    let mut grad_features = Array2::zeros((n, proto_grad.ncols()));
    let mut row = 0;
    for (norm, &size) in state.norm_adjs.iter().zip(&state.sizes) {
        let slice = grad_prop.slice(ndarray::s![row..row + size, ..]);
        grad_features
            .slice_mut(ndarray::s![row..row + size, ..])
            .assign(&norm.dot(&slice));
        row += size;
    }

    let grad_confidences = if confidence_grad {
        let mut grad_conf_tilde = Array2::zeros((n, c));
        for k in 0..c {
            if state.mass[k] > 0.0 {
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += proto_grad[[k, j]]
                            * (state.features[[i, j]] - state.protos.vectors()[[k, j]]);
                    }
                    grad_conf_tilde[[i, k]] = dot / state.mass[k];
                }
            }
        }
        let mut grad_conf = Array2::zeros((n, c));
        let mut row = 0;
        for (norm, &size) in state.norm_adjs.iter().zip(&state.sizes) {
            let slice = grad_conf_tilde.slice(ndarray::s![row..row + size, ..]);
            grad_conf
                .slice_mut(ndarray::s![row..row + size, ..])
                .assign(&norm.dot(&slice));
            row += size;
        }
        Some(grad_conf)
    } else {
        None
    };

    DomainGrads {
        grad_features,
        grad_confidences,
        grad_transform,
    }
}

/// Forward and backward pass of the full alignment chain for one pair of
/// proposal batches with their relation graphs.
pub fn da_loss_backward(
    src: &ProposalBatch,
    src_graph: &RelationGraph,
    tgt: &ProposalBatch,
    tgt_graph: &RelationGraph,
    opts: &BackwardOptions,
) -> Result<AlignmentLoss> {
    if src.feature_dim() != tgt.feature_dim() || src.num_classes() != tgt.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "source is {}x{} classes {}, target is {}x{} classes {}",
            src.len(),
            src.feature_dim(),
            src.num_classes(),
            tgt.len(),
            tgt.feature_dim(),
            tgt.num_classes()
        )));
    }
    let t = opts.transform.as_ref();
    let src_state = forward_domain(&[(src, src_graph)], t, opts.gamma, DomainTag::Source)?;
    let tgt_state = forward_domain(&[(tgt, tgt_graph)], t, opts.gamma, DomainTag::Target)?;
    let (mut loss, g_src, g_tgt) =
        loss_and_proto_grads(&src_state.protos, &tgt_state.protos, opts.margin)?;
    let src_grads = backward_domain(&src_state, &g_src, t, opts.confidence_grad);
    let tgt_grads = backward_domain(&tgt_state, &g_tgt, t, opts.confidence_grad);
    loss.grad_f_source = Some(src_grads.grad_features);
    loss.grad_f_target = Some(tgt_grads.grad_features);
    loss.grad_p_source = src_grads.grad_confidences;
    loss.grad_p_target = tgt_grads.grad_confidences;
    Ok(loss)
}

/// Convenience for callers that only need the forward losses of the full
/// chain (same path as [`da_loss_backward`], no gradients).
pub fn da_loss_forward(
    src: &ProposalBatch,
    src_graph: &RelationGraph,
    tgt: &ProposalBatch,
    tgt_graph: &RelationGraph,
    gamma: f64,
    margin: f64,
    transform: Option<&Array2<f64>>,
) -> Result<AlignmentLoss> {
    let src_agg = aggregate(src, src_graph, transform)?;
    let tgt_agg = aggregate(tgt, tgt_graph, transform)?;
    let src_protos = PrototypeSet::from_aggregated(&src_agg, gamma, DomainTag::Source)?;
    let tgt_protos = PrototypeSet::from_aggregated(&tgt_agg, gamma, DomainTag::Target)?;
    total_da_loss(&src_protos, &tgt_protos, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::graph::Stage;
    use ndarray::array;

    fn protos(vectors: Array2<f64>, weights: Vec<f64>, domain: DomainTag) -> PrototypeSet {
        let present = weights.iter().map(|&w| w > 0.0).collect();
        PrototypeSet::from_parts(
            vectors,
            present,
            Array1::from_vec(weights),
            domain,
        )
        .unwrap()
    }

    #[test]
    fn intra_zero_for_identical_prototypes() {
        let v = array![[1.0, 2.0], [3.0, -1.0]];
        let s = protos(v.clone(), vec![0.5, 0.5], DomainTag::Source);
        let t = protos(v, vec![0.3, 0.9], DomainTag::Target);
        assert_eq!(intra_loss(&s, &t).unwrap(), 0.0);
    }

    #[test]
    fn intra_zero_when_no_common_weight() {
        let s = protos(array![[1.0], [2.0]], vec![0.5, 0.0], DomainTag::Source);
        let t = protos(array![[9.0], [7.0]], vec![0.0, 0.5], DomainTag::Target);
        assert_eq!(intra_loss(&s, &t).unwrap(), 0.0);
    }

    #[test]
    fn intra_single_active_class() {
        // weights cancel in the ratio: loss equals the distance, 2.0
        let s = protos(array![[0.0, 0.0], [0.0, 0.0]], vec![0.5, 0.0], DomainTag::Source);
        let t = protos(array![[2.0, 0.0], [0.0, 0.0]], vec![0.5, 0.0], DomainTag::Target);
        assert_eq!(intra_loss(&s, &t).unwrap(), 2.0);
    }

    #[test]
    fn inter_inactive_when_separated() {
        let s = protos(array![[0.0, 0.0], [5.0, 0.0]], vec![0.5, 0.5], DomainTag::Source);
        assert_eq!(inter_loss(&s, &s, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn inter_coincident_prototypes_equal_margin() {
        let s = protos(array![[1.0, 1.0], [1.0, 1.0]], vec![0.4, 0.4], DomainTag::Source);
        assert_eq!(inter_loss(&s, &s, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn inter_rejects_bad_margin() {
        let s = protos(array![[0.0]], vec![0.5], DomainTag::Source);
        assert!(inter_loss(&s, &s, 0.0).is_err());
        assert!(inter_loss(&s, &s, -1.0).is_err());
    }

    #[test]
    fn total_composition() {
        let l = AlignmentLoss::from_terms(0.6, 0.3, 0.0, 0.3);
        assert!((l.total - 0.8).abs() < 1e-15);
        let l = AlignmentLoss::from_terms(2.0, 0.0, 0.0, 0.0);
        assert_eq!(l.total, 2.0);
    }

    #[test]
    fn total_zero_when_aligned_and_separated() {
        let v = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let s = protos(v.clone(), vec![0.5, 0.5, 0.5], DomainTag::Source);
        let t = protos(v, vec![0.5, 0.5, 0.5], DomainTag::Target);
        let l = total_da_loss(&s, &t, 1.0).unwrap();
        assert_eq!(l.total, 0.0);
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn toy_pair() -> (ProposalBatch, RelationGraph, ProposalBatch, RelationGraph) {
        let boxes = vec![bx(0.0, 0.0, 2.0, 2.0), bx(1.0, 0.0, 3.0, 2.0)];
        let src = ProposalBatch::new(
            boxes.clone(),
            array![[0.0, 0.0], [4.0, 0.0]],
            array![[0.9, 0.1], [0.2, 0.8]],
            Stage::Rpn,
        )
        .unwrap();
        let tgt = ProposalBatch::new(
            boxes.clone(),
            array![[0.5, 1.0], [3.0, -1.0]],
            array![[0.7, 0.3], [0.4, 0.6]],
            Stage::Rpn,
        )
        .unwrap();
        let gs = RelationGraph::iou(&boxes).unwrap();
        let gt = RelationGraph::iou(&boxes).unwrap();
        (src, gs, tgt, gt)
    }

    #[test]
    fn backward_matches_forward_losses() {
        let (src, gs, tgt, gt) = toy_pair();
        let opts = BackwardOptions::default();
        let back = da_loss_backward(&src, &gs, &tgt, &gt, &opts).unwrap();
        let fwd = da_loss_forward(&src, &gs, &tgt, &gt, opts.gamma, opts.margin, None).unwrap();
        assert!((back.total - fwd.total).abs() < 1e-14);
        assert!((back.intra - fwd.intra).abs() < 1e-14);
    }

    #[test]
    fn gradient_vanishes_at_a_minimum() {
        // both domains identical and classes far apart: loss 0, gradient 0
        let boxes = vec![bx(0.0, 0.0, 2.0, 2.0), bx(10.0, 10.0, 12.0, 12.0)];
        let f = array![[0.0, 0.0], [50.0, 0.0]];
        let p = array![[0.9, 0.1], [0.1, 0.9]];
        let batch = |dom: &Array2<f64>| {
            ProposalBatch::new(boxes.clone(), dom.clone(), p.clone(), Stage::Rpn).unwrap()
        };
        let g = RelationGraph::iou(&boxes).unwrap();
        let loss = da_loss_backward(
            &batch(&f),
            &g,
            &batch(&f),
            &g,
            &BackwardOptions::default(),
        )
        .unwrap();
        assert_eq!(loss.total, 0.0);
        let max_grad = loss
            .grad_f_source
            .unwrap()
            .iter()
            .chain(loss.grad_f_target.as_ref().unwrap().iter())
            .fold(0.0_f64, |m, &v| m.max(v.abs()));
        assert!(max_grad < 1e-9, "max grad {max_grad}");
    }

    #[test]
    fn duplicated_proposals_duplicate_gradient_rows() {
        let boxes = vec![
            bx(0.0, 0.0, 2.0, 2.0),
            bx(0.0, 0.0, 2.0, 2.0),
            bx(5.0, 5.0, 7.0, 7.0),
        ];
        let f = array![[1.0, 0.5], [1.0, 0.5], [-2.0, 3.0]];
        let p = array![[0.6, 0.4], [0.6, 0.4], [0.1, 0.9]];
        let src = ProposalBatch::new(boxes.clone(), f.clone(), p.clone(), Stage::Rpn).unwrap();
        let tgt = ProposalBatch::new(
            boxes.clone(),
            f.mapv(|v| v * 0.5 + 0.3),
            p,
            Stage::Rpn,
        )
        .unwrap();
        let g = RelationGraph::iou(&boxes).unwrap();
        let loss =
            da_loss_backward(&src, &g, &tgt, &g, &BackwardOptions::default()).unwrap();
        let gf = loss.grad_f_source.unwrap();
        for j in 0..2 {
            assert!((gf[[0, j]] - gf[[1, j]]).abs() < 1e-12);
        }
    }
}
