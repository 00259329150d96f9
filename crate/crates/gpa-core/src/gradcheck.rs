//! Finite-difference verification of the analytic gradients.
//!
//! The oracle reimplements the whole forward chain (normalization,
//! propagation, merging, class weights, contrastive loss) with plain
//! loops, independently of the production code the gradients come from,
//! and differentiates it by central differences.
//!
//! Two conventions are checked. By default the confidence path is a
//! constant, so the oracle freezes the propagated confidences at the base
//! point; with `confidence_grad` the merge weights are live. Class
//! weights are frozen in both (their peak/threshold steps carry no
//! gradient). Random draws are resampled while any active prototype pair
//! sits within 1e-4 of the hinge margin or closer than 1e-2 to another,
//! keeping the difference quotients away from the kinks.

use crate::align::{da_loss_backward, BackwardOptions};
use crate::error::Result;
use crate::geometry::BBox;
use crate::graph::{ProposalBatch, RelationGraph, Stage};
use crate::model::{cross_entropy, ToyModel};
use crate::sim::{generate_split, AppearanceMode, ClassAppearance, DomainSpec};
use crate::trainer::{prepare_scenes, GraphChoice, PreparedScene, TrainConfig, Trainer};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_STREAM: u64 = 20;
const PIPELINE_STREAM: u64 = 21;
const FD_STEP: f64 = 1e-6;

/// Outcome of a gradient-check run.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub op_trials: usize,
    pub pipeline_trials: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Max-norm relative error with a unit floor:
/// `max_i |a_i - n_i| / max(1, max_i |n_i|)`.
pub fn max_norm_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(1.0_f64, |m, &v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (&a, &n)| m.max((a - n).abs()));
    diff / scale
}

/// Run both suites: the alignment-loss gradient against proposal features
/// (and confidences) and the full two-stage objective against model
/// parameters.
pub fn run(op_trials: usize, pipeline_trials: usize, seed: u64, tol: f64) -> GradcheckReport {
    let op_results = crate::exec::map_indexed(op_trials, |i| op_trial(seed, i as u64, tol));
    let pipe_results =
        crate::exec::map_indexed(pipeline_trials, |i| pipeline_trial(seed, i as u64, tol));
    let mut max_rel_err = 0.0_f64;
    let mut failures = Vec::new();
    for (err, failure) in op_results.into_iter().chain(pipe_results) {
        max_rel_err = max_rel_err.max(err);
        if let Some(msg) = failure {
            failures.push(msg);
        }
    }
    GradcheckReport {
        op_trials,
        pipeline_trials,
        max_rel_err,
        failures,
    }
}

// ---------------------------------------------------------------------
// naive forward chain (the oracle)
// ---------------------------------------------------------------------

fn naive_normalized(adj: &Array2<f64>) -> Array2<f64> {
    let n = adj.nrows();
    let mut degrees = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            degrees[i] += adj[[i, j]];
        }
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = adj[[i, j]] / (degrees[i].sqrt() * degrees[j].sqrt());
        }
    }
    out
}

fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[[i, l]] * b[[l, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

struct NaiveProtos {
    protos: Array2<f64>,
    peaks: Vec<f64>,
}

/// Propagate each scene, pool the rows, merge prototypes.
fn naive_domain(
    features: &[Array2<f64>],
    confidences: &[Array2<f64>],
    adjacencies: &[Array2<f64>],
    transform: Option<&Array2<f64>>,
) -> NaiveProtos {
    let d = features[0].ncols();
    let c = confidences[0].ncols();
    let mut rows_f: Vec<Vec<f64>> = Vec::new();
    let mut rows_p: Vec<Vec<f64>> = Vec::new();
    for ((f, p), adj) in features.iter().zip(confidences).zip(adjacencies) {
        let ahat = naive_normalized(adj);
        let mut ftilde = naive_matmul(&ahat, f);
        if let Some(t) = transform {
            ftilde = naive_matmul(&ftilde, t);
        }
        let ptilde = naive_matmul(&ahat, p);
        for i in 0..ftilde.nrows() {
            rows_f.push((0..d).map(|j| ftilde[[i, j]]).collect());
            rows_p.push((0..c).map(|k| ptilde[[i, k]]).collect());
        }
    }
    let mut protos = Array2::zeros((c, d));
    let mut peaks = vec![0.0_f64; c];
    for k in 0..c {
        let mut mass = 0.0;
        for (i, row) in rows_p.iter().enumerate() {
            mass += row[k];
            peaks[k] = peaks[k].max(row[k]);
            let _ = i;
        }
        if mass > 0.0 {
            for (i, row) in rows_p.iter().enumerate() {
                for j in 0..d {
                    protos[[k, j]] += row[k] * rows_f[i][j] / mass;
                }
            }
        }
    }
    NaiveProtos { protos, peaks }
}

fn naive_alpha(peaks: &[f64], gamma: f64) -> Vec<f64> {
    let c = peaks.len();
    peaks
        .iter()
        .map(|&p| {
            if p > 1.0 / c as f64 {
                (1.0 - p).max(0.0).powf(gamma)
            } else {
                0.0
            }
        })
        .collect()
}

fn naive_dist(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    let mut acc = 0.0;
    for col in 0..a.ncols() {
        let d = a[[i, col]] - b[[j, col]];
        acc += d * d;
    }
    acc.sqrt()
}

fn naive_contrastive(
    c_src: &Array2<f64>,
    a_src: &[f64],
    c_tgt: &Array2<f64>,
    a_tgt: &[f64],
    margin: f64,
) -> f64 {
    let c = c_src.nrows();
    let mut intra_num = 0.0;
    let mut intra_den = 0.0;
    for k in 0..c {
        let w = a_src[k] * a_tgt[k];
        if w > 0.0 {
            intra_num += w * naive_dist(c_src, k, c_tgt, k);
            intra_den += w;
        }
    }
    let intra = if intra_den > 0.0 {
        intra_num / intra_den
    } else {
        0.0
    };
    let inter = |ca: &Array2<f64>, aa: &[f64], cb: &Array2<f64>, ab: &[f64]| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                let w = aa[i] * ab[j];
                if w > 0.0 {
                    num += w * (margin - naive_dist(ca, i, cb, j)).max(0.0);
                    den += w;
                }
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    intra
        + (inter(c_src, a_src, c_src, a_src)
            + inter(c_src, a_src, c_tgt, a_tgt)
            + inter(c_tgt, a_tgt, c_tgt, a_tgt))
            / 3.0
}

/// Reject draws whose active prototype pairs sit on (or too close to) a
/// non-differentiable point of the loss.
fn well_conditioned(
    c_src: &Array2<f64>,
    a_src: &[f64],
    c_tgt: &Array2<f64>,
    a_tgt: &[f64],
    margin: f64,
    min_dist: f64,
    margin_buffer: f64,
) -> bool {
    let c = c_src.nrows();
    for k in 0..c {
        if a_src[k] * a_tgt[k] > 0.0 && naive_dist(c_src, k, c_tgt, k) < min_dist {
            return false;
        }
    }
    let check_pairs = |ca: &Array2<f64>, aa: &[f64], cb: &Array2<f64>, ab: &[f64]| -> bool {
        for i in 0..c {
            for j in 0..c {
                if i == j {
                    continue;
                }
                if aa[i] * ab[j] > 0.0 {
                    let dist = naive_dist(ca, i, cb, j);
                    if dist < min_dist || (dist - margin).abs() < margin_buffer {
                        return false;
                    }
                }
            }
        }
        true
    };
    check_pairs(c_src, a_src, c_src, a_src)
        && check_pairs(c_src, a_src, c_tgt, a_tgt)
        && check_pairs(c_tgt, a_tgt, c_tgt, a_tgt)
}

// ---------------------------------------------------------------------
// operation-level trial
// ---------------------------------------------------------------------

struct OpDraw {
    boxes_src: Vec<BBox>,
    boxes_tgt: Vec<BBox>,
    f_src: Array2<f64>,
    f_tgt: Array2<f64>,
    p_src: Array2<f64>,
    p_tgt: Array2<f64>,
    graph_src: RelationGraph,
    graph_tgt: RelationGraph,
    gamma: f64,
    margin: f64,
    confidence_grad: bool,
    transform: Option<Array2<f64>>,
}

fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..40.0);
            let y = rng.random_range(0.0..40.0);
            let w = rng.random_range(2.0..10.0);
            let h = rng.random_range(2.0..10.0);
            BBox::new(x, y, x + w, y + h).expect("positive size")
        })
        .collect()
}

fn random_simplex_rows(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        let mut row: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().ln()).collect();
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

fn draw_op_instance(rng: &mut ChaCha8Rng) -> Result<OpDraw> {
    let n_src = rng.random_range(2..=16);
    let n_tgt = rng.random_range(2..=16);
    let d = rng.random_range(2..=8);
    let c = rng.random_range(2..=9);
    let gaussian = rng.random::<bool>();
    let boxes_src = random_boxes(n_src, rng);
    let boxes_tgt = random_boxes(n_tgt, rng);
    let (graph_src, graph_tgt) = if gaussian {
        let sigma = rng.random_range(3.0..18.0);
        (
            RelationGraph::gaussian(&boxes_src, sigma)?,
            RelationGraph::gaussian(&boxes_tgt, sigma)?,
        )
    } else {
        (
            RelationGraph::iou(&boxes_src)?,
            RelationGraph::iou(&boxes_tgt)?,
        )
    };
    let f_src = Array2::from_shape_fn((n_src, d), |_| rng.random_range(-1.5..1.5));
    let f_tgt = Array2::from_shape_fn((n_tgt, d), |_| rng.random_range(-1.5..1.5));
    let p_src = random_simplex_rows(n_src, c, rng);
    let p_tgt = random_simplex_rows(n_tgt, c, rng);
    let gamma = if rng.random::<f64>() < 0.2 {
        0.0
    } else {
        rng.random_range(0.5..2.5)
    };
    let margin = rng.random_range(0.6..1.6);
    let confidence_grad = rng.random::<bool>();
    let transform = if rng.random::<f64>() < 0.4 {
        Some(Array2::from_shape_fn((d, d), |_| rng.random_range(-0.6..0.6)))
    } else {
        None
    };
    Ok(OpDraw {
        boxes_src,
        boxes_tgt,
        f_src,
        f_tgt,
        p_src,
        p_tgt,
        graph_src,
        graph_tgt,
        gamma,
        margin,
        confidence_grad,
        transform,
    })
}

fn op_naive_loss(
    draw: &OpDraw,
    f_src: &Array2<f64>,
    f_tgt: &Array2<f64>,
    p_src: &Array2<f64>,
    p_tgt: &Array2<f64>,
    alpha: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let t = draw.transform.as_ref();
    let src = naive_domain(
        &[f_src.clone()],
        &[p_src.clone()],
        &[draw.graph_src.adjacency().clone()],
        t,
    );
    let tgt = naive_domain(
        &[f_tgt.clone()],
        &[p_tgt.clone()],
        &[draw.graph_tgt.adjacency().clone()],
        t,
    );
    naive_contrastive(&src.protos, &alpha.0, &tgt.protos, &alpha.1, draw.margin)
}

fn op_trial(seed: u64, index: u64, tol: f64) -> (f64, Option<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((OP_STREAM << 32) | index);

    for _attempt in 0..200 {
        let draw = match draw_op_instance(&mut rng) {
            Ok(d) => d,
            Err(e) => return (f64::INFINITY, Some(format!("trial {index}: draw failed: {e}"))),
        };
        let src_base = naive_domain(
            &[draw.f_src.clone()],
            &[draw.p_src.clone()],
            &[draw.graph_src.adjacency().clone()],
            draw.transform.as_ref(),
        );
        let tgt_base = naive_domain(
            &[draw.f_tgt.clone()],
            &[draw.p_tgt.clone()],
            &[draw.graph_tgt.adjacency().clone()],
            draw.transform.as_ref(),
        );
        let alpha = (
            naive_alpha(&src_base.peaks, draw.gamma),
            naive_alpha(&tgt_base.peaks, draw.gamma),
        );
        if !well_conditioned(
            &src_base.protos,
            &alpha.0,
            &tgt_base.protos,
            &alpha.1,
            draw.margin,
            1e-2,
            1e-4,
        ) {
            continue;
        }

        // analytic side
        let src_batch = match ProposalBatch::new(
            draw.boxes_src.clone(),
            draw.f_src.clone(),
            draw.p_src.clone(),
            Stage::Rcnn,
        ) {
            Ok(b) => b,
            Err(e) => return (f64::INFINITY, Some(format!("trial {index}: {e}"))),
        };
        let tgt_batch = match ProposalBatch::new(
            draw.boxes_tgt.clone(),
            draw.f_tgt.clone(),
            draw.p_tgt.clone(),
            Stage::Rcnn,
        ) {
            Ok(b) => b,
            Err(e) => return (f64::INFINITY, Some(format!("trial {index}: {e}"))),
        };
        let opts = BackwardOptions {
            gamma: draw.gamma,
            margin: draw.margin,
            confidence_grad: draw.confidence_grad,
            transform: draw.transform.clone(),
        };
        let loss = match da_loss_backward(&src_batch, &draw.graph_src, &tgt_batch, &draw.graph_tgt, &opts)
        {
            Ok(l) => l,
            Err(e) => return (f64::INFINITY, Some(format!("trial {index}: backward: {e}"))),
        };

        // the two routes must agree on the loss itself
        let base = op_naive_loss(&draw, &draw.f_src, &draw.f_tgt, &draw.p_src, &draw.p_tgt, &alpha);
        if (base - loss.total).abs() > 1e-10 * (1.0 + base.abs()) {
            return (
                f64::INFINITY,
                Some(format!(
                    "trial {index}: loss routes disagree: naive {base} vs analytic {}",
                    loss.total
                )),
            );
        }

        // finite differences over features
        let mut numeric = Vec::new();
        let mut analytic = Vec::new();
        for (which, f_base, grad) in [
            (0, &draw.f_src, loss.grad_f_source.as_ref().unwrap()),
            (1, &draw.f_tgt, loss.grad_f_target.as_ref().unwrap()),
        ] {
            for i in 0..f_base.nrows() {
                for j in 0..f_base.ncols() {
                    let mut plus = f_base.clone();
                    plus[[i, j]] += FD_STEP;
                    let mut minus = f_base.clone();
                    minus[[i, j]] -= FD_STEP;
                    let (lp, lm) = if which == 0 {
                        (
                            op_naive_loss(&draw, &plus, &draw.f_tgt, &draw.p_src, &draw.p_tgt, &alpha),
                            op_naive_loss(&draw, &minus, &draw.f_tgt, &draw.p_src, &draw.p_tgt, &alpha),
                        )
                    } else {
                        (
                            op_naive_loss(&draw, &draw.f_src, &plus, &draw.p_src, &draw.p_tgt, &alpha),
                            op_naive_loss(&draw, &draw.f_src, &minus, &draw.p_src, &draw.p_tgt, &alpha),
                        )
                    };
                    numeric.push((lp - lm) / (2.0 * FD_STEP));
                    analytic.push(grad[[i, j]]);
                }
            }
        }
        let mut err = max_norm_rel_err(&analytic, &numeric);

        if draw.confidence_grad {
            let mut numeric = Vec::new();
            let mut analytic = Vec::new();
            for (which, p_base, grad) in [
                (0, &draw.p_src, loss.grad_p_source.as_ref().unwrap()),
                (1, &draw.p_tgt, loss.grad_p_target.as_ref().unwrap()),
            ] {
                for i in 0..p_base.nrows() {
                    for j in 0..p_base.ncols() {
                        let mut plus = p_base.clone();
                        plus[[i, j]] += FD_STEP;
                        let mut minus = p_base.clone();
                        minus[[i, j]] -= FD_STEP;
                        let (lp, lm) = if which == 0 {
                            (
                                op_naive_loss(&draw, &draw.f_src, &draw.f_tgt, &plus, &draw.p_tgt, &alpha),
                                op_naive_loss(&draw, &draw.f_src, &draw.f_tgt, &minus, &draw.p_tgt, &alpha),
                            )
                        } else {
                            (
                                op_naive_loss(&draw, &draw.f_src, &draw.f_tgt, &draw.p_src, &plus, &alpha),
                                op_naive_loss(&draw, &draw.f_src, &draw.f_tgt, &draw.p_src, &minus, &alpha),
                            )
                        };
                        numeric.push((lp - lm) / (2.0 * FD_STEP));
                        analytic.push(grad[[i, j]]);
                    }
                }
            }
            err = err.max(max_norm_rel_err(&analytic, &numeric));
        }

        let failure = if err > tol {
            Some(format!(
                "trial {index}: rel err {err:.3e} > {tol:.1e} (confidence_grad={}, transform={})",
                draw.confidence_grad,
                draw.transform.is_some()
            ))
        } else {
            None
        };
        return (err, failure);
    }
    (
        f64::INFINITY,
        Some(format!("trial {index}: resampling exhausted")),
    )
}

// ---------------------------------------------------------------------
// pipeline trial (full objective on a tiny model)
// ---------------------------------------------------------------------

struct FrozenPipeline {
    alpha1: (Vec<f64>, Vec<f64>),
    alpha2: (Vec<f64>, Vec<f64>),
    /// Per-scene stage-1/2 confidences frozen at the base point; None
    /// means the live confidences feed the merge weights.
    probs1: Option<(Vec<Array2<f64>>, Vec<Array2<f64>>)>,
    probs2: Option<(Vec<Array2<f64>>, Vec<Array2<f64>>)>,
}

fn scene_slices(
    scenes: &[&PreparedScene],
    concat: &Array2<f64>,
) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(scenes.len());
    let mut row = 0;
    for s in scenes {
        let n = s.raw.nrows();
        out.push(concat.slice(s![row..row + n, ..]).to_owned());
        row += n;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn pipeline_objective(
    model: &ToyModel,
    t_rpn: Option<&Array2<f64>>,
    t_rcnn: Option<&Array2<f64>>,
    src: &[&PreparedScene],
    tgt: &[&PreparedScene],
    cfg: &TrainConfig,
    frozen: &FrozenPipeline,
) -> f64 {
    let src_raw = {
        let views: Vec<_> = src.iter().map(|s| s.raw.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
    };
    let tgt_raw = {
        let views: Vec<_> = tgt.iter().map(|s| s.raw.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
    };
    let src_cache = model.forward(&src_raw).unwrap();
    let tgt_cache = model.forward(&tgt_raw).unwrap();
    let labels: Vec<usize> = src.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l > 0)).collect();
    let (det1, _) = cross_entropy(&src_cache.logits1, &src_cache.probs1, &binary).unwrap();
    let (det2, _) = cross_entropy(&src_cache.logits2, &src_cache.probs2, &labels).unwrap();
    let mut objective = det1 + det2;

    let adj_src: Vec<Array2<f64>> = src.iter().map(|s| s.graph.adjacency().clone()).collect();
    let adj_tgt: Vec<Array2<f64>> = tgt.iter().map(|s| s.graph.adjacency().clone()).collect();
    let f_src = scene_slices(src, &src_cache.features);
    let f_tgt = scene_slices(tgt, &tgt_cache.features);

    if cfg.lambda1 > 0.0 {
        let (p_src, p_tgt) = match &frozen.probs1 {
            Some((a, b)) => (a.clone(), b.clone()),
            None => (
                scene_slices(src, &src_cache.probs1),
                scene_slices(tgt, &tgt_cache.probs1),
            ),
        };
        let s_state = naive_domain(&f_src, &p_src, &adj_src, t_rpn);
        let t_state = naive_domain(&f_tgt, &p_tgt, &adj_tgt, t_rpn);
        objective += cfg.lambda1
            * naive_contrastive(
                &s_state.protos,
                &frozen.alpha1.0,
                &t_state.protos,
                &frozen.alpha1.1,
                cfg.margin_rpn,
            );
    }
    if cfg.lambda2 > 0.0 {
        let (p_src, p_tgt) = match &frozen.probs2 {
            Some((a, b)) => (a.clone(), b.clone()),
            None => (
                scene_slices(src, &src_cache.probs2),
                scene_slices(tgt, &tgt_cache.probs2),
            ),
        };
        let s_state = naive_domain(&f_src, &p_src, &adj_src, t_rcnn);
        let t_state = naive_domain(&f_tgt, &p_tgt, &adj_tgt, t_rcnn);
        objective += cfg.lambda2
            * naive_contrastive(
                &s_state.protos,
                &frozen.alpha2.0,
                &t_state.protos,
                &frozen.alpha2.1,
                cfg.margin_rcnn,
            );
    }
    objective
}

fn tiny_world(rng: &mut ChaCha8Rng) -> DomainSpec {
    let raw_dim = 4;
    let classes = 3;
    let mode = |rng: &mut ChaCha8Rng| AppearanceMode {
        mean: ndarray::Array1::from_shape_fn(raw_dim, |_| rng.random_range(-3.0..3.0)),
        scale: 0.3,
    };
    DomainSpec {
        raw_dim,
        foreground: (0..classes)
            .map(|_| ClassAppearance {
                modes: vec![mode(rng), mode(rng)],
            })
            .collect(),
        background: ClassAppearance {
            modes: vec![mode(rng)],
        },
        shift: None,
        frequencies: vec![1.0 / classes as f64; classes],
        scene_extent: 48.0,
        instance_size: (5.0, 12.0),
        instances_per_scene: (1, 2),
        proposals_per_instance: (1, 2),
        background_proposals: 1,
        jitter: 0.3,
        feature_noise: 0.2,
    }
}

fn pipeline_stage_protos(
    model: &ToyModel,
    scenes: &[&PreparedScene],
    stage: Stage,
    transform: Option<&Array2<f64>>,
) -> NaiveProtos {
    let raw = {
        let views: Vec<_> = scenes.iter().map(|s| s.raw.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).unwrap()
    };
    let cache = model.forward(&raw).unwrap();
    let probs = match stage {
        Stage::Rpn => &cache.probs1,
        Stage::Rcnn => &cache.probs2,
    };
    let adjs: Vec<Array2<f64>> = scenes.iter().map(|s| s.graph.adjacency().clone()).collect();
    naive_domain(
        &scene_slices(scenes, &cache.features),
        &scene_slices(scenes, probs),
        &adjs,
        transform,
    )
}

fn pipeline_trial(seed: u64, index: u64, tol: f64) -> (f64, Option<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((PIPELINE_STREAM << 32) | index);

    for attempt in 0..100 {
        let spec = tiny_world(&mut rng);
        let pick = |rng: &mut ChaCha8Rng| [0.0, 0.7, 1.0, 1.6][rng.random_range(0..4)];
        let cfg = TrainConfig {
            gamma: rng.random_range(0.0..2.5),
            margin_rpn: rng.random_range(0.7..1.4),
            margin_rcnn: rng.random_range(0.7..1.4),
            lambda1: pick(&mut rng),
            lambda2: pick(&mut rng),
            epochs: 1,
            batch_scenes: 2,
            hidden_dim: 5,
            embed_dim: 4,
            graph: if rng.random::<bool>() {
                GraphChoice::Iou
            } else {
                GraphChoice::Gaussian
            },
            sigma: rng.random_range(4.0..14.0),
            confidence_grad: rng.random::<bool>(),
            learnable_transform: rng.random::<bool>(),
            seed: seed ^ (index.wrapping_mul(0x9e37_79b9) + attempt as u64),
            ..TrainConfig::default()
        };
        let data_seed = cfg.seed.wrapping_add(13);
        let src = match generate_split(&spec, 2, data_seed, 0)
            .and_then(|s| prepare_scenes(&s, cfg.graph, cfg.sigma))
        {
            Ok(s) => s,
            Err(e) => return (f64::INFINITY, Some(format!("pipeline {index}: {e}"))),
        };
        let tgt = match generate_split(&spec, 2, data_seed, 2)
            .and_then(|s| prepare_scenes(&s, cfg.graph, cfg.sigma))
        {
            Ok(s) => s,
            Err(e) => return (f64::INFINITY, Some(format!("pipeline {index}: {e}"))),
        };
        let trainer = match Trainer::new(&cfg, spec.raw_dim, spec.num_classes()) {
            Ok(t) => t,
            Err(e) => return (f64::INFINITY, Some(format!("pipeline {index}: {e}"))),
        };
        let src_refs: Vec<&PreparedScene> = src.iter().collect();
        let tgt_refs: Vec<&PreparedScene> = tgt.iter().collect();

        let (t_rpn, t_rcnn) = trainer.transforms();
        let model = trainer.model();

        // freeze the confidence-path quantities at the base point
        let base1_src = pipeline_stage_protos(model, &src_refs, Stage::Rpn, t_rpn);
        let base1_tgt = pipeline_stage_protos(model, &tgt_refs, Stage::Rpn, t_rpn);
        let base2_src = pipeline_stage_protos(model, &src_refs, Stage::Rcnn, t_rcnn);
        let base2_tgt = pipeline_stage_protos(model, &tgt_refs, Stage::Rcnn, t_rcnn);
        let alpha1 = (
            naive_alpha(&base1_src.peaks, cfg.gamma),
            naive_alpha(&base1_tgt.peaks, cfg.gamma),
        );
        let alpha2 = (
            naive_alpha(&base2_src.peaks, cfg.gamma),
            naive_alpha(&base2_tgt.peaks, cfg.gamma),
        );
        let ok1 = cfg.lambda1 == 0.0
            || well_conditioned(
                &base1_src.protos,
                &alpha1.0,
                &base1_tgt.protos,
                &alpha1.1,
                cfg.margin_rpn,
                3e-2,
                1e-3,
            );
        let ok2 = cfg.lambda2 == 0.0
            || well_conditioned(
                &base2_src.protos,
                &alpha2.0,
                &base2_tgt.protos,
                &alpha2.1,
                cfg.margin_rcnn,
                3e-2,
                1e-3,
            );
        if !(ok1 && ok2) {
            continue;
        }

        let frozen_probs = |stage: Stage| -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
            let grab = |scenes: &[&PreparedScene]| {
                scenes
                    .iter()
                    .map(|s| {
                        let cache = model.forward(&s.raw).unwrap();
                        match stage {
                            Stage::Rpn => cache.probs1,
                            Stage::Rcnn => cache.probs2,
                        }
                    })
                    .collect::<Vec<_>>()
            };
            (grab(&src_refs), grab(&tgt_refs))
        };
        let frozen = FrozenPipeline {
            alpha1,
            alpha2,
            probs1: if cfg.confidence_grad {
                None
            } else {
                Some(frozen_probs(Stage::Rpn))
            },
            probs2: if cfg.confidence_grad {
                None
            } else {
                Some(frozen_probs(Stage::Rcnn))
            },
        };

        let step = match trainer.compute_step(&src_refs, &tgt_refs) {
            Ok(s) => s,
            Err(e) => return (f64::INFINITY, Some(format!("pipeline {index}: step: {e}"))),
        };
        let mut analytic = step.model.flatten();
        if let Some(g) = &step.transform_rpn {
            analytic.extend(g.iter());
        } else if cfg.learnable_transform {
            analytic.extend(std::iter::repeat(0.0).take(cfg.embed_dim * cfg.embed_dim));
        }
        if let Some(g) = &step.transform_rcnn {
            analytic.extend(g.iter());
        } else if cfg.learnable_transform {
            analytic.extend(std::iter::repeat(0.0).take(cfg.embed_dim * cfg.embed_dim));
        }

        // base parameter vector: model then transforms
        let mut theta = model.flatten();
        if let Some(t) = t_rpn {
            theta.extend(t.iter());
        }
        if let Some(t) = t_rcnn {
            theta.extend(t.iter());
        }
        let model_len = model.flatten().len();
        let t_len = cfg.embed_dim * cfg.embed_dim;

        let eval_at = |theta: &[f64]| -> f64 {
            let mut probe = model.clone();
            probe.set_from_flat(&theta[..model_len]).unwrap();
            let (pt_rpn, pt_rcnn) = if cfg.learnable_transform {
                let a = Array2::from_shape_vec(
                    (cfg.embed_dim, cfg.embed_dim),
                    theta[model_len..model_len + t_len].to_vec(),
                )
                .unwrap();
                let b = Array2::from_shape_vec(
                    (cfg.embed_dim, cfg.embed_dim),
                    theta[model_len + t_len..].to_vec(),
                )
                .unwrap();
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            pipeline_objective(
                &probe,
                pt_rpn.as_ref(),
                pt_rcnn.as_ref(),
                &src_refs,
                &tgt_refs,
                &cfg,
                &frozen,
            )
        };

        // sanity: the frozen objective at the base point equals the report
        let base_val = eval_at(&theta);
        if (base_val - step.report.total).abs() > 1e-9 * (1.0 + base_val.abs()) {
            return (
                f64::INFINITY,
                Some(format!(
                    "pipeline {index}: objective routes disagree: naive {base_val} vs report {}",
                    step.report.total
                )),
            );
        }

        let mut numeric = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += FD_STEP;
            let mut minus = theta.clone();
            minus[i] -= FD_STEP;
            numeric[i] = (eval_at(&plus) - eval_at(&minus)) / (2.0 * FD_STEP);
        }

        let err = max_norm_rel_err(&analytic, &numeric);
        let failure = if err > tol {
            Some(format!(
                "pipeline {index}: rel err {err:.3e} > {tol:.1e} (lambda1={}, lambda2={}, confidence_grad={}, transform={})",
                cfg.lambda1, cfg.lambda2, cfg.confidence_grad, cfg.learnable_transform
            ))
        } else {
            None
        };
        return (err, failure);
    }
    (
        f64::INFINITY,
        Some(format!("pipeline {index}: resampling exhausted")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let report = run(8, 4, 42, 1e-5);
        assert!(
            report.passed(),
            "failures: {:?} (max rel err {})",
            report.failures,
            report.max_rel_err
        );
        assert!(report.max_rel_err <= 1e-5);
    }

    #[test]
    fn rel_err_uses_unit_floor() {
        assert_eq!(max_norm_rel_err(&[1e-9], &[0.0]), 1e-9);
        let err = max_norm_rel_err(&[10.0, 0.0], &[10.0, 0.5]);
        assert!((err - 0.05).abs() < 1e-12);
    }
}
