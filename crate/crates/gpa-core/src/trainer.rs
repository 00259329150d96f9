//! Two-stage alignment training over the toy detector.
//!
//! Each step runs the detection surrogate on labeled source proposals,
//! then aligns the two domains twice: stage 1 on the
//! background/foreground confidences (class-agnostic) and stage 2 on the
//! full per-category confidences. The step objective is
//! `detection + lambda1 * stage1 + lambda2 * stage2`; everything is
//! differentiated analytically and updated with momentum SGD.
//!
//! One relation graph is built per scene, never across scenes; prototypes
//! pool the aggregated rows of all scenes in the batch.

use crate::align::{backward_domain, forward_domain, loss_and_proto_grads, DomainState};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::graph::{ProposalBatch, RelationGraph, Stage};
use crate::model::{
    cross_entropy, extractor_backward, head_backward, softmax_backward, ForwardCache, ModelGrads,
    ToyModel,
};
use crate::prototype::DomainTag;
use crate::sim::{streams, Scene};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which relation graph the pipeline builds per scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphChoice {
    /// Identity adjacency: prototypes come from raw proposals.
    None,
    Iou,
    /// Gaussian kernel with the configured sigma.
    Gaussian,
}

impl GraphChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GraphChoice::None),
            "iou" => Ok(GraphChoice::Iou),
            "gaussian" => Ok(GraphChoice::Gaussian),
            other => Err(Error::InvalidInput(format!(
                "unknown graph kind `{other}` (expected none|iou|gaussian)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            GraphChoice::None => "none",
            GraphChoice::Iou => "iou",
            GraphChoice::Gaussian => "gaussian",
        }
    }
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub margin_rpn: f64,
    pub margin_rcnn: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Alignment joins after this many source-only epochs; early
    /// confidences are too noisy to weight prototypes with.
    pub warmup_epochs: usize,
    /// Scenes per domain in one step.
    pub batch_scenes: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub graph: GraphChoice,
    pub sigma: f64,
    /// Let alignment gradients flow through the merge weights.
    pub confidence_grad: bool,
    /// Append the learnable feature transform to aggregation.
    pub learnable_transform: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 2.0,
            margin_rpn: 1.0,
            margin_rcnn: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 0.03,
            momentum: 0.9,
            epochs: 48,
            warmup_epochs: 6,
            batch_scenes: 6,
            hidden_dim: 16,
            embed_dim: 8,
            graph: GraphChoice::Iou,
            sigma: 8.0,
            confidence_grad: false,
            learnable_transform: false,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return bad("lambda", "trade-off weights must be >= 0".into());
        }
        if self.gamma < 0.0 {
            return bad("gamma", "must be >= 0".into());
        }
        if !(self.margin_rpn > 0.0) || !(self.margin_rcnn > 0.0) {
            return bad("margin", "margins must be > 0".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0,1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(
                "warmup_epochs",
                format!("{} warm-up epochs leave no alignment epochs", self.warmup_epochs),
            );
        }
        if self.batch_scenes == 0 {
            return bad("batch_scenes", "must be >= 1".into());
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("dims", "model dimensions must be >= 1".into());
        }
        if self.graph == GraphChoice::Gaussian && !(self.sigma > 0.0) {
            return bad("sigma", format!("must be > 0 for gaussian graphs, got {}", self.sigma));
        }
        Ok(())
    }
}

/// A scene with its fixed per-scene relation graph and label/feature
/// matrices ready for training.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub raw: Array2<f64>,
    pub labels: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub graph: RelationGraph,
}

pub fn build_graph(boxes: &[BBox], choice: GraphChoice, sigma: f64) -> Result<RelationGraph> {
    match choice {
        GraphChoice::None => RelationGraph::identity(boxes.len()),
        GraphChoice::Iou => RelationGraph::iou(boxes),
        GraphChoice::Gaussian => RelationGraph::gaussian(boxes, sigma),
    }
}

pub fn prepare_scenes(
    scenes: &[Scene],
    choice: GraphChoice,
    sigma: f64,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|scene| {
            let n = scene.proposals.len();
            if n == 0 {
                return Err(Error::InvalidInput("scene without proposals".into()));
            }
            let dim = scene.proposals[0].raw_feature.len();
            let mut raw = Array2::zeros((n, dim));
            let mut labels = Vec::with_capacity(n);
            let mut boxes = Vec::with_capacity(n);
            for (i, p) in scene.proposals.iter().enumerate() {
                raw.row_mut(i).assign(&p.raw_feature);
                labels.push(p.true_class);
                boxes.push(p.bbox);
            }
            let graph = build_graph(&boxes, choice, sigma)?;
            Ok(PreparedScene {
                raw,
                labels,
                boxes,
                graph,
            })
        })
        .collect()
}

/// Loss values of one step (or epoch means).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub l_det: f64,
    pub l_det_stage1: f64,
    pub l_det_stage2: f64,
    pub l_da_rpn: f64,
    pub l_da_rcnn: f64,
    pub total: f64,
}

impl LossReport {
    fn zeros() -> Self {
        LossReport {
            l_det: 0.0,
            l_det_stage1: 0.0,
            l_det_stage2: 0.0,
            l_da_rpn: 0.0,
            l_da_rcnn: 0.0,
            total: 0.0,
        }
    }

    fn add(&mut self, other: &LossReport) {
        self.l_det += other.l_det;
        self.l_det_stage1 += other.l_det_stage1;
        self.l_det_stage2 += other.l_det_stage2;
        self.l_da_rpn += other.l_da_rpn;
        self.l_da_rcnn += other.l_da_rcnn;
        self.total += other.total;
    }

    fn scale(&mut self, s: f64) {
        self.l_det *= s;
        self.l_det_stage1 *= s;
        self.l_det_stage2 *= s;
        self.l_da_rpn *= s;
        self.l_da_rcnn *= s;
        self.total *= s;
    }
}

/// Gradients of one step, before the optimizer applies them.
pub struct StepGrads {
    pub report: LossReport,
    pub model: ModelGrads,
    pub transform_rpn: Option<Array2<f64>>,
    pub transform_rcnn: Option<Array2<f64>>,
}

pub struct Trainer {
    cfg: TrainConfig,
    classes: usize,
    model: ToyModel,
    velocity: ModelGrads,
    transform_rpn: Option<Array2<f64>>,
    transform_rcnn: Option<Array2<f64>>,
    vel_transform_rpn: Option<Array2<f64>>,
    vel_transform_rcnn: Option<Array2<f64>>,
    rng: ChaCha8Rng,
    epochs_done: usize,
}

fn random_transform(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // conventional graph-convolution weight init
    let std = (8.0 / dim as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((dim, dim), |_| dist.sample(rng))
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, raw_dim: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(streams::TRAINER << 32);
        let model = ToyModel::init(raw_dim, cfg.hidden_dim, cfg.embed_dim, classes, &mut rng)?;
        let velocity = ModelGrads::zeros_like(&model);
        let (transform_rpn, transform_rcnn, vel_rpn, vel_rcnn) = if cfg.learnable_transform {
            let d = cfg.embed_dim;
            (
                Some(random_transform(d, &mut rng)),
                Some(random_transform(d, &mut rng)),
                Some(Array2::zeros((d, d))),
                Some(Array2::zeros((d, d))),
            )
        } else {
            (None, None, None, None)
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            classes,
            model,
            velocity,
            transform_rpn,
            transform_rcnn,
            vel_transform_rpn: vel_rpn,
            vel_transform_rcnn: vel_rcnn,
            rng,
            epochs_done: 0,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut ToyModel {
        &mut self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn transforms(&self) -> (Option<&Array2<f64>>, Option<&Array2<f64>>) {
        (self.transform_rpn.as_ref(), self.transform_rcnn.as_ref())
    }

    pub fn set_transforms(&mut self, rpn: Option<Array2<f64>>, rcnn: Option<Array2<f64>>) {
        self.transform_rpn = rpn;
        self.transform_rcnn = rcnn;
    }

    /// Forward/backward for one batch pair; no parameter update.
    pub fn compute_step(
        &self,
        src: &[&PreparedScene],
        tgt: &[&PreparedScene],
    ) -> Result<StepGrads> {
        self.compute_step_weighted(src, tgt, self.cfg.lambda1, self.cfg.lambda2)
    }

    fn compute_step_weighted(
        &self,
        src: &[&PreparedScene],
        tgt: &[&PreparedScene],
        lambda1: f64,
        lambda2: f64,
    ) -> Result<StepGrads> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let cfg = &self.cfg;
        let src_raw = concat_raw(src);
        let tgt_raw = concat_raw(tgt);
        let src_labels: Vec<usize> = src.iter().flat_map(|s| s.labels.iter().copied()).collect();
        for &l in &src_labels {
            if l >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.classes,
                });
            }
        }
        let src_cache = self.model.forward(&src_raw)?;
        let tgt_cache = self.model.forward(&tgt_raw)?;

        // detection surrogate on labeled source proposals
        let binary: Vec<usize> = src_labels.iter().map(|&l| usize::from(l > 0)).collect();
        let (det1, mut dlogits1_src) = cross_entropy(&src_cache.logits1, &src_cache.probs1, &binary)?;
        let (det2, mut dlogits2_src) = cross_entropy(&src_cache.logits2, &src_cache.probs2, &src_labels)?;
        let l_det = det1 + det2;

        let n_src = src_raw.nrows();
        let n_tgt = tgt_raw.nrows();
        let d = cfg.embed_dim;
        let mut dfeat_src = Array2::zeros((n_src, d));
        let mut dfeat_tgt = Array2::zeros((n_tgt, d));
        let mut dlogits1_tgt = Array2::zeros((n_tgt, 2));
        let mut dlogits2_tgt = Array2::zeros((n_tgt, self.classes));
        let mut grad_t_rpn = None;
        let mut grad_t_rcnn = None;

        let mut l_da_rpn = 0.0;
        let mut l_da_rcnn = 0.0;

        if lambda1 > 0.0 {
            let out = self.stage_alignment(
                src,
                tgt,
                &src_cache,
                &tgt_cache,
                Stage::Rpn,
                cfg.margin_rpn,
                self.transform_rpn.as_ref(),
            )?;
            l_da_rpn = out.total;
            dfeat_src.scaled_add(lambda1, &out.grad_f_src);
            dfeat_tgt.scaled_add(lambda1, &out.grad_f_tgt);
            if let Some(gt) = out.grad_transform {
                grad_t_rpn = Some(gt * lambda1);
            }
            if let (Some(ps), Some(pt)) = (out.grad_p_src, out.grad_p_tgt) {
                dlogits1_src += &(softmax_backward(&src_cache.probs1, &ps) * lambda1);
                dlogits1_tgt += &(softmax_backward(&tgt_cache.probs1, &pt) * lambda1);
            }
        }
        if lambda2 > 0.0 {
            let out = self.stage_alignment(
                src,
                tgt,
                &src_cache,
                &tgt_cache,
                Stage::Rcnn,
                cfg.margin_rcnn,
                self.transform_rcnn.as_ref(),
            )?;
            l_da_rcnn = out.total;
            dfeat_src.scaled_add(lambda2, &out.grad_f_src);
            dfeat_tgt.scaled_add(lambda2, &out.grad_f_tgt);
            if let Some(gt) = out.grad_transform {
                grad_t_rcnn = Some(gt * lambda2);
            }
            if let (Some(ps), Some(pt)) = (out.grad_p_src, out.grad_p_tgt) {
                dlogits2_src += &(softmax_backward(&src_cache.probs2, &ps) * lambda2);
                dlogits2_tgt += &(softmax_backward(&tgt_cache.probs2, &pt) * lambda2);
            }
        }

        // heads: detection terms plus any confidence-path contributions
        let mut grads = ModelGrads::zeros_like(&self.model);
        let (du1, dc1, df1) = head_backward(&src_cache.features, &dlogits1_src, &self.model.u1);
        let (du2, dc2, df2) = head_backward(&src_cache.features, &dlogits2_src, &self.model.u2);
        grads.u1 = du1;
        grads.c1 = dc1;
        grads.u2 = du2;
        grads.c2 = dc2;
        dfeat_src += &df1;
        dfeat_src += &df2;
        let (du1t, dc1t, df1t) = head_backward(&tgt_cache.features, &dlogits1_tgt, &self.model.u1);
        let (du2t, dc2t, df2t) = head_backward(&tgt_cache.features, &dlogits2_tgt, &self.model.u2);
        grads.u1 += &du1t;
        grads.c1 += &dc1t;
        grads.u2 += &du2t;
        grads.c2 += &dc2t;
        dfeat_tgt += &df1t;
        dfeat_tgt += &df2t;

        let (dw1, db1, dw2, db2) = extractor_backward(&self.model, &src_raw, &src_cache, &dfeat_src);
        grads.w1 = dw1;
        grads.b1 = db1;
        grads.w2 = dw2;
        grads.b2 = db2;
        let (dw1t, db1t, dw2t, db2t) =
            extractor_backward(&self.model, &tgt_raw, &tgt_cache, &dfeat_tgt);
        grads.w1 += &dw1t;
        grads.b1 += &db1t;
        grads.w2 += &dw2t;
        grads.b2 += &db2t;

        let total = l_det + lambda1 * l_da_rpn + lambda2 * l_da_rcnn;
        Ok(StepGrads {
            report: LossReport {
                l_det,
                l_det_stage1: det1,
                l_det_stage2: det2,
                l_da_rpn,
                l_da_rcnn,
                total,
            },
            model: grads,
            transform_rpn: grad_t_rpn,
            transform_rcnn: grad_t_rcnn,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn stage_alignment(
        &self,
        src: &[&PreparedScene],
        tgt: &[&PreparedScene],
        src_cache: &ForwardCache,
        tgt_cache: &ForwardCache,
        stage: Stage,
        margin: f64,
        transform: Option<&Array2<f64>>,
    ) -> Result<StageAlignment> {
        let cfg = &self.cfg;
        let src_batches = slice_batches(src, src_cache, stage)?;
        let tgt_batches = slice_batches(tgt, tgt_cache, stage)?;
        let src_scenes: Vec<(&ProposalBatch, &RelationGraph)> = src_batches
            .iter()
            .zip(src.iter())
            .map(|(b, s)| (b, &s.graph))
            .collect();
        let tgt_scenes: Vec<(&ProposalBatch, &RelationGraph)> = tgt_batches
            .iter()
            .zip(tgt.iter())
            .map(|(b, s)| (b, &s.graph))
            .collect();
        let src_state = forward_domain(&src_scenes, transform, cfg.gamma, DomainTag::Source)?;
        let tgt_state = forward_domain(&tgt_scenes, transform, cfg.gamma, DomainTag::Target)?;
        if std::env::var("GPA_DEBUG_ALPHA").is_ok() && stage == Stage::Rcnn {
            eprintln!(
                "alpha src={:?} tgt={:?}",
                src_state
                    .protos
                    .weights()
                    .iter()
                    .map(|v| (v * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>(),
                tgt_state
                    .protos
                    .weights()
                    .iter()
                    .map(|v| (v * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            );
        }
        let (loss, g_src, g_tgt) =
            loss_and_proto_grads(&src_state.protos, &tgt_state.protos, margin)?;
        let src_back = backward_domain(&src_state, &g_src, transform, cfg.confidence_grad);
        let tgt_back = backward_domain(&tgt_state, &g_tgt, transform, cfg.confidence_grad);
        let grad_transform = match (src_back.grad_transform, tgt_back.grad_transform) {
            (Some(a), Some(b)) => Some(a + b),
            (one, other) => one.or(other),
        };
        Ok(StageAlignment {
            total: loss.total,
            grad_f_src: src_back.grad_features,
            grad_f_tgt: tgt_back.grad_features,
            grad_p_src: src_back.grad_confidences,
            grad_p_tgt: tgt_back.grad_confidences,
            grad_transform,
        })
    }

    /// One optimizer update from precomputed gradients.
    pub fn apply_step(&mut self, step: &StepGrads) {
        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        self.velocity.scale(mu);
        self.velocity.add_scaled(&step.model, 1.0);
        let v = &self.velocity;
        self.model.w1.scaled_add(-lr, &v.w1);
        self.model.b1.scaled_add(-lr, &v.b1);
        self.model.w2.scaled_add(-lr, &v.w2);
        self.model.b2.scaled_add(-lr, &v.b2);
        self.model.u1.scaled_add(-lr, &v.u1);
        self.model.c1.scaled_add(-lr, &v.c1);
        self.model.u2.scaled_add(-lr, &v.u2);
        self.model.c2.scaled_add(-lr, &v.c2);

        let update_transform =
            |param: &mut Option<Array2<f64>>,
             vel: &mut Option<Array2<f64>>,
             grad: &Option<Array2<f64>>| {
                if let (Some(p), Some(vm)) = (param.as_mut(), vel.as_mut()) {
                    vm.mapv_inplace(|x| x * mu);
                    if let Some(g) = grad {
                        vm.scaled_add(1.0, g);
                    }
                    p.scaled_add(-lr, vm);
                }
            };
        update_transform(
            &mut self.transform_rpn,
            &mut self.vel_transform_rpn,
            &step.transform_rpn,
        );
        update_transform(
            &mut self.transform_rcnn,
            &mut self.vel_transform_rcnn,
            &step.transform_rcnn,
        );
    }

    /// Compute and apply one step.
    pub fn two_stage_step(
        &mut self,
        src: &[&PreparedScene],
        tgt: &[&PreparedScene],
    ) -> Result<LossReport> {
        let step = self.compute_step(src, tgt)?;
        self.apply_step(&step);
        Ok(step.report)
    }

    /// One pass over the training scenes with reshuffled batches; returns
    /// mean losses. Alignment stays off for the configured warm-up epochs
    /// so prototype weights never see untrained confidences.
    pub fn train_epoch(
        &mut self,
        src_scenes: &[PreparedScene],
        tgt_scenes: &[PreparedScene],
    ) -> Result<LossReport> {
        let warming_up = self.epochs_done < self.cfg.warmup_epochs;
        let (l1, l2) = if warming_up {
            (0.0, 0.0)
        } else {
            (self.cfg.lambda1, self.cfg.lambda2)
        };
        let mut src_idx: Vec<usize> = (0..src_scenes.len()).collect();
        let mut tgt_idx: Vec<usize> = (0..tgt_scenes.len()).collect();
        src_idx.shuffle(&mut self.rng);
        tgt_idx.shuffle(&mut self.rng);
        let bs = self.cfg.batch_scenes;
        let steps = (src_idx.len() / bs).min(tgt_idx.len() / bs).max(1);
        let mut mean = LossReport::zeros();
        for step in 0..steps {
            let src_batch: Vec<&PreparedScene> = src_idx
                [step * bs..((step + 1) * bs).min(src_idx.len())]
                .iter()
                .map(|&i| &src_scenes[i])
                .collect();
            let tgt_batch: Vec<&PreparedScene> = tgt_idx
                [step * bs..((step + 1) * bs).min(tgt_idx.len())]
                .iter()
                .map(|&i| &tgt_scenes[i])
                .collect();
            let grads = self.compute_step_weighted(&src_batch, &tgt_batch, l1, l2)?;
            self.apply_step(&grads);
            mean.add(&grads.report);
        }
        mean.scale(1.0 / steps as f64);
        self.epochs_done += 1;
        Ok(mean)
    }
}

struct StageAlignment {
    total: f64,
    grad_f_src: Array2<f64>,
    grad_f_tgt: Array2<f64>,
    grad_p_src: Option<Array2<f64>>,
    grad_p_tgt: Option<Array2<f64>>,
    grad_transform: Option<Array2<f64>>,
}

fn concat_raw(scenes: &[&PreparedScene]) -> Array2<f64> {
    let views: Vec<_> = scenes.iter().map(|s| s.raw.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("scenes share raw dim")
}

/// Cut the concatenated forward results back into per-scene proposal
/// batches for one stage.
fn slice_batches(
    scenes: &[&PreparedScene],
    cache: &ForwardCache,
    stage: Stage,
) -> Result<Vec<ProposalBatch>> {
    let mut out = Vec::with_capacity(scenes.len());
    let mut row = 0;
    for scene in scenes {
        let n = scene.raw.nrows();
        let features = cache.features.slice(s![row..row + n, ..]).to_owned();
        let confidences = match stage {
            Stage::Rpn => cache.probs1.slice(s![row..row + n, ..]).to_owned(),
            Stage::Rcnn => cache.probs2.slice(s![row..row + n, ..]).to_owned(),
        };
        out.push(ProposalBatch::new(
            scene.boxes.clone(),
            features,
            confidences,
            stage,
        )?);
        row += n;
    }
    Ok(out)
}

/// Evaluation metrics of one model against held-out scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub src_accuracy: f64,
    pub tgt_accuracy: f64,
    /// Indexed by class id (0 = background); NaN when a class never
    /// appears in the evaluation scenes.
    pub per_class_tgt_accuracy: Vec<f64>,
    /// Distance between source and target prototypes per class; NaN when
    /// either side is absent.
    pub prototype_distance: Vec<f64>,
    /// Distance between the target domain's stage-1 background and
    /// foreground prototypes.
    pub stage1_separation: f64,
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

fn domain_accuracy(model: &ToyModel, scenes: &[PreparedScene]) -> Result<(f64, Vec<f64>)> {
    let classes = model.num_classes();
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for scene in scenes {
        let cache = model.forward(&scene.raw)?;
        for (i, &label) in scene.labels.iter().enumerate() {
            let pred = argmax(cache.probs2.row(i));
            total[label] += 1;
            if pred == label {
                correct[label] += 1;
            }
        }
    }
    let all_total: usize = total.iter().sum();
    let all_correct: usize = correct.iter().sum();
    let overall = all_correct as f64 / all_total as f64;
    let per_class = (0..classes)
        .map(|k| {
            if total[k] == 0 {
                f64::NAN
            } else {
                correct[k] as f64 / total[k] as f64
            }
        })
        .collect();
    Ok((overall, per_class))
}

fn domain_prototypes(
    model: &ToyModel,
    scenes: &[PreparedScene],
    stage: Stage,
    gamma: f64,
    domain: DomainTag,
) -> Result<DomainState> {
    let mut batches = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let cache = model.forward(&scene.raw)?;
        let confidences = match stage {
            Stage::Rpn => cache.probs1,
            Stage::Rcnn => cache.probs2,
        };
        batches.push(ProposalBatch::new(
            scene.boxes.clone(),
            cache.features,
            confidences,
            stage,
        )?);
    }
    let pairs: Vec<(&ProposalBatch, &RelationGraph)> = batches
        .iter()
        .zip(scenes.iter())
        .map(|(b, s)| (b, &s.graph))
        .collect();
    // measurement path: parameter-free aggregation
    forward_domain(&pairs, None, gamma, domain)
}

/// Classification accuracy, per-class prototype distances and stage-1
/// separation on held-out scenes of both domains.
pub fn evaluate(
    model: &ToyModel,
    cfg: &TrainConfig,
    src_scenes: &[PreparedScene],
    tgt_scenes: &[PreparedScene],
) -> Result<MetricsReport> {
    if src_scenes.is_empty() || tgt_scenes.is_empty() {
        return Err(Error::InvalidInput("evaluation needs scenes from both domains".into()));
    }
    let (src_accuracy, _) = domain_accuracy(model, src_scenes)?;
    let (tgt_accuracy, per_class_tgt_accuracy) = domain_accuracy(model, tgt_scenes)?;

    let src_state = domain_prototypes(model, src_scenes, Stage::Rcnn, cfg.gamma, DomainTag::Source)?;
    let tgt_state = domain_prototypes(model, tgt_scenes, Stage::Rcnn, cfg.gamma, DomainTag::Target)?;
    let classes = model.num_classes();
    let mut prototype_distance = Vec::with_capacity(classes);
    for k in 0..classes {
        if src_state.protos.is_present(k) && tgt_state.protos.is_present(k) {
            let diff = &src_state.protos.prototype(k) - &tgt_state.protos.prototype(k);
            prototype_distance.push(diff.dot(&diff).sqrt());
        } else {
            prototype_distance.push(f64::NAN);
        }
    }

    let stage1 = domain_prototypes(model, tgt_scenes, Stage::Rpn, cfg.gamma, DomainTag::Target)?;
    let stage1_separation = if stage1.protos.is_present(0) && stage1.protos.is_present(1) {
        let diff = &stage1.protos.prototype(0) - &stage1.protos.prototype(1);
        diff.dot(&diff).sqrt()
    } else {
        f64::NAN
    };

    Ok(MetricsReport {
        src_accuracy,
        tgt_accuracy,
        per_class_tgt_accuracy,
        prototype_distance,
        stage1_separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_split, AppearanceMode, ClassAppearance, DomainSpec};
    use ndarray::Array1;

    fn tiny_spec(classes: usize) -> DomainSpec {
        let mode = |seed: f64| AppearanceMode {
            mean: Array1::from_shape_fn(4, |i| seed + i as f64),
            scale: 0.2,
        };
        DomainSpec {
            raw_dim: 4,
            foreground: (0..classes)
                .map(|k| ClassAppearance {
                    modes: vec![mode(3.0 * (k + 1) as f64)],
                })
                .collect(),
            background: ClassAppearance {
                modes: vec![mode(-4.0)],
            },
            shift: None,
            frequencies: vec![1.0 / classes as f64; classes],
            scene_extent: 48.0,
            instance_size: (6.0, 12.0),
            instances_per_scene: (2, 3),
            proposals_per_instance: (1, 2),
            background_proposals: 2,
            jitter: 0.2,
            feature_noise: 0.1,
        }
    }

    fn tiny_setup(seed: u64) -> (TrainConfig, Vec<PreparedScene>, Vec<PreparedScene>) {
        let spec = tiny_spec(3);
        let src = generate_split(&spec, 6, seed, 0).unwrap();
        let tgt = generate_split(&spec, 6, seed, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            embed_dim: 4,
            hidden_dim: 6,
            batch_scenes: 2,
            seed,
            ..TrainConfig::default()
        };
        let srcp = prepare_scenes(&src, cfg.graph, cfg.sigma).unwrap();
        let tgtp = prepare_scenes(&tgt, cfg.graph, cfg.sigma).unwrap();
        (cfg, srcp, tgtp)
    }

    #[test]
    fn objective_is_additive() {
        let (mut cfg, src, tgt) = tiny_setup(3);
        cfg.lambda1 = 0.7;
        cfg.lambda2 = 1.3;
        let trainer = Trainer::new(&cfg, 4, 4).unwrap();
        let batch_s: Vec<&PreparedScene> = src.iter().collect();
        let batch_t: Vec<&PreparedScene> = tgt.iter().collect();
        let step = trainer.compute_step(&batch_s, &batch_t).unwrap();
        let r = step.report;
        let recomposed = r.l_det + cfg.lambda1 * r.l_da_rpn + cfg.lambda2 * r.l_da_rcnn;
        assert!((r.total - recomposed).abs() <= 1e-12);
        assert!((r.l_det - (r.l_det_stage1 + r.l_det_stage2)).abs() <= 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (cfg, src, tgt) = tiny_setup(5);
            let mut trainer = Trainer::new(&cfg, 4, 4).unwrap();
            let mut reports = Vec::new();
            for _ in 0..cfg.epochs {
                reports.push(trainer.train_epoch(&src, &tgt).unwrap());
            }
            (trainer.model().flatten(), reports)
        };
        let (params_a, reports_a) = run();
        let (params_b, reports_b) = run();
        assert_eq!(params_a, params_b);
        for (a, b) in reports_a.iter().zip(&reports_b) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn zero_lambdas_match_pure_source_training() {
        let (mut cfg, src, tgt) = tiny_setup(7);
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        let mut trainer = Trainer::new(&cfg, 4, 4).unwrap();
        for _ in 0..cfg.epochs {
            trainer.train_epoch(&src, &tgt).unwrap();
        }

        // independent source-only oracle: detection loss + momentum SGD,
        // consuming the random stream exactly like the trainer does
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(streams::TRAINER << 32);
        let mut model = ToyModel::init(4, cfg.hidden_dim, cfg.embed_dim, 4, &mut rng).unwrap();
        let mut velocity = ModelGrads::zeros_like(&model);
        for _ in 0..cfg.epochs {
            let mut src_idx: Vec<usize> = (0..src.len()).collect();
            let mut tgt_idx: Vec<usize> = (0..tgt.len()).collect();
            src_idx.shuffle(&mut rng);
            tgt_idx.shuffle(&mut rng);
            let bs = cfg.batch_scenes;
            let steps = (src_idx.len() / bs).min(tgt_idx.len() / bs).max(1);
            for step in 0..steps {
                let scenes: Vec<&PreparedScene> = src_idx
                    [step * bs..((step + 1) * bs).min(src_idx.len())]
                    .iter()
                    .map(|&i| &src[i])
                    .collect();
                let raw = concat_raw(&scenes);
                let labels: Vec<usize> =
                    scenes.iter().flat_map(|s| s.labels.iter().copied()).collect();
                let (_, grads) =
                    crate::model::detection_surrogate_loss(&model, &raw, &labels).unwrap();
                velocity.scale(cfg.momentum);
                velocity.add_scaled(&grads, 1.0);
                model.w1.scaled_add(-cfg.learning_rate, &velocity.w1);
                model.b1.scaled_add(-cfg.learning_rate, &velocity.b1);
                model.w2.scaled_add(-cfg.learning_rate, &velocity.w2);
                model.b2.scaled_add(-cfg.learning_rate, &velocity.b2);
                model.u1.scaled_add(-cfg.learning_rate, &velocity.u1);
                model.c1.scaled_add(-cfg.learning_rate, &velocity.c1);
                model.u2.scaled_add(-cfg.learning_rate, &velocity.u2);
                model.c2.scaled_add(-cfg.learning_rate, &velocity.c2);
            }
        }
        assert_eq!(trainer.model().flatten(), model.flatten());
    }

    #[test]
    fn evaluate_reports_chance_level_for_random_models() {
        // balanced labels over 4 classes: expected accuracy 1/4 whatever
        // the (random, label-independent) model does
        let mut scenes = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        use rand::Rng;
        for _ in 0..16 {
            let n = 16;
            let raw = Array2::from_shape_fn((n, 4), |_| rng.random_range(-2.0..2.0));
            let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
            let boxes: Vec<BBox> = (0..n)
                .map(|i| {
                    BBox::new(8.0 * i as f64, 0.0, 8.0 * i as f64 + 6.0, 6.0).unwrap()
                })
                .collect();
            let graph = RelationGraph::iou(&boxes).unwrap();
            scenes.push(PreparedScene {
                raw,
                labels,
                boxes,
                graph,
            });
        }
        let cfg = TrainConfig {
            embed_dim: 4,
            hidden_dim: 6,
            ..TrainConfig::default()
        };
        let mut mean_acc = 0.0;
        let trials = 30;
        for t in 0..trials {
            let mut mrng = ChaCha8Rng::seed_from_u64(200 + t);
            let model = ToyModel::init(4, 6, 4, 4, &mut mrng).unwrap();
            let report = evaluate(&model, &cfg, &scenes, &scenes).unwrap();
            mean_acc += report.tgt_accuracy;
        }
        mean_acc /= trials as f64;
        assert!(
            (mean_acc - 0.25).abs() < 0.05,
            "chance-level accuracy drifted: {mean_acc}"
        );
    }

    #[test]
    fn evaluate_perfect_model_scores_one() {
        // raw features are one-hot class indicators; build a model whose
        // stage-2 head reads them straight through
        let classes = 3;
        let mut scenes = Vec::new();
        for s in 0..3 {
            let n = classes;
            let mut raw = Array2::zeros((n, classes));
            let mut labels = Vec::new();
            let mut boxes = Vec::new();
            for i in 0..n {
                raw[[i, i]] = 3.0;
                labels.push(i);
                boxes.push(
                    BBox::new(10.0 * i as f64 + s as f64, 0.0, 10.0 * i as f64 + 6.0, 6.0)
                        .unwrap(),
                );
            }
            let graph = RelationGraph::iou(&boxes).unwrap();
            scenes.push(PreparedScene {
                raw,
                labels,
                boxes,
                graph,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = ToyModel::init(classes, classes, classes, classes, &mut rng).unwrap();
        model.w1 = Array2::eye(classes);
        model.b1.fill(0.0);
        model.w2 = Array2::eye(classes);
        model.b2.fill(0.0);
        model.u2 = Array2::eye(classes) * 50.0;
        model.c2.fill(0.0);
        // stage-1: foreground iff any feature fires
        model.u1.fill(0.0);
        for i in 0..classes {
            model.u1[[i, 1]] = 10.0;
        }
        model.c1.fill(0.0);
        let cfg = TrainConfig {
            embed_dim: classes,
            hidden_dim: classes,
            ..TrainConfig::default()
        };
        let report = evaluate(&model, &cfg, &scenes, &scenes).unwrap();
        assert_eq!(report.tgt_accuracy, 1.0);
        assert_eq!(report.src_accuracy, 1.0);
        // identical domains: prototype distances all zero
        for (k, d) in report.prototype_distance.iter().enumerate() {
            if !d.is_nan() {
                assert!(*d < 1e-12, "class {k} distance {d}");
            }
        }
    }
}
