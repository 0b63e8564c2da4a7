//! The full detector: backbone taps, cascade RPN, RoI head.

use serde::{Deserialize, Serialize};

use crate::backbone::{image_batch, Backbone, BackboneConfig};
use crate::cascade::{
    assign_labels, inference_active, mu_mask, mu_masks, propose, sample_stage_batch, Assignment,
    CascadeConfig, CascadeOutput, CascadeRpn, Label,
};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode, generate_anchors, nms, AnchorGrid, BBox, BoxDelta};
use crate::losses::{cascade_cls_terms, detection_loss, loc_term, sum_terms, LossBreakdown, StageWeights};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::roi::{roi_loss, roi_pool, sample_rois, RoiConfig, RoiHead, RoiSamples};
use crate::tensor::{Tape, Tensor, Var};

/// The three model sections of a run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub cascade: CascadeConfig,
    pub roi: RoiConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// 1-based foreground class.
    pub class: usize,
    pub score: f64,
}

/// Value-level decisions of one training step. Everything here is a
/// constant for backward.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub assignment: Assignment,
    /// Training masks per stage, plus one trailing entry for anchors that
    /// survive every stage.
    pub mu: Vec<Vec<bool>>,
    pub batches: Vec<Vec<usize>>,
    pub rois: RoiSamples,
}

/// Per-stage training diagnostics for one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageStats {
    pub active: Vec<usize>,
    pub batch: Vec<usize>,
    /// Fraction of a stage's active anchors that it rejects for later stages.
    pub rejection: Vec<f64>,
    /// Mean chained true-class score over each stage's active anchors.
    pub mean_true_score: Vec<f64>,
    /// Fraction of final-stage active anchors with true-class score < 0.5.
    pub hard_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub stats: StageStats,
    pub proposals: usize,
}

/// Output of an inference pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub chained: Vec<Vec<[f64; 2]>>,
    pub proposals: usize,
}

#[derive(Debug, Clone)]
pub struct Detector {
    cfg: ModelConfig,
    backbone: Backbone,
    cascade: CascadeRpn,
    roi: RoiHead,
    anchors: AnchorGrid,
    weights: StageWeights,
}

impl Detector {
    /// Builds the model and registers its parameters in `store`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let b = &cfg.backbone;
        let backbone = Backbone::new(b, store, rng)?;
        let cascade = CascadeRpn::new(&cfg.cascade, b.channels, store, rng)?;
        let roi = RoiHead::new(&cfg.roi, b.channels, store, rng)?;
        let s = b.tap_size();
        let anchors = generate_anchors(
            s,
            s,
            b.stride_at_tap,
            &cfg.cascade.anchor_scales,
            &cfg.cascade.anchor_ratios,
        )?;
        Ok(Detector {
            cfg: cfg.clone(),
            backbone,
            cascade,
            roi,
            anchors,
            weights: StageWeights::new(cfg.cascade.stages),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    fn size(&self) -> f64 {
        self.cfg.backbone.input_size as f64
    }

    fn stride(&self) -> f64 {
        self.cfg.backbone.stride_at_tap as f64
    }

    fn graph(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<CascadeOutput> {
        // Pixel mean subtraction.
        let mut x = image_batch(image)?;
        x.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let x = tape.constant(x);
        let taps = self.backbone.forward(tape, p, x)?;
        self.cascade.forward(tape, p, &taps)
    }

    /// Assignment, rejection masks, stage batches and RoI samples from the
    /// current forward values.
    pub fn plan(
        &self,
        tape: &Tape,
        out: &CascadeOutput,
        gts: &[(BBox, usize)],
        rng: &mut Rng,
    ) -> Result<StepPlan> {
        let cfg = &self.cfg.cascade;
        let (w, h) = (self.size(), self.size());
        let boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();
        let assignment = assign_labels(&self.anchors, &boxes, cfg, w, h);
        let chained = out.chained_scores(tape);
        let mut mu = mu_masks(&chained, &assignment.labels, cfg.r);
        mu.push(mu_mask(&chained, &assignment.labels, cfg.r));
        let batches = cfg
            .batches()
            .iter()
            .enumerate()
            .map(|(t, &b)| sample_stage_batch(&mu[t], &assignment.labels, b, cfg.pos_fraction, rng))
            .collect();
        let proposals = propose(&chained, &out.delta_values(tape), &self.anchors, cfg, w, h)?;
        let mut candidates = proposals.boxes;
        candidates.extend(boxes);
        let rois = sample_rois(&candidates, gts, &self.cfg.roi, rng);
        Ok(StepPlan {
            assignment,
            mu,
            batches,
            rois,
        })
    }

    /// Differentiable loss terms for a fixed plan:
    /// `(per-stage cls, rpn loc, roi cls, roi loc)`.
    pub fn loss_terms(
        &self,
        tape: &mut Tape,
        p: &Bound,
        out: &CascadeOutput,
        plan: &StepPlan,
    ) -> Result<(Vec<Var>, Var, Var, Var)> {
        let scores: Vec<Var> = out.stages.iter().map(|s| s.s).collect();
        let t = scores.len();
        let cls = cascade_cls_terms(
            tape,
            &scores,
            &plan.batches,
            &plan.assignment.labels,
            &plan.mu[..t],
            &self.weights,
        )?;
        let loc = loc_term(tape, out.deltas, &plan.batches[t - 1], &plan.assignment, &plan.mu[t - 1])?;
        let (roi_cls, roi_loc) = if plan.rois.is_empty() {
            let z = tape.constant(Tensor::scalar(0.0));
            (z, z)
        } else {
            let feats = out.stages[t - 1].h;
            let pooled = roi_pool(tape, feats, &plan.rois.boxes, self.stride(), self.cfg.roi.pool_size)?;
            let (probs, deltas) = self.roi.forward(tape, p, pooled)?;
            roi_loss(tape, probs, deltas, &plan.rois)?
        };
        Ok((cls, loc, roi_cls, roi_loc))
    }

    /// Forward, loss and backward for one image. Gradients are added to
    /// `store`'s grad buffers; the caller zeroes them and steps.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        image: &Tensor,
        gts: &[(BBox, usize)],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let out = self.graph(&mut tape, &p, image)?;
        let plan = self.plan(&tape, &out, gts, rng)?;
        let (cls, loc, roi_cls, roi_loc) = self.loss_terms(&mut tape, &p, &out, &plan)?;
        let value = |v: Var| tape.value(v).item();
        let loss = detection_loss(
            cls.iter().map(|&v| value(v)).collect(),
            value(loc),
            value(roi_cls),
            value(roi_loc),
        )?;
        let mut all = cls;
        all.extend([loc, roi_cls, roi_loc]);
        let root = sum_terms(&mut tape, &all)?;
        tape.backward(root)?;
        store.accumulate_grads(&tape, &p);
        let stats = stage_stats(&out.chained_scores(&tape), &plan);
        Ok(StepReport {
            loss,
            stats,
            proposals: plan.rois.len(),
        })
    }

    /// Inference on one `[3, N, N]` image.
    /// `(chained, raw)` per-stage scores for one image, without proposals.
    pub fn stage_scores(
        &self,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<(Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 2]>>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = self.graph(&mut tape, &p, image)?;
        Ok((out.chained_scores(&tape), out.raw_scores(&tape)))
    }

    pub fn detect(&self, store: &ParamStore, image: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = self.graph(&mut tape, &p, image)?;
        let (w, h) = (self.size(), self.size());
        let chained = out.chained_scores(&tape);
        let proposals = propose(&chained, &out.delta_values(&tape), &self.anchors, &self.cfg.cascade, w, h)?;
        let mut detections = Vec::new();
        if !proposals.is_empty() {
            let feats = out.stages.last().expect("stages").h;
            let pooled = roi_pool(&mut tape, feats, &proposals.boxes, self.stride(), self.cfg.roi.pool_size)?;
            let (probs, deltas) = self.roi.forward(&mut tape, &p, pooled)?;
            detections = self.decode_detections(&proposals.boxes, tape.value(probs), tape.value(deltas))?;
        }
        Ok(Inference {
            detections,
            chained,
            proposals: proposals.len(),
        })
    }

    fn decode_detections(&self, boxes: &[BBox], probs: &Tensor, deltas: &Tensor) -> Result<Vec<Detection>> {
        let rc = &self.cfg.roi;
        let k = rc.num_classes + 1;
        let (w, h) = (self.size(), self.size());
        let (pd, dd) = (probs.data(), deltas.data());
        let mut all = Vec::new();
        for class in 1..k {
            let mut cand = Vec::new();
            let mut scores = Vec::new();
            for (i, b) in boxes.iter().enumerate() {
                let score = pd[i * k + class];
                if score < rc.score_thresh {
                    continue;
                }
                let o = i * 4 * k + 4 * class;
                let d = BoxDelta::from_array([dd[o], dd[o + 1], dd[o + 2], dd[o + 3]]);
                let bb = clip_box(&decode(b, &d)?, w, h);
                if bb.area() > 0.0 {
                    cand.push(bb);
                    scores.push(score);
                }
            }
            for i in nms(&cand, &scores, rc.nms_iou)? {
                all.push(Detection {
                    bbox: cand[i],
                    class,
                    score: scores[i],
                });
            }
        }
        // Stable sort keeps class order among equal scores.
        all.sort_by(|a, b| b.score.total_cmp(&a.score));
        all.truncate(rc.max_detections);
        Ok(all)
    }

    /// Total detection loss for a plan computed at the point's own values,
    /// with every parameter as a leaf. Used by the gradient suite.
    pub fn loss_for_check(
        &self,
        tape: &mut Tape,
        params: &[Var],
        image: &Tensor,
        plan: &StepPlan,
    ) -> Result<Var> {
        let p = Bound::from_vars(params.to_vec());
        let out = self.graph(tape, &p, image)?;
        let (mut all, loc, rc, rl) = self.loss_terms(tape, &p, &out, plan)?;
        all.extend([loc, rc, rl]);
        sum_terms(tape, &all)
    }

    /// Computes a step plan without taking a gradient.
    pub fn plan_for(
        &self,
        store: &ParamStore,
        image: &Tensor,
        gts: &[(BBox, usize)],
        rng: &mut Rng,
    ) -> Result<StepPlan> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = self.graph(&mut tape, &p, image)?;
        self.plan(&tape, &out, gts, rng)
    }
}

/// Diagnostics from chained score values and a step plan.
pub fn stage_stats(chained: &[Vec<[f64; 2]>], plan: &StepPlan) -> StageStats {
    let labels = &plan.assignment.labels;
    let t = chained.len();
    let mut st = StageStats::default();
    for i in 0..t {
        let active: Vec<usize> = (0..labels.len()).filter(|&a| plan.mu[i][a]).collect();
        let next = active.iter().filter(|&&a| plan.mu[i + 1][a]).count();
        let n = active.len();
        st.active.push(n);
        st.batch.push(plan.batches[i].len());
        st.rejection.push(if n == 0 { 0.0 } else { (n - next) as f64 / n as f64 });
        let true_scores: Vec<f64> = active
            .iter()
            .filter_map(|&a| labels[a].class().map(|k| chained[i][a][k]))
            .collect();
        st.mean_true_score.push(mean(&true_scores));
        if i + 1 == t {
            st.hard_fraction = if true_scores.is_empty() {
                0.0
            } else {
                true_scores.iter().filter(|&&s| s < 0.5).count() as f64 / true_scores.len() as f64
            };
        }
    }
    st
}

/// Inference-time rejection rate per stage: the share of anchors entering
/// a stage whose background score there reaches `r`.
pub fn inference_rejection(chained: &[Vec<[f64; 2]>], r: f64) -> Vec<f64> {
    let act = inference_active(chained, r);
    (0..chained.len())
        .map(|t| {
            let inn = act[t].iter().filter(|&&x| x).count();
            let out = act[t + 1].iter().filter(|&&x| x).count();
            if inn == 0 {
                0.0
            } else {
                (inn - out) as f64 / inn as f64
            }
        })
        .collect()
}

/// `(hard, total)` over final-stage training-active anchors, where hard
/// means a chained true-class score below 0.5.
pub fn hard_counts(chained: &[Vec<[f64; 2]>], labels: &[Label], r: f64) -> (usize, usize) {
    let Some(last) = chained.last() else {
        return (0, 0);
    };
    let active = mu_mask(&chained[..chained.len() - 1], labels, r);
    let mut hard = 0;
    let mut total = 0;
    for a in (0..labels.len()).filter(|&a| active[a]) {
        if let Some(k) = labels[a].class() {
            total += 1;
            if last[a][k] < 0.5 {
                hard += 1;
            }
        }
    }
    (hard, total)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Rejects models whose input size does not match an image.
pub fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    let n = cfg.backbone.input_size;
    if image.shape() != [3, n, n] {
        return Err(Error::Shape(format!(
            "model expects [3, {n}, {n}] images, got {:?}",
            image.shape()
        )));
    }
    Ok(())
}
