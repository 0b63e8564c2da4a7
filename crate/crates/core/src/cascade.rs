//! Cascade region proposal network.
//!
//! `T` stages run over the last `T` backbone taps. Stage `t` fuses its tap
//! with the previous fused features (feature chain), scores every anchor as
//! background/object, and blends those scores with the previous stage's
//! chained scores (score chain). While training, an anchor whose chained
//! true-class score reached the reject threshold `r` at an earlier stage is
//! excluded from every later stage. The final stage also regresses box
//! deltas.

use serde::{Deserialize, Serialize};

use crate::backbone::TapSet;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode, encode, iou, nms, AnchorGrid, BBox, BoxDelta};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Number of backbone taps; also the largest supported stage count.
pub const MAX_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Stage count `T`; stages use the last `T` taps.
    #[serde(alias = "T")]
    pub stages: usize,
    /// Reject threshold.
    pub r: f64,
    pub lambda_f: f64,
    pub lambda_p: f64,
    /// Per-stage training batch sizes. When longer than `stages`, the last
    /// `stages` entries apply.
    pub stage_batches: Vec<usize>,
    pub pos_fraction: f64,
    pub assign_pos_iou: f64,
    pub assign_neg_iou: f64,
    pub proposal_nms_iou: f64,
    pub proposal_topk: usize,
    pub feature_chain: bool,
    pub score_chain: bool,
    /// Width of each stage's 3×3 head convolution.
    pub head_channels: usize,
    pub head_init_std: f64,
    /// Background probability every score head starts at; 0.5 means zero
    /// bias.
    pub score_prior: f64,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 4,
            r: 0.99,
            lambda_f: 0.1,
            lambda_p: 0.9,
            stage_batches: vec![1024, 768, 512, 256],
            pos_fraction: 0.5,
            assign_pos_iou: 0.7,
            assign_neg_iou: 0.3,
            proposal_nms_iou: 0.7,
            proposal_topk: 300,
            feature_chain: true,
            score_chain: true,
            head_channels: 32,
            head_init_std: 0.01,
            score_prior: 0.5,
            anchor_scales: vec![1.0, 2.0, 4.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stages == 0 || self.stages > MAX_STAGES {
            return fail(format!("cascade stages must be in 1..=4, got {}", self.stages));
        }
        if (self.lambda_f + self.lambda_p - 1.0).abs() > 1e-12 {
            return fail(format!(
                "lambda_f + lambda_p must equal 1, got {} + {}",
                self.lambda_f, self.lambda_p
            ));
        }
        if !(self.lambda_f >= 0.0 && self.lambda_p >= 0.0) {
            return fail("lambda_f and lambda_p must be nonnegative".into());
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return fail(format!("reject threshold r must be in (0, 1], got {}", self.r));
        }
        if self.stage_batches.len() < self.stages {
            return fail(format!(
                "stage_batches has {} entries for {} stages",
                self.stage_batches.len(),
                self.stages
            ));
        }
        let b = self.batches();
        if b.contains(&0) || b.windows(2).any(|w| w[1] > w[0]) {
            return fail(format!("stage_batches must be positive and nonincreasing, got {b:?}"));
        }
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return fail("pos_fraction must be in [0, 1]".into());
        }
        if !(self.assign_neg_iou <= self.assign_pos_iou) {
            return fail("assign_neg_iou must not exceed assign_pos_iou".into());
        }
        if !(self.proposal_nms_iou > 0.0 && self.proposal_nms_iou <= 1.0) {
            return fail("proposal_nms_iou must be in (0, 1]".into());
        }
        if self.head_channels == 0 || self.proposal_topk == 0 {
            return fail("head_channels and proposal_topk must be >= 1".into());
        }
        if !(self.score_prior > 0.0 && self.score_prior < 1.0) {
            return fail(format!("score_prior must be in (0, 1), got {}", self.score_prior));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return fail("anchor scales and ratios must be nonempty".into());
        }
        Ok(())
    }

    /// Batch sizes of the active stages.
    pub fn batches(&self) -> &[usize] {
        &self.stage_batches[self.stage_batches.len() - self.stages..]
    }

    /// 1-based tap index used by each active stage.
    pub fn taps(&self) -> Vec<usize> {
        (MAX_STAGES - self.stages + 1..=MAX_STAGES).collect()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Background,
    Object,
    Ignore,
}

impl Label {
    /// Class index `k*` for labeled anchors.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Background => Some(0),
            Label::Object => Some(1),
            Label::Ignore => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<Label>,
    /// Regression target, present for positives only.
    pub targets: Vec<Option<BoxDelta>>,
    pub matched_gt: Vec<Option<usize>>,
}

impl Assignment {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Labels anchors against ground truth.
///
/// Positive: IoU ≥ `assign_pos_iou`, or the best in-image anchor for some
/// ground-truth box (all ties). Background: max IoU < `assign_neg_iou`.
/// Everything else, and every anchor crossing the image border, is ignored.
pub fn assign_labels(
    anchors: &AnchorGrid,
    gts: &[BBox],
    cfg: &CascadeConfig,
    img_w: f64,
    img_h: f64,
) -> Assignment {
    let n = anchors.len();
    let inside = anchors.inside_mask(img_w, img_h);
    let mut labels = vec![Label::Ignore; n];
    let mut matched_gt = vec![None; n];
    let overlaps: Vec<Vec<f64>> = anchors
        .boxes
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect();

    for a in 0..n {
        if !inside[a] {
            continue;
        }
        let (best_gt, best) = argmax(&overlaps[a]);
        if best >= cfg.assign_pos_iou {
            labels[a] = Label::Object;
            matched_gt[a] = best_gt;
        } else if best < cfg.assign_neg_iou {
            labels[a] = Label::Background;
        }
    }
    for g in 0..gts.len() {
        let best = (0..n)
            .filter(|&a| inside[a])
            .map(|a| overlaps[a][g])
            .fold(0.0f64, f64::max);
        if best <= 0.0 {
            continue;
        }
        for a in (0..n).filter(|&a| inside[a] && overlaps[a][g] == best) {
            if labels[a] != Label::Object {
                labels[a] = Label::Object;
                matched_gt[a] = Some(g);
            }
        }
    }
    let targets = (0..n)
        .map(|a| match (labels[a], matched_gt[a]) {
            (Label::Object, Some(g)) => encode(&gts[g], &anchors.boxes[a]).ok(),
            _ => None,
        })
        .collect();
    Assignment {
        labels,
        targets,
        matched_gt,
    }
}

fn argmax(v: &[f64]) -> (Option<usize>, f64) {
    let mut best = (None, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (Some(i), x);
        }
    }
    if best.0.is_none() {
        best.1 = 0.0;
    }
    best
}

/// Fused features for one stage: the tap itself at the first stage, else
/// `lambda_f · h_prev + lambda_p · f_t`.
pub fn feature_chain(
    tape: &mut Tape,
    h_prev: Option<Var>,
    f_t: Var,
    cfg: &CascadeConfig,
) -> Result<Var> {
    match h_prev {
        Some(h) if cfg.feature_chain => tape.add_scaled(h, cfg.lambda_f, f_t, cfg.lambda_p),
        _ => Ok(f_t),
    }
}

/// Chained scores: `c_1` at the first stage, else
/// `lambda_f · s_prev + lambda_p · c_t`.
pub fn score_chain(
    tape: &mut Tape,
    s_prev: Option<Var>,
    c_t: Var,
    cfg: &CascadeConfig,
) -> Result<Var> {
    match s_prev {
        Some(s) if cfg.score_chain => tape.add_scaled(s, cfg.lambda_f, c_t, cfg.lambda_p),
        _ => Ok(c_t),
    }
}

/// Per-anchor `(background, object)` pairs of a `[A, 2]` score variable.
pub fn score_values(tape: &Tape, scores: Var) -> Vec<[f64; 2]> {
    tape.value(scores)
        .data()
        .chunks_exact(2)
        .map(|c| [c[0], c[1]])
        .collect()
}

/// Training mask for the stage after `prev`: an anchor stays active only
/// while every earlier stage scored its true class below `r`. The first
/// stage (`prev` empty) keeps every labeled anchor. Ignored anchors are
/// never active.
pub fn mu_mask(prev: &[Vec<[f64; 2]>], labels: &[Label], r: f64) -> Vec<bool> {
    labels
        .iter()
        .enumerate()
        .map(|(a, l)| match l.class() {
            None => false,
            Some(k) => prev.iter().all(|s| s[a][k] < r),
        })
        .collect()
}

/// `mu_mask` for every stage at once.
pub fn mu_masks(scores: &[Vec<[f64; 2]>], labels: &[Label], r: f64) -> Vec<Vec<bool>> {
    (0..scores.len())
        .map(|t| mu_mask(&scores[..t], labels, r))
        .collect()
}

/// Inference-time activity (true class unknown): an anchor is dropped once
/// any earlier stage's chained background score reaches `r`. Entry `T`
/// (one past the last stage) marks the final survivors.
pub fn inference_active(scores: &[Vec<[f64; 2]>], r: f64) -> Vec<Vec<bool>> {
    let n = scores.first().map_or(0, Vec::len);
    (0..=scores.len())
        .map(|t| (0..n).map(|a| scores[..t].iter().all(|s| s[a][0] < r)).collect())
        .collect()
}

/// Draws one stage's training batch from the active labeled anchors: up to
/// `pos_fraction · batch_size` positives, the rest negatives. Returned
/// indices are sorted.
pub fn sample_stage_batch(
    active: &[bool],
    labels: &[Label],
    batch_size: usize,
    pos_fraction: f64,
    rng: &mut Rng,
) -> Vec<usize> {
    let pool = |want: Label| -> Vec<usize> {
        (0..labels.len())
            .filter(|&a| active[a] && labels[a] == want)
            .collect()
    };
    let (pos, neg) = (pool(Label::Object), pool(Label::Background));
    let pos_quota = (pos_fraction * batch_size as f64).floor() as usize;
    let mut picked = rng.choose_multiple(&pos, pos_quota.min(pos.len()));
    let neg_quota = batch_size - picked.len();
    picked.extend(rng.choose_multiple(&neg, neg_quota.min(neg.len())));
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    /// Final-stage chained object score.
    pub scores: Vec<f64>,
    pub source_anchor: Vec<usize>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Turns surviving anchors into proposals: reject by background score,
/// decode, clip, drop empty boxes, NMS, keep the top `proposal_topk`.
pub fn propose(
    scores: &[Vec<[f64; 2]>],
    deltas: &[BoxDelta],
    anchors: &AnchorGrid,
    cfg: &CascadeConfig,
    img_w: f64,
    img_h: f64,
) -> Result<ProposalSet> {
    let last = scores
        .last()
        .ok_or_else(|| Error::InvalidArgument("propose needs at least one stage".into()))?;
    if last.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "propose: {} anchors, {} scores, {} deltas",
            anchors.len(),
            last.len(),
            deltas.len()
        )));
    }
    let survivors = inference_active(scores, cfg.r).pop().unwrap_or_default();
    let mut boxes = Vec::new();
    let mut obj = Vec::new();
    let mut src = Vec::new();
    for a in (0..anchors.len()).filter(|&a| survivors[a]) {
        let b = clip_box(&decode(&anchors.boxes[a], &deltas[a])?, img_w, img_h);
        if b.area() > 0.0 {
            boxes.push(b);
            obj.push(last[a][1]);
            src.push(a);
        }
    }
    let mut keep = nms(&boxes, &obj, cfg.proposal_nms_iou)?;
    keep.truncate(cfg.proposal_topk);
    Ok(ProposalSet {
        boxes: keep.iter().map(|&i| boxes[i]).collect(),
        scores: keep.iter().map(|&i| obj[i]).collect(),
        source_anchor: keep.iter().map(|&i| src[i]).collect(),
    })
}

/// Bias `(+b/2, -b/2)` per anchor slot with `b = logit(prior)`, so the
/// softmax starts at `(prior, 1 - prior)`.
fn prior_bias(anchors: usize, prior: f64) -> Tensor {
    let half = 0.5 * (prior / (1.0 - prior)).ln();
    Tensor::from_fn([2 * anchors], |i| if i % 2 == 0 { half } else { -half })
}

#[derive(Debug, Clone, Copy)]
struct StageHead {
    conv_w: ParamId,
    conv_b: ParamId,
    score_w: ParamId,
    score_b: ParamId,
}

/// Per-stage variables of one cascade forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StageState {
    /// 1-based stage position within the active stages.
    pub t: usize,
    /// 1-based tap index.
    pub tap: usize,
    pub h: Var,
    /// Raw softmax scores `[A, 2]`.
    pub c: Var,
    /// Chained scores `[A, 2]`.
    pub s: Var,
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub stages: Vec<StageState>,
    /// Final-stage regression `[A, 4]`.
    pub deltas: Var,
}

impl CascadeOutput {
    pub fn chained_scores(&self, tape: &Tape) -> Vec<Vec<[f64; 2]>> {
        self.stages.iter().map(|s| score_values(tape, s.s)).collect()
    }

    pub fn raw_scores(&self, tape: &Tape) -> Vec<Vec<[f64; 2]>> {
        self.stages.iter().map(|s| score_values(tape, s.c)).collect()
    }

    pub fn delta_values(&self, tape: &Tape) -> Vec<BoxDelta> {
        tape.value(self.deltas)
            .data()
            .chunks_exact(4)
            .map(|c| BoxDelta::from_array([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

/// Learnable stage heads plus the final-stage regression head.
#[derive(Debug, Clone)]
pub struct CascadeRpn {
    cfg: CascadeConfig,
    heads: Vec<StageHead>,
    reg_w: ParamId,
    reg_b: ParamId,
}

impl CascadeRpn {
    pub fn new(
        cfg: &CascadeConfig,
        channels: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (hc, a, std) = (cfg.head_channels, cfg.anchors_per_cell(), cfg.head_init_std);
        let heads = cfg
            .taps()
            .into_iter()
            .map(|tap| {
                let name = format!("rpn.stage{tap}");
                StageHead {
                    conv_w: store.gaussian(format!("{name}.conv.weight"), [hc, channels, 3, 3], std, rng),
                    conv_b: store.zeros(format!("{name}.conv.bias"), [hc]),
                    score_w: store.gaussian(format!("{name}.score.weight"), [2 * a, hc, 1, 1], std, rng),
                    score_b: store.add(format!("{name}.score.bias"), prior_bias(a, cfg.score_prior)),
                }
            })
            .collect();
        let reg_w = store.gaussian("rpn.regression.weight", [4 * a, hc, 1, 1], std, rng);
        let reg_b = store.zeros("rpn.regression.bias", [4 * a]);
        Ok(CascadeRpn {
            cfg: cfg.clone(),
            heads,
            reg_w,
            reg_b,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, taps: &TapSet) -> Result<CascadeOutput> {
        let mut stages: Vec<StageState> = Vec::with_capacity(self.heads.len());
        let mut hidden = None;
        for (i, (head, tap)) in self.heads.iter().zip(self.cfg.taps()).enumerate() {
            let prev = stages.last();
            let h = feature_chain(tape, prev.map(|s| s.h), taps.f[tap - 1], &self.cfg)?;
            let x = tape.conv2d(h, p.get(head.conv_w), p.get(head.conv_b), 1, 1)?;
            let x = tape.relu(x);
            let logits = tape.conv2d(x, p.get(head.score_w), p.get(head.score_b), 1, 0)?;
            let rows = tape.channels_to_rows(logits, 2)?;
            let c = tape.softmax(rows)?;
            let s = score_chain(tape, prev.map(|s| s.s), c, &self.cfg)?;
            stages.push(StageState {
                t: i + 1,
                tap,
                h,
                c,
                s,
            });
            hidden = Some(x);
        }
        let hidden = hidden.expect("at least one stage");
        let reg = tape.conv2d(hidden, p.get(self.reg_w), p.get(self.reg_b), 1, 0)?;
        let deltas = tape.channels_to_rows(reg, 4)?;
        Ok(CascadeOutput { stages, deltas })
    }
}

#[cfg(test)]
mod tests;
