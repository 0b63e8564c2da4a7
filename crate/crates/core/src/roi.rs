//! Second stage: max RoI pooling over proposals, then a small MLP that
//! classifies each region into `C + 1` classes (0 = background) and
//! regresses per-class box deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode, iou, BBox, BoxDelta};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{NllPick, SmoothL1Pick, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub pool_size: usize,
    /// Foreground classes; the head outputs `num_classes + 1` scores.
    pub num_classes: usize,
    pub roi_batch: usize,
    pub fg_fraction: f64,
    pub fg_iou: f64,
    pub hidden: usize,
    pub init_std: f64,
    /// Per-class NMS threshold applied to final detections.
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub max_detections: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            pool_size: 7,
            num_classes: 3,
            roi_batch: 64,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            hidden: 64,
            init_std: 0.01,
            nms_iou: 0.3,
            score_thresh: 0.01,
            max_detections: 100,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 || self.num_classes == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "roi pool_size, num_classes and hidden must be >= 1".into(),
            ));
        }
        if self.roi_batch == 0 || !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::Config("roi_batch must be >= 1 and fg_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gather indices of max RoI pooling for one proposal over a `[1, C, S, S]`
/// map: `C × P × P` entries, `None` for empty bins.
///
/// The footprint spans cells `floor(x1 / stride) .. ceil(x2 / stride)`
/// (likewise in y), split into `P × P` bins with floor/ceil edges. Ties go to
/// the first maximum in row-major order.
pub fn roi_pool_indices(
    features: &Tensor,
    proposal: &BBox,
    stride: f64,
    pool: usize,
) -> Vec<Option<usize>> {
    let s = features.shape();
    let (c, fh, fw) = (s[1], s[2], s[3]);
    let mut out = vec![None; c * pool * pool];
    if proposal.area() <= 0.0 {
        return out;
    }
    let span = |lo: f64, hi: f64, n: usize| {
        let a = ((lo / stride).floor().max(0.0) as usize).min(n);
        let b = ((hi / stride).ceil().max(0.0) as usize).min(n);
        (a, b)
    };
    let (x0, x1) = span(proposal.x1, proposal.x2, fw);
    let (y0, y1) = span(proposal.y1, proposal.y2, fh);
    if x1 <= x0 || y1 <= y0 {
        return out;
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let data = features.data();
    for ch in 0..c {
        let plane = ch * fh * fw;
        for py in 0..pool {
            let ys = y0 + py * h / pool;
            let ye = y0 + ((py + 1) * h).div_ceil(pool);
            for px in 0..pool {
                let xs = x0 + px * w / pool;
                let xe = x0 + ((px + 1) * w).div_ceil(pool);
                let mut best: Option<usize> = None;
                for y in ys..ye {
                    for x in xs..xe {
                        let i = plane + y * fw + x;
                        if best.is_none_or(|b| data[i] > data[b]) {
                            best = Some(i);
                        }
                    }
                }
                out[(ch * pool + py) * pool + px] = best;
            }
        }
    }
    out
}

/// Pools every proposal into a `[R, C, P, P]` variable.
pub fn roi_pool(
    tape: &mut Tape,
    features: Var,
    proposals: &[BBox],
    stride: f64,
    pool: usize,
) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 4 || fs[0] != 1 {
        return Err(Error::Shape(format!("roi_pool expects [1, C, S, S], got {fs:?}")));
    }
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("roi_pool needs at least one proposal".into()));
    }
    let value = tape.value(features);
    let index: Vec<Option<usize>> = proposals
        .iter()
        .flat_map(|b| roi_pool_indices(value, b, stride, pool))
        .collect();
    tape.gather(features, index, [proposals.len(), fs[1], pool, pool])
}

#[derive(Debug, Clone)]
pub struct RoiHead {
    cfg: RoiConfig,
    fc_w: ParamId,
    fc_b: ParamId,
    cls_w: ParamId,
    cls_b: ParamId,
    reg_w: ParamId,
    reg_b: ParamId,
}

impl RoiHead {
    pub fn new(cfg: &RoiConfig, channels: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = channels * cfg.pool_size * cfg.pool_size;
        let k = cfg.num_classes + 1;
        // The hidden layer feeds two heads; fan-in scaling keeps its
        // activations from vanishing at this depth.
        let fc_std = (2.0 / d as f64).sqrt();
        Ok(RoiHead {
            cfg: cfg.clone(),
            fc_w: store.gaussian("roi.fc.weight", [d, cfg.hidden], fc_std, rng),
            fc_b: store.zeros("roi.fc.bias", [cfg.hidden]),
            cls_w: store.gaussian("roi.cls.weight", [cfg.hidden, k], cfg.init_std, rng),
            cls_b: store.zeros("roi.cls.bias", [k]),
            reg_w: store.gaussian("roi.reg.weight", [cfg.hidden, 4 * k], cfg.init_std * 0.1, rng),
            reg_b: store.zeros("roi.reg.bias", [4 * k]),
        })
    }

    pub fn config(&self) -> &RoiConfig {
        &self.cfg
    }

    /// Returns `(class probabilities [R, C+1], deltas [R, 4(C+1)])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<(Var, Var)> {
        let s = tape.shape(pooled).to_vec();
        let flat = tape.reshape(pooled, [s[0], s[1..].iter().product()])?;
        let h = tape.linear(flat, p.get(self.fc_w), p.get(self.fc_b))?;
        let h = tape.relu(h);
        let logits = tape.linear(h, p.get(self.cls_w), p.get(self.cls_b))?;
        let probs = tape.softmax(logits)?;
        let deltas = tape.linear(h, p.get(self.reg_w), p.get(self.reg_b))?;
        Ok((probs, deltas))
    }
}

/// RoIs chosen for one training step with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoiSamples {
    pub boxes: Vec<BBox>,
    /// 0 for background, else the matched ground-truth class.
    pub classes: Vec<usize>,
    pub targets: Vec<Option<BoxDelta>>,
}

impl RoiSamples {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Labels candidate boxes against ground truth and samples a RoI batch with
/// at most `fg_fraction · roi_batch` foreground regions.
pub fn sample_rois(
    candidates: &[BBox],
    gts: &[(BBox, usize)],
    cfg: &RoiConfig,
    rng: &mut Rng,
) -> RoiSamples {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut matched = vec![None; candidates.len()];
    for (i, b) in candidates.iter().enumerate() {
        if b.area() <= 0.0 {
            continue;
        }
        let best = gts
            .iter()
            .enumerate()
            .map(|(g, (gb, _))| (g, iou(b, gb)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        match best {
            Some((g, v)) if v >= cfg.fg_iou => {
                matched[i] = Some(g);
                fg.push(i);
            }
            _ => bg.push(i),
        }
    }
    let fg_quota = (cfg.fg_fraction * cfg.roi_batch as f64).floor() as usize;
    let mut picked = rng.choose_multiple(&fg, fg_quota.min(fg.len()));
    let bg_quota = cfg.roi_batch - picked.len();
    picked.extend(rng.choose_multiple(&bg, bg_quota.min(bg.len())));
    picked.sort_unstable();

    let mut out = RoiSamples::default();
    for i in picked {
        let b = candidates[i];
        out.boxes.push(b);
        match matched[i] {
            Some(g) => {
                out.classes.push(gts[g].1);
                out.targets.push(encode(&gts[g].0, &b).ok());
            }
            None => {
                out.classes.push(0);
                out.targets.push(None);
            }
        }
    }
    out
}

/// Mean cross entropy over the batch and mean smooth-L1 over foreground
/// RoIs, using the deltas of each RoI's own class.
pub fn roi_loss(tape: &mut Tape, probs: Var, deltas: Var, samples: &RoiSamples) -> Result<(Var, Var)> {
    let n = samples.len();
    if n == 0 {
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok((z, z));
    }
    let picks = samples
        .classes
        .iter()
        .enumerate()
        .map(|(row, &class)| NllPick {
            row,
            class,
            weight: 1.0 / n as f64,
        })
        .collect();
    let cls = tape.nll(probs, picks)?;
    let fg: Vec<(usize, usize, BoxDelta)> = (0..n)
        .filter(|&i| samples.classes[i] > 0)
        .filter_map(|i| samples.targets[i].map(|t| (i, samples.classes[i], t)))
        .collect();
    let w = if fg.is_empty() { 0.0 } else { 1.0 / fg.len() as f64 };
    let picks = fg
        .into_iter()
        .map(|(row, class, t)| SmoothL1Pick {
            row,
            col: 4 * class,
            target: t.to_array(),
            weight: w,
        })
        .collect();
    let loc = tape.smooth_l1(deltas, picks)?;
    Ok((cls, loc))
}
