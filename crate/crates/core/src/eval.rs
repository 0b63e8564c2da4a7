//! Average precision at an IoU threshold, plus cascade diagnostics.

use std::fmt::Write as _;

use crate::cascade::assign_labels;
use crate::detector::{hard_counts, inference_rejection, Detection, Detector};
use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::params::ParamStore;
use crate::synth::SceneRecord;

/// Per-class AP (`None` for classes without ground truth) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ApSummary {
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// All-point interpolated AP per class.
///
/// Detections of a class are ranked by score, ties broken by image index
/// and then detection index. Each one takes the highest-IoU unmatched
/// ground-truth box of its class in its image, if that IoU reaches
/// `iou_thresh`.
pub fn evaluate_ap(
    detections: &[Vec<Detection>],
    gts: &[Vec<(BBox, usize)>],
    num_classes: usize,
    iou_thresh: f64,
) -> ApSummary {
    let per_class: Vec<Option<f64>> = (1..=num_classes)
        .map(|c| class_ap(detections, gts, c, iou_thresh))
        .collect();
    let have: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if have.is_empty() {
        0.0
    } else {
        have.iter().sum::<f64>() / have.len() as f64
    };
    ApSummary { per_class, map }
}

fn class_ap(detections: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], class: usize, thresh: f64) -> Option<f64> {
    let (tp, npos) = ranked_matches(detections, gts, class, thresh);
    (npos > 0).then(|| all_point_ap(&tp, npos))
}

/// TP flags of one class's detections in rank order, and its gt count.
pub fn ranked_matches(
    detections: &[Vec<Detection>],
    gts: &[Vec<(BBox, usize)>],
    class: usize,
    thresh: f64,
) -> (Vec<bool>, usize) {
    let npos: usize = gts.iter().map(|g| g.iter().filter(|x| x.1 == class).count()).sum();
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|d| d.class == class).map(move |d| (img, d)))
        .collect();
    // Stable: equal scores keep (image, detection) order.
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for (img, d) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, (g, gc)) in gts.get(img).map_or(&[][..], |v| v).iter().enumerate() {
            if *gc != class || used[img][j] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[img][j] = true;
        }
        tp.push(best.is_some());
    }
    (tp, npos)
}

/// Area under the monotone precision envelope of a ranked TP/FP list.
pub fn all_point_ap(tp: &[bool], npos: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        rec.push(hits as f64 / npos as f64);
        prec.push(hits as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap50_per_class: Vec<Option<f64>>,
    pub map50: f64,
    /// Inference-time share of incoming anchors each stage rejects, averaged
    /// over images.
    pub per_stage_rejection_rate: Vec<f64>,
    /// Fraction of final-stage training-active anchors whose chained
    /// true-class score is below 0.5.
    pub stage4_hard_fraction: f64,
    pub proposals_per_image: f64,
}

pub fn evaluate_model(det: &Detector, store: &ParamStore, records: &[SceneRecord]) -> Result<EvalReport> {
    let cfg = det.config();
    let t = cfg.cascade.stages;
    let mut dets = Vec::with_capacity(records.len());
    let mut rejection = vec![0.0; t];
    let (mut hard, mut total) = (0, 0);
    let mut proposals = 0;
    for r in records {
        let inf = det.detect(store, &r.image)?;
        for (acc, v) in rejection.iter_mut().zip(inference_rejection(&inf.chained, cfg.cascade.r)) {
            *acc += v;
        }
        let n = cfg.backbone.input_size as f64;
        let boxes: Vec<BBox> = r.gts.iter().map(|g| g.0).collect();
        let a = assign_labels(det.anchors(), &boxes, &cfg.cascade, n, n);
        let (h, tot) = hard_counts(&inf.chained, &a.labels, cfg.cascade.r);
        hard += h;
        total += tot;
        proposals += inf.proposals;
        dets.push(inf.detections);
    }
    let gts: Vec<Vec<(BBox, usize)>> = records.iter().map(|r| r.gts.clone()).collect();
    let ap = evaluate_ap(&dets, &gts, cfg.roi.num_classes, 0.5);
    let per_image = |v: f64| if records.is_empty() { 0.0 } else { v / records.len() as f64 };
    Ok(EvalReport {
        ap50_per_class: ap.per_class,
        map50: ap.map,
        per_stage_rejection_rate: rejection.into_iter().map(per_image).collect(),
        stage4_hard_fraction: if total == 0 { 0.0 } else { hard as f64 / total as f64 },
        proposals_per_image: per_image(proposals as f64),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl EvalReport {
    pub fn to_csv(&self, generated: Option<&str>) -> String {
        let mut s = String::new();
        if let Some(g) = generated {
            let _ = writeln!(s, "# generated {g}");
        }
        let _ = writeln!(s, "metric,value");
        let _ = writeln!(s, "map50,{}", self.map50);
        for (c, ap) in self.ap50_per_class.iter().enumerate() {
            let _ = writeln!(s, "ap50_class{},{}", c + 1, opt(*ap));
        }
        for (t, r) in self.per_stage_rejection_rate.iter().enumerate() {
            let _ = writeln!(s, "rejection_stage{},{r}", t + 1);
        }
        let _ = writeln!(s, "stage4_hard_fraction,{}", self.stage4_hard_fraction);
        let _ = writeln!(s, "proposals_per_image,{}", self.proposals_per_image);
        s
    }

    pub fn summary(&self) -> String {
        let per: Vec<String> = self
            .ap50_per_class
            .iter()
            .enumerate()
            .map(|(c, ap)| match ap {
                Some(v) => format!("class {}: {:.3}", c + 1, v),
                None => format!("class {}: -", c + 1),
            })
            .collect();
        format!(
            "mAP@0.5 {:.4} ({})  proposals/image {:.1}  hard fraction {:.3}",
            self.map50,
            per.join(", "),
            self.proposals_per_image,
            self.stage4_hard_fraction
        )
    }
}
