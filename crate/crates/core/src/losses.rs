//! Cascade classification loss, smooth-L1 localization, and the joint
//! detection objective.
//!
//! Each stage's cross entropy is averaged over that stage's own sampled
//! batch and weighted by `alpha_t = alpha_T / 10^(T - t)`. Samples rejected
//! before a stage (`mu = 0`) contribute nothing to it.

use crate::cascade::{Assignment, Label};
use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::tensor::{NllPick, SmoothL1Pick, Tape, Var, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub alpha: Vec<f64>,
}

impl StageWeights {
    pub fn new(stages: usize) -> Self {
        Self::with_final(stages, 1.0)
    }

    pub fn with_final(stages: usize, alpha_final: f64) -> Self {
        StageWeights {
            alpha: (1..=stages)
                .map(|t| alpha_final / 10f64.powi((stages - t) as i32))
                .collect(),
        }
    }
}

/// One stage's sampled batch, as plain values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageBatch {
    /// Chained `(background, object)` scores of the sampled anchors.
    pub scores: Vec<[f64; 2]>,
    pub k_star: Vec<usize>,
    pub mu: Vec<bool>,
}

/// `sum_t alpha_t * mean_i(-mu_i * ln s_{t,i,k*})` over per-stage batches.
pub fn cascade_cls_loss(stages: &[StageBatch], weights: &StageWeights) -> f64 {
    stages
        .iter()
        .zip(&weights.alpha)
        .map(|(b, &alpha)| {
            if b.scores.is_empty() {
                return 0.0;
            }
            let total: f64 = b
                .scores
                .iter()
                .zip(&b.k_star)
                .zip(&b.mu)
                .filter(|(_, &mu)| mu)
                .map(|((s, &k), _)| -s[k].max(PROB_FLOOR).ln())
                .sum();
            alpha * total / b.scores.len() as f64
        })
        .sum()
}

/// Tape form of [`cascade_cls_loss`]: one scalar per stage.
///
/// `stage_scores[t]` is stage `t`'s chained score variable `[A, 2]`,
/// `batches[t]` its sampled anchor indices and `mu[t]` its per-anchor mask.
pub fn cascade_cls_terms(
    tape: &mut Tape,
    stage_scores: &[Var],
    batches: &[Vec<usize>],
    labels: &[Label],
    mu: &[Vec<bool>],
    weights: &StageWeights,
) -> Result<Vec<Var>> {
    let mut terms = Vec::with_capacity(stage_scores.len());
    for (t, &scores) in stage_scores.iter().enumerate() {
        let batch = &batches[t];
        let w = if batch.is_empty() {
            0.0
        } else {
            weights.alpha[t] / batch.len() as f64
        };
        let picks = batch
            .iter()
            .filter(|&&a| mu[t][a])
            .filter_map(|&a| {
                labels[a].class().map(|class| NllPick {
                    row: a,
                    class,
                    weight: w,
                })
            })
            .collect();
        terms.push(tape.nll(scores, picks)?);
    }
    Ok(terms)
}

/// Sum over the four coordinates of `0.5 x²` if `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| crate::tensor::smooth_l1_scalar(p - t))
        .sum()
}

/// Mean smooth-L1 over positive samples; 0 without positives.
pub fn loc_loss(preds: &[BoxDelta], targets: &[BoxDelta], k_star: &[usize]) -> f64 {
    let pos: Vec<usize> = (0..k_star.len()).filter(|&i| k_star[i] == 1).collect();
    if pos.is_empty() {
        return 0.0;
    }
    pos.iter()
        .map(|&i| smooth_l1(&preds[i], &targets[i]))
        .sum::<f64>()
        / pos.len() as f64
}

/// Tape form of [`loc_loss`] over the positives of a final-stage batch.
pub fn loc_term(
    tape: &mut Tape,
    deltas: Var,
    batch: &[usize],
    assignment: &Assignment,
    mu: &[bool],
) -> Result<Var> {
    let pos: Vec<(usize, BoxDelta)> = batch
        .iter()
        .filter(|&&a| mu[a] && assignment.labels[a] == Label::Object)
        .filter_map(|&a| assignment.targets[a].map(|t| (a, t)))
        .collect();
    let w = if pos.is_empty() {
        0.0
    } else {
        1.0 / pos.len() as f64
    };
    let picks = pos
        .into_iter()
        .map(|(row, t)| SmoothL1Pick {
            row,
            col: 0,
            target: t.to_array(),
            weight: w,
        })
        .collect();
    tape.smooth_l1(deltas, picks)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub per_stage_cls: Vec<f64>,
    pub loc: f64,
    pub crpn_total: f64,
    pub roi_cls: f64,
    pub roi_loc: f64,
    pub detection_total: f64,
}

/// Assembles the loss report; fails on any non-finite component.
pub fn detection_loss(
    per_stage_cls: Vec<f64>,
    loc: f64,
    roi_cls: f64,
    roi_loc: f64,
) -> Result<LossBreakdown> {
    let named = per_stage_cls
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("stage {} cls", i + 1), *v))
        .chain([
            ("rpn loc".to_string(), loc),
            ("roi cls".to_string(), roi_cls),
            ("roi loc".to_string(), roi_loc),
        ]);
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    let crpn_total = per_stage_cls.iter().sum::<f64>() + loc;
    Ok(LossBreakdown {
        per_stage_cls,
        loc,
        crpn_total,
        roi_cls,
        roi_loc,
        detection_total: crpn_total + roi_cls + roi_loc,
    })
}

/// Plain sum of scalar loss variables, in order.
pub fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("no loss terms to sum".into()))?;
    let mut acc = *first;
    for &t in rest {
        acc = tape.add_scaled(acc, 1.0, t, 1.0)?;
    }
    Ok(acc)
}
