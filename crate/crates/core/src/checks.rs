//! The registered finite-difference suite behind `crpn gradcheck`.

use std::time::Instant;

use crate::backbone::{Backbone, BackboneConfig, TapSet, TrunkInit};
use crate::cascade::{CascadeConfig, CascadeRpn};
use crate::detector::{Detector, ModelConfig};
use crate::error::Result;
use crate::geometry::BBox;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::roi::{roi_pool, RoiConfig, RoiHead};
use crate::tensor::{gradcheck_many, NllPick, SmoothL1Pick, Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-5;

/// One named check returning its max relative error.
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: Box<dyn Fn() -> Result<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    /// `Err` text when the check itself failed to run.
    pub error: std::result::Result<f64, String>,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        matches!(self.error, Ok(e) if e <= self.tolerance)
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.range(lo, hi))
}

/// Contracts an arbitrary output with fixed random weights.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(v), seed, -1.0, 1.0));
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

fn op_check<F>(name: &'static str, shapes: Vec<Vec<usize>>, seed: u64, f: F) -> Check
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    Check {
        name,
        tolerance: OP_TOLERANCE,
        run: Box::new(move || {
            let points: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random(s, seed + i as u64, -1.0, 1.0))
                .collect();
            gradcheck_many(
                |tape, v| {
                    let y = f(tape, v)?;
                    if tape.shape(y).is_empty() {
                        Ok(y)
                    } else {
                        project(tape, y, seed ^ 0xabc)
                    }
                },
                &points,
                EPS,
            )
        }),
    }
}

fn model_check(name: &'static str, tolerance: f64, f: fn() -> Result<f64>) -> Check {
    Check { name, tolerance, run: Box::new(f) }
}

fn micro_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: 2,
            stem_channels: 2,
            input_size: 4,
            stride_at_tap: 4,
            init: TrunkInit::Gaussian { std: 0.5 },
        },
        cascade: CascadeConfig {
            stage_batches: vec![4, 4, 4, 4],
            head_channels: 2,
            head_init_std: 0.5,
            anchor_scales: vec![1.0, 0.5],
            anchor_ratios: vec![1.0],
            ..Default::default()
        },
        roi: RoiConfig {
            pool_size: 1,
            num_classes: 1,
            roi_batch: 4,
            hidden: 3,
            init_std: 0.5,
            ..Default::default()
        },
    }
}

/// Full detection loss (cascade classification, RPN regression and RoI
/// terms) on a 4×4 image whose single 1×1 tap carries two anchors: one
/// positive, one background.
fn detection_loss_micro_scene() -> Result<f64> {
    let cfg = micro_model();
    let mut store = ParamStore::new();
    let det = Detector::new(&cfg, &mut store, &mut Rng::new(1))?;
    let image = random(&[3, 4, 4], 2, 0.0, 1.0);
    let gts = [(BBox::new(0.0, 0.0, 1.5, 1.5), 1)];
    let plan = det.plan_for(&store, &image, &gts, &mut Rng::new(3))?;
    let points: Vec<Tensor> = store.named_tensors().into_iter().map(|(_, t)| t).collect();
    gradcheck_many(|tape, v| det.loss_for_check(tape, v, &image, &plan), &points, EPS)
}

fn params_then(store: &ParamStore, extra: Vec<Tensor>) -> Vec<Tensor> {
    let mut p: Vec<Tensor> = store.named_tensors().into_iter().map(|(_, t)| t).collect();
    p.extend(extra);
    p
}

fn backbone_micro() -> Result<f64> {
    let cfg = micro_model().backbone;
    let mut store = ParamStore::new();
    let bb = Backbone::new(&BackboneConfig { input_size: 8, ..cfg }, &mut store, &mut Rng::new(5))?;
    let n = store.len();
    let points = params_then(&store, vec![random(&[1, 3, 8, 8], 6, 0.0, 1.0)]);
    gradcheck_many(
        |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let taps = bb.forward(tape, &p, v[n])?;
            let mut acc = project(tape, taps.f[0], 10)?;
            for (i, &f) in taps.f[1..].iter().enumerate() {
                let t = project(tape, f, 11 + i as u64)?;
                acc = tape.add_scaled(acc, 1.0, t, 1.0)?;
            }
            Ok(acc)
        },
        &points,
        EPS,
    )
}

fn cascade_micro() -> Result<f64> {
    let cfg = CascadeConfig { head_channels: 2, head_init_std: 0.5, anchor_scales: vec![1.0, 2.0], anchor_ratios: vec![1.0], ..Default::default() };
    let mut store = ParamStore::new();
    let rpn = CascadeRpn::new(&cfg, 2, &mut store, &mut Rng::new(7))?;
    let n = store.len();
    let taps: Vec<Tensor> = (0..4).map(|i| random(&[1, 2, 2, 2], 20 + i, -1.0, 1.0)).collect();
    let points = params_then(&store, taps);
    gradcheck_many(
        |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let taps = TapSet { f: [v[n], v[n + 1], v[n + 2], v[n + 3]] };
            let out = rpn.forward(tape, &p, &taps)?;
            let mut acc = project(tape, out.deltas, 30)?;
            for (i, s) in out.stages.iter().enumerate() {
                let t = project(tape, s.s, 31 + i as u64)?;
                acc = tape.add_scaled(acc, 1.0, t, 1.0)?;
            }
            Ok(acc)
        },
        &points,
        EPS,
    )
}

fn roi_micro() -> Result<f64> {
    let cfg = RoiConfig { pool_size: 2, num_classes: 2, hidden: 3, init_std: 0.5, ..Default::default() };
    let mut store = ParamStore::new();
    let head = RoiHead::new(&cfg, 2, &mut store, &mut Rng::new(8))?;
    let n = store.len();
    let points = params_then(&store, vec![random(&[1, 2, 4, 4], 9, -1.0, 1.0)]);
    let boxes = [BBox::new(0.0, 0.0, 40.0, 52.0), BBox::new(20.0, 8.0, 64.0, 40.0)];
    gradcheck_many(
        |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let pooled = roi_pool(tape, v[n], &boxes, 16.0, 2)?;
            let (probs, deltas) = head.forward(tape, &p, pooled)?;
            let a = project(tape, probs, 40)?;
            let b = project(tape, deltas, 41)?;
            tape.add_scaled(a, 1.0, b, 1.0)
        },
        &points,
        EPS,
    )
}

/// Every registered check, in report order.
pub fn suite() -> Vec<Check> {
    vec![
        op_check("conv2d stride 1 pad 1", vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3], vec![4]], 100, |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 1)
        }),
        op_check("conv2d stride 2 pad 1", vec![vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]], 110, |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        op_check("conv2d 1x1", vec![vec![1, 3, 3, 3], vec![5, 3, 1, 1], vec![5]], 120, |t, v| {
            t.conv2d(v[0], v[1], v[2], 1, 0)
        }),
        op_check("avgpool2d", vec![vec![2, 2, 4, 6]], 130, |t, v| t.avgpool2d(v[0], 2)),
        op_check("relu", vec![vec![4, 5]], 140, |t, v| Ok(t.relu(v[0]))),
        op_check("linear", vec![vec![3, 4], vec![4, 5], vec![5]], 150, |t, v| t.linear(v[0], v[1], v[2])),
        op_check("softmax", vec![vec![4, 3]], 160, |t, v| t.softmax(v[0])),
        op_check("add_scaled", vec![vec![2, 3], vec![2, 3]], 170, |t, v| t.add_scaled(v[0], 0.1, v[1], 0.9)),
        op_check("mul", vec![vec![3, 3], vec![3, 3]], 180, |t, v| t.mul(v[0], v[1])),
        op_check("sum", vec![vec![2, 5]], 190, |t, v| Ok(t.sum(v[0]))),
        op_check("reshape", vec![vec![2, 6]], 200, |t, v| t.reshape(v[0], [3, 4])),
        op_check("channels_to_rows", vec![vec![1, 6, 2, 3]], 210, |t, v| t.channels_to_rows(v[0], 2)),
        op_check("roi max pool", vec![vec![1, 2, 4, 4]], 220, |t, v| {
            roi_pool(t, v[0], &[BBox::new(0.0, 0.0, 48.0, 64.0), BBox::new(16.0, 16.0, 40.0, 30.0)], 16.0, 3)
        }),
        op_check("nll", vec![vec![3, 2]], 230, |t, v| {
            let p = t.softmax(v[0])?;
            let picks = (0..3).map(|row| NllPick { row, class: row % 2, weight: 0.3 + row as f64 }).collect();
            t.nll(p, picks)
        }),
        op_check("smooth_l1", vec![vec![2, 8]], 240, |t, v| {
            let big = t.add_scaled(v[0], 3.0, v[0], 0.0)?;
            let picks = vec![
                SmoothL1Pick { row: 0, col: 0, target: [0.2, -0.1, 0.5, 0.0], weight: 1.0 },
                SmoothL1Pick { row: 1, col: 4, target: [0.1, 0.3, -2.5, 1.9], weight: 0.5 },
            ];
            t.smooth_l1(big, picks)
        }),
        model_check("backbone", OP_TOLERANCE, backbone_micro),
        model_check("cascade rpn heads and chains", OP_TOLERANCE, cascade_micro),
        model_check("roi pool and head", OP_TOLERANCE, roi_micro),
        model_check("detection loss micro-scene", LOSS_TOLERANCE, detection_loss_micro_scene),
    ]
}

pub fn run_checks(checks: &[Check]) -> Vec<CheckResult> {
    checks
        .iter()
        .map(|c| {
            let t0 = Instant::now();
            let error = (c.run)().map_err(|e| e.to_string());
            CheckResult {
                name: c.name.to_string(),
                tolerance: c.tolerance,
                error,
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<32} {:>12} {:>10}  result\n", "check", "max rel err", "tolerance");
    for r in results {
        let err = match &r.error {
            Ok(e) => format!("{e:.3e}"),
            Err(_) => "error".to_string(),
        };
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<32} {:>12} {:>10.0e}  {verdict}\n", r.name, err, r.tolerance));
        if let Err(m) = &r.error {
            s.push_str(&format!("    {m}\n"));
        }
    }
    s
}
