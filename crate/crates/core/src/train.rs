//! SGD training with a piecewise-constant learning rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, StepReport};
use crate::error::{Error, Result};
use crate::params::{read_tensors, write_tensors, ParamStore};
use crate::rng::{mix, Rng};
use crate::synth::SceneRecord;
use crate::tensor::Tensor;

/// Independent RNG streams derived from the run seed.
const INIT_STREAM: u64 = 0x1_0000_0000;
const ORDER_STREAM: u64 = 0x2_0000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `(iterations, learning rate)` phases, run in order. After the last
    /// phase the last rate stays in effect.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate on the held-out set every this many iterations; 0 disables.
    pub eval_every: usize,
    pub max_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_schedule: vec![(1500, 0.01), (500, 0.001)],
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            eval_every: 0,
            max_iterations: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() {
            return Err(Error::Config("lr_schedule needs at least one phase".into()));
        }
        for &(n, lr) in &self.lr_schedule {
            if n == 0 || !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "lr_schedule phase ({n}, {lr}) needs positive iterations and a finite nonnegative rate"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at a 0-based iteration.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.lr_schedule {
            end += n;
            if iteration < end {
                return lr;
            }
        }
        self.lr_schedule.last().map_or(0.0, |p| p.1)
    }

    /// Iteration counts at which one phase ends and the next begins.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut end = 0;
        self.lr_schedule
            .iter()
            .map(|&(n, _)| {
                end += n;
                end
            })
            .collect()
    }
}

/// Parameter-initialization RNG for a run seed.
pub fn init_rng(seed: u64) -> Rng {
    Rng::new(mix(seed, INIT_STREAM))
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        SgdState {
            velocity: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
        }
    }
}

/// `v = momentum·v + g + wd·p; p -= lr·v`, for every parameter. Refuses to
/// touch anything if a gradient is non-finite.
pub fn sgd_step(store: &mut ParamStore, state: &mut SgdState, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for id in store.ids() {
        let g = store.grad(id);
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at flat index {i} is {}",
                store.name(id),
                g.data()[i]
            )));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let v = state.velocity[k].data_mut();
        let (p, g) = store.value_and_grad_mut(id);
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub params: ParamStore,
    pub sgd: SgdState,
}

const ITERATION_KEY: &str = "train.iteration";
const VELOCITY_PREFIX: &str = "sgd.velocity.";

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        let sgd = SgdState::new(&params);
        TrainState { iteration: 0, params, sgd }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut t = self.params.named_tensors();
        for (id, v) in self.params.ids().zip(&self.sgd.velocity) {
            t.push((format!("{VELOCITY_PREFIX}{}", self.params.name(id)), v.clone()));
        }
        t.push((ITERATION_KEY.to_string(), Tensor::scalar(self.iteration as f64)));
        write_tensors(path, &t)
    }

    /// Loads a snapshot into a model-shaped template. Parameter-only
    /// snapshots resume at iteration 0 with zero velocity.
    pub fn load(path: &Path, template: ParamStore) -> Result<Self> {
        let mut state = TrainState::new(template);
        let extras = state.params.load_named(read_tensors(path)?)?;
        for (name, t) in extras {
            if name == ITERATION_KEY {
                state.iteration = t.item() as usize;
            } else if let Some(p) = name.strip_prefix(VELOCITY_PREFIX) {
                let id = state
                    .params
                    .id(p)
                    .ok_or_else(|| Error::Format(format!("velocity for unknown parameter {p}")))?;
                let k = state.params.ids().position(|i| i == id).expect("id");
                if t.shape() != state.sgd.velocity[k].shape() {
                    return Err(Error::Format(format!("velocity shape mismatch for {p}")));
                }
                state.sgd.velocity[k] = t;
            } else {
                return Err(Error::Format(format!("unexpected tensor {name} in snapshot")));
            }
        }
        Ok(state)
    }
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    pub report: StepReport,
}

/// Image index used at a 0-based iteration: a fresh permutation per epoch.
pub fn image_order(seed: u64, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(mix(mix(seed, ORDER_STREAM), epoch as u64)).shuffle(&mut order);
    order
}

/// Runs iterations `state.iteration .. cfg.max_iterations`.
///
/// `on_iteration` sees every row and the state after its update; use it for
/// checkpoints and periodic evaluation.
pub fn train<F>(
    det: &Detector,
    state: &mut TrainState,
    data: &[SceneRecord],
    cfg: &TrainConfig,
    mut on_iteration: F,
) -> Result<Vec<MetricsRow>>
where
    F: FnMut(&MetricsRow, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one image".into()));
    }
    for r in data {
        crate::detector::check_image(det.config(), &r.image)?;
    }
    let n = data.len();
    let mut rows = Vec::new();
    let mut order: Option<(usize, Vec<usize>)> = None;
    while state.iteration < cfg.max_iterations {
        let it = state.iteration;
        let epoch = it / n;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, image_order(cfg.seed, n, epoch)));
        }
        let rec = &data[order.as_ref().expect("order").1[it % n]];
        state.params.zero_grads();
        let mut rng = Rng::new(mix(cfg.seed, it as u64));
        let report = det.train_step(&mut state.params, &rec.image, &rec.gts, &mut rng)?;
        let lr = cfg.lr_at(it);
        sgd_step(&mut state.params, &mut state.sgd, lr, cfg.momentum, cfg.weight_decay)
            .map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        state.iteration += 1;
        let row = MetricsRow { iteration: it, lr, report };
        on_iteration(&row, state)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Metrics CSV text. `generated` adds a leading `# generated ...` line.
pub fn metrics_csv(rows: &[MetricsRow], stages: usize, generated: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(g) = generated {
        let _ = writeln!(s, "# generated {g}");
    }
    let mut head = vec!["iteration".to_string(), "lr".into()];
    head.extend((1..=stages).map(|t| format!("cls_stage{t}")));
    head.extend(["loc", "crpn_total", "roi_cls", "roi_loc", "total"].map(String::from));
    for key in ["active", "batch", "rejection", "mean_true_score"] {
        head.extend((1..=stages).map(|t| format!("{key}_stage{t}")));
    }
    head.extend(["hard_fraction".to_string(), "rois".into()]);
    let _ = writeln!(s, "{}", head.join(","));
    for r in rows {
        let l = &r.report.loss;
        let st = &r.report.stats;
        let mut f: Vec<String> = vec![r.iteration.to_string(), r.lr.to_string()];
        f.extend(l.per_stage_cls.iter().map(f64::to_string));
        f.extend([l.loc, l.crpn_total, l.roi_cls, l.roi_loc, l.detection_total].map(|v| v.to_string()));
        f.extend(st.active.iter().map(usize::to_string));
        f.extend(st.batch.iter().map(usize::to_string));
        f.extend(st.rejection.iter().map(f64::to_string));
        f.extend(st.mean_true_score.iter().map(f64::to_string));
        f.extend([st.hard_fraction.to_string(), r.report.proposals.to_string()]);
        let _ = writeln!(s, "{}", f.join(","));
    }
    s
}

#[cfg(test)]
pub(crate) mod tests;
