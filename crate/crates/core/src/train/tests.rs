use super::*;
use crate::backbone::BackboneConfig;
use crate::cascade::CascadeConfig;
use crate::detector::ModelConfig;
use crate::synth::{generate_dataset, SceneSpec};

fn scalar_store(v: f64, g: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::scalar(v));
    set_grad(&mut s, g);
    s
}

fn set_grad(s: &mut ParamStore, g: f64) {
    // Route a known gradient through the tape so the store sees it exactly.
    s.zero_grads();
    let mut tape = crate::tensor::Tape::new();
    let p = s.bind(&mut tape, true);
    let id = s.id("w").unwrap();
    let c = tape.constant(Tensor::scalar(g));
    let y = tape.mul(p.get(id), c).unwrap();
    tape.backward(y).unwrap();
    s.accumulate_grads(&tape, &p);
}

fn w(s: &ParamStore) -> f64 {
    s.value(s.id("w").unwrap()).item()
}

#[test]
fn sgd_fixed_point() {
    let mut s = scalar_store(3.0, 0.0);
    let mut st = SgdState::new(&s);
    sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
    assert_eq!(w(&s), 3.0);
}

#[test]
fn sgd_vanilla_and_momentum_steps() {
    let mut s = scalar_store(1.0, 1.0);
    let mut st = SgdState::new(&s);
    sgd_step(&mut s, &mut st, 0.1, 0.0, 0.0).unwrap();
    assert!((w(&s) - 0.9).abs() < 1e-15);

    let mut s = scalar_store(1.0, 1.0);
    let mut st = SgdState::new(&s);
    sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
    sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap();
    assert!((1.0 - w(&s) - 0.29).abs() < 1e-12);
}

#[test]
fn sgd_without_momentum_or_decay_is_gradient_descent() {
    let mut r = Rng::new(4);
    for _ in 0..20 {
        let (p0, g, lr) = (r.range(-2.0, 2.0), r.range(-2.0, 2.0), r.range(0.0, 0.5));
        let mut s = scalar_store(p0, g);
        let mut st = SgdState::new(&s);
        sgd_step(&mut s, &mut st, lr, 0.0, 0.0).unwrap();
        assert_eq!(w(&s), p0 - lr * g);
    }
}

#[test]
fn sgd_weight_decay_term() {
    let mut s = scalar_store(2.0, 0.0);
    let mut st = SgdState::new(&s);
    sgd_step(&mut s, &mut st, 0.5, 0.0, 0.1).unwrap();
    assert!((w(&s) - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
}

#[test]
fn sgd_rejects_non_finite_gradients_untouched() {
    let mut s = scalar_store(1.0, f64::NAN);
    let mut st = SgdState::new(&s);
    let err = sgd_step(&mut s, &mut st, 0.1, 0.9, 0.0).unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
    assert_eq!(w(&s), 1.0);
    assert_eq!(st.velocity[0].item(), 0.0);
}

#[test]
fn schedule_lookup() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(0), 0.01);
    assert_eq!(c.lr_at(1499), 0.01);
    assert_eq!(c.lr_at(1500), 0.001);
    assert_eq!(c.lr_at(5000), 0.001);
    assert_eq!(c.boundaries(), vec![1500, 2000]);
    assert!(TrainConfig { lr_schedule: vec![(0, 0.1)], ..c.clone() }.validate().is_err());
    assert!(TrainConfig { lr_schedule: vec![], ..c }.validate().is_err());
}

#[test]
fn epoch_orders_are_permutations() {
    for e in 0..5 {
        let mut o = image_order(3, 17, e);
        o.sort_unstable();
        assert_eq!(o, (0..17).collect::<Vec<_>>());
    }
    assert_ne!(image_order(3, 17, 0), image_order(3, 17, 1));
}

pub(crate) fn small_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            channels: 8,
            stem_channels: 8,
            input_size: 48,
            ..Default::default()
        },
        cascade: CascadeConfig {
            head_channels: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn small_data(n: usize) -> Vec<SceneRecord> {
    let spec = SceneSpec {
        image_size: 48,
        num_images: n,
        object_size: [12.0, 24.0],
        ..Default::default()
    };
    generate_dataset(&spec).unwrap()
}

fn setup(seed: u64) -> (Detector, TrainState) {
    let mut store = ParamStore::new();
    let det = Detector::new(&small_model(), &mut store, &mut init_rng(seed)).unwrap();
    (det, TrainState::new(store))
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (det, mut st) = setup(1);
    let before = st.params.named_tensors();
    let cfg = TrainConfig { lr_schedule: vec![(5, 0.0)], max_iterations: 5, ..Default::default() };
    train(&det, &mut st, &small_data(2), &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(st.params.named_tensors(), before);
}

#[test]
fn empty_dataset_is_rejected() {
    let (det, mut st) = setup(1);
    assert!(train(&det, &mut st, &[], &TrainConfig::default(), |_, _| Ok(())).is_err());
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig { max_iterations: 6, seed: 5, ..Default::default() };
    let data = small_data(3);
    let run = || {
        let (det, mut st) = setup(2);
        let rows = train(&det, &mut st, &data, &cfg, |_, _| Ok(())).unwrap();
        metrics_csv(&rows, 4, None)
    };
    assert_eq!(run(), run());
}

#[test]
fn overfits_two_images() {
    let cfg = TrainConfig { lr_schedule: vec![(200, 0.01)], max_iterations: 200, ..Default::default() };
    let (det, mut st) = setup(3);
    let rows = train(&det, &mut st, &small_data(2), &cfg, |_, _| Ok(())).unwrap();
    let first = rows[0].report.loss.detection_total;
    let last = rows.last().unwrap().report.loss.detection_total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn resume_continues_bit_identically() {
    let cfg = TrainConfig { max_iterations: 8, seed: 9, lr_schedule: vec![(4, 0.01), (4, 0.005)], ..Default::default() };
    let data = small_data(3);
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("mid.snap");

    let (det, mut st) = setup(4);
    let full = train(&det, &mut st, &data, &cfg, |row, s| {
        if row.iteration == 3 {
            s.save(&snap)?;
        }
        Ok(())
    })
    .unwrap();

    let (det2, fresh) = setup(99);
    let mut resumed = TrainState::load(&snap, fresh.params).unwrap();
    assert_eq!(resumed.iteration, 4);
    let tail = train(&det2, &mut resumed, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(tail, full[4..]);
    assert_eq!(resumed.params.named_tensors(), st.params.named_tensors());
    assert_eq!(resumed.sgd, st.sgd);
}

#[test]
fn snapshot_with_bad_magic_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.snap");
    std::fs::write(&p, b"NOPE1\0\0\0\0").unwrap();
    let (_, st) = setup(1);
    assert!(matches!(TrainState::load(&p, st.params), Err(Error::Format(_))));
}

#[test]
fn metrics_header_names_every_column() {
    let csv = metrics_csv(&[], 2, Some("now"));
    assert_eq!(
        csv,
        "# generated now\niteration,lr,cls_stage1,cls_stage2,loc,crpn_total,roi_cls,roi_loc,total,\
active_stage1,active_stage2,batch_stage1,batch_stage2,rejection_stage1,rejection_stage2,\
mean_true_score_stage1,mean_true_score_stage2,hard_fraction,rois\n"
    );
}
